import csv
import json
from pathlib import Path

import numpy as np
import pytest

from conftest import DATA_DIR
from rvnn import cli
from rvnn.harness import (
    ConfigError,
    METRICS_COLUMNS,
    MetricsWriter,
    load_checkpoint_model,
    load_config,
    param_count_table,
    policy_theory_experiment,
    read_metrics,
    report,
    train_experiment,
    validate_config,
)


def write_config(tmp_path, name="config.json", **cfg):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


BASELINE_SMOKE = dict(
    kind="baseline", seed=0, fraction=0.01, epochs=1, batch_size=4, lr=3e-3,
    model={"channels": [10, 20], "fc_size": 68},
)
RVNN_SMOKE = dict(
    kind="rvnn", seed=0, fraction=0.003, epochs=1, batch_size=8, lr=3e-3,
    model={"conv_channels": [4, 8], "fc_size": 16, "hidden_size": 8, "steps": 1},
)


class TestConfigValidation:
    def test_unknown_top_level_key_is_a_hard_error(self):
        with pytest.raises(ConfigError, match="unknown key.*'epcohs'"):
            validate_config({"kind": "baseline", "seed": 0, "epcohs": 3})

    def test_unknown_model_key_is_a_hard_error(self):
        with pytest.raises(ConfigError, match="unknown key.*'chanels'"):
            validate_config({"kind": "baseline", "seed": 0, "model": {"chanels": [4, 8]}})

    def test_seed_is_mandatory(self):
        with pytest.raises(ConfigError, match="missing required key.*'seed'"):
            validate_config({"kind": "baseline"})

    def test_seed_must_be_an_integer(self):
        with pytest.raises(ConfigError, match="seed must be an integer"):
            validate_config({"kind": "baseline", "seed": "0"})
        with pytest.raises(ConfigError, match="seed must be an integer"):
            validate_config({"kind": "baseline", "seed": True})

    def test_bad_kind(self):
        with pytest.raises(ConfigError, match="kind must be one of"):
            validate_config({"kind": "resnet", "seed": 0})

    def test_fraction_bounds(self):
        with pytest.raises(ConfigError, match="fraction"):
            validate_config({"kind": "rvnn", "seed": 0, "fraction": 0.0})
        with pytest.raises(ConfigError, match="fraction"):
            validate_config({"kind": "rvnn", "seed": 0, "fraction": 1.5})

    def test_eval_requires_checkpoint_and_known_modes(self):
        with pytest.raises(ConfigError, match="missing required key.*'checkpoint'"):
            validate_config({"kind": "eval", "seed": 0})
        with pytest.raises(ConfigError, match="query_modes"):
            validate_config({"kind": "eval", "seed": 0, "checkpoint": "x", "query_modes": ["noisy"]})

    def test_decomposed_policy_names_checked(self):
        with pytest.raises(ConfigError, match="unknown policy"):
            validate_config({"kind": "decomposed", "seed": 0, "policies": ["greedy"]})

    def test_policy_theory_rejects_unclosed_policies(self):
        with pytest.raises(ConfigError, match="no closed form"):
            validate_config({"kind": "policy-theory", "seed": 0, "policies": ["top_k"]})

    def test_sample_efficiency_fraction_specs_checked(self):
        with pytest.raises(ConfigError, match=r"fractions\[0\]"):
            validate_config({"kind": "sample-efficiency", "seed": 0, "fractions": [{"fraction": 0.1}]})

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")

    def test_load_config_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(path)

    def test_seed_override(self, tmp_path):
        path = write_config(tmp_path, kind="baseline", seed=3)
        assert load_config(path)["seed"] == 3
        assert load_config(path, seed_override=9)["seed"] == 9


class TestMetricsFiles:
    def test_writer_creates_fixed_header(self, tmp_path):
        MetricsWriter(tmp_path / "m.csv")
        with open(tmp_path / "m.csv") as fh:
            assert tuple(next(csv.reader(fh))) == METRICS_COLUMNS

    def test_writer_rejects_accuracy_outside_unit_interval(self, tmp_path):
        w = MetricsWriter(tmp_path / "m.csv")
        with pytest.raises(ValueError, match=r"accuracy must be in \[0, 1\]"):
            w.row(run_id="r", kind="baseline", epoch=1, split="test", accuracy=1.2)

    def test_writer_blanks_out_nan(self, tmp_path):
        w = MetricsWriter(tmp_path / "m.csv")
        w.row(run_id="r", kind="baseline", epoch=1, split="train", loss=0.5, tau=float("nan"))
        rows = read_metrics(tmp_path / "m.csv")
        assert rows[0]["tau"] is None and rows[0]["loss"] == 0.5

    def test_read_rejects_wrong_column_count_with_line_number(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(",".join(METRICS_COLUMNS) + "\nr,baseline,1,test\n")
        with pytest.raises(ConfigError, match=r"m\.csv:2: expected 11 columns"):
            read_metrics(path)

    def test_read_rejects_non_numeric_accuracy_with_line_number(self, tmp_path):
        path = tmp_path / "m.csv"
        good = "r,baseline,1,test,,0.5,,100,1.0,0,1.0"
        bad = "r,baseline,2,test,,high,,100,1.0,0,1.0"
        path.write_text(",".join(METRICS_COLUMNS) + f"\n{good}\n{bad}\n")
        with pytest.raises(ConfigError, match=r"m\.csv:3: accuracy is not a number"):
            read_metrics(path)

    def test_read_rejects_out_of_range_accuracy(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(",".join(METRICS_COLUMNS) + "\nr,baseline,1,test,,1.7,,100,1.0,0,1.0\n")
        with pytest.raises(ConfigError, match=r"outside \[0, 1\]"):
            read_metrics(path)

    def test_read_rejects_foreign_header(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ConfigError, match=r"m\.csv:1: bad header"):
            read_metrics(path)

    def test_read_empty_file_gives_no_rows(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("")
        assert read_metrics(path) == []


def metrics_file(tmp_path, name, rows):
    path = tmp_path / name
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        w.writerows(rows)
    return path


def result_row(run_id, epoch, accuracy, kind="baseline", split="test"):
    return [run_id, kind, epoch, split, "", accuracy, "", 100, 1.0, 0, ""]


class TestReport:
    def test_best_epoch_per_run(self, tmp_path):
        path = metrics_file(tmp_path, "m.csv", [
            result_row("a", 1, 0.90), result_row("a", 2, 0.95), result_row("a", 3, 0.93),
        ])
        acc_rows, _ = report([path], tmp_path / "out")
        assert len(acc_rows) == 1
        assert acc_rows[0]["best_epoch"] == 2 and acc_rows[0]["accuracy"] == 0.95

    def test_duplicate_run_ids_across_files_keep_best(self, tmp_path):
        p1 = metrics_file(tmp_path, "m1.csv", [result_row("a", 1, 0.90)])
        p2 = metrics_file(tmp_path, "m2.csv", [result_row("a", 1, 0.92)])
        acc_rows, _ = report([p1, p2], tmp_path / "out")
        assert len(acc_rows) == 1 and acc_rows[0]["accuracy"] == 0.92

    def test_query_mode_rows_pivot_with_drops(self, tmp_path):
        path = metrics_file(tmp_path, "m.csv", [
            result_row("a", 5, 0.95, kind="ablate-query", split="standard"),
            result_row("a", 5, 0.93, kind="ablate-query", split="blank"),
            result_row("a", 5, 0.92, kind="ablate-query", split="mistaken"),
        ])
        _, mode_rows = report([path], tmp_path / "out")
        assert mode_rows == [{
            "run_id": "a", "standard": 0.95, "blank": 0.93, "mistaken": 0.92,
            "blank_drop": pytest.approx(0.02), "mistaken_drop": pytest.approx(0.03),
        }]

    def test_empty_inputs_give_empty_tables(self, tmp_path):
        acc_rows, mode_rows = report([], tmp_path / "out")
        assert acc_rows == [] and mode_rows == []
        table = (tmp_path / "out" / "accuracy-table.csv").read_text().strip()
        assert table == "run_id,kind,params,fraction,seed,best_epoch,accuracy"

    def test_train_rows_do_not_enter_the_accuracy_table(self, tmp_path):
        path = metrics_file(tmp_path, "m.csv", [
            ["a", "baseline", 1, "train", 0.4, "", "", 100, 1.0, 0, 2.0],
        ])
        acc_rows, mode_rows = report([path], tmp_path / "out")
        assert acc_rows == [] and mode_rows == []


class TestPolicyTheoryExperiment:
    def test_writes_table_matching_closed_forms(self, tmp_path):
        cfg = validate_config({
            "kind": "policy-theory", "seed": 0,
            "budgets": [0, 2, 9], "episodes": 40000,
        })
        rows = policy_theory_experiment(cfg, tmp_path)
        assert len(rows) == 9
        for row in rows:
            assert row["abs_error"] < 0.01
        with open(tmp_path / "policy-theory.csv") as fh:
            parsed = list(csv.DictReader(fh))
        assert len(parsed) == 9
        optimal9 = next(r for r in parsed if r["policy"] == "optimal" and r["N"] == "9")
        assert float(optimal9["closed_form"]) == 1.0


class TestParamTable:
    def test_preset_counts(self, tmp_path):
        rows = {r["model"]: r["params"] for r in param_count_table(tmp_path)}
        assert rows == {
            "baseline-default": 27798,
            "baseline-larger": 53348,
            "rvnn-default": 13760,
            "rvnn-larger": 33650,
        }
        with open(tmp_path / "params.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 4


@pytest.fixture(scope="module")
def baseline_run(tmp_path_factory):
    """One tiny baseline training run shared across the integration tests."""
    out = tmp_path_factory.mktemp("baseline-run")
    summary = train_experiment(dict(BASELINE_SMOKE), DATA_DIR, out)
    return out, summary


class TestTrainExperiment:
    def test_metrics_rows_and_checkpoint(self, baseline_run):
        out, summary = baseline_run
        rows = read_metrics(out / "metrics.csv")
        assert len(rows) == 2  # one train row and one test row for the single epoch
        train_row, test_split_row = rows
        assert train_row["split"] == "train" and train_row["loss"] > 0
        assert train_row["accuracy"] is None  # loss-only row: accuracy was not measured
        assert test_split_row["split"] == "test" and 0 < test_split_row["accuracy"] <= 1
        assert test_split_row["params"] == summary["params"]
        assert test_split_row["fraction"] == "0.01"
        assert summary["checkpoint"].exists()

    def test_checkpoint_round_trip_reproduces_evaluation(self, baseline_run):
        out, summary = baseline_run
        net, meta = load_checkpoint_model(summary["checkpoint"])
        test = summary["test"]
        live = summary["estimator"].predict(test.images[:300])
        reloaded = np.array([net.predict_class(img) for img in test.images[:300]])
        np.testing.assert_array_equal(live, reloaded)
        assert meta["kind"] == "baseline" and meta["best_epoch"] == summary["estimator"].best_epoch_

    def test_same_config_same_seed_reproduces_metrics(self, baseline_run, tmp_path):
        # wall time is the one legitimately varying column
        out, _ = baseline_run
        train_experiment(dict(BASELINE_SMOKE), DATA_DIR, tmp_path)
        first = [{k: v for k, v in r.items() if k != "seconds"} for r in read_metrics(out / "metrics.csv")]
        second = [{k: v for k, v in r.items() if k != "seconds"} for r in read_metrics(tmp_path / "metrics.csv")]
        assert first == second

    def test_writes_stay_inside_the_output_directory(self, tmp_path, monkeypatch):
        workdir = tmp_path / "cwd"
        out = tmp_path / "out"
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        train_experiment(dict(BASELINE_SMOKE), DATA_DIR, out)
        assert list(workdir.iterdir()) == []
        stray = set(tmp_path.iterdir()) - {workdir, out}
        assert stray == set()

    def test_smoke_run_is_fast_and_learns(self, baseline_run):
        out, summary = baseline_run
        rows = read_metrics(out / "metrics.csv")
        assert rows[0]["seconds"] < 60
        assert summary["accuracy"] > 0.80


class TestCli:
    def test_params_command_exits_zero(self, capsys):
        assert cli.main(["params"]) == 0
        assert "27798" in capsys.readouterr().out

    def test_missing_config_file_exits_one(self, tmp_path, capsys):
        code = cli.main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
        assert code == 1
        assert "not found" in capsys.readouterr().err

    def test_unknown_config_key_exits_one(self, tmp_path, capsys):
        path = write_config(tmp_path, kind="baseline", seed=0, epcohs=2)
        code = cli.main(["train", "--config", str(path), "--out", str(tmp_path)])
        assert code == 1
        assert "unknown key" in capsys.readouterr().err

    def test_kind_command_mismatch_exits_one(self, tmp_path, capsys):
        path = write_config(tmp_path, kind="policy-theory", seed=0)
        code = cli.main(["train", "--config", str(path), "--out", str(tmp_path)])
        assert code == 1
        assert "does not belong" in capsys.readouterr().err

    def test_missing_data_dir_exits_one(self, tmp_path, capsys):
        path = write_config(tmp_path, **BASELINE_SMOKE)
        code = cli.main([
            "train", "--config", str(path),
            "--data-dir", str(tmp_path / "absent"), "--out", str(tmp_path / "out"),
        ])
        assert code == 1
        assert "data directory not found" in capsys.readouterr().err

    def test_runtime_failure_exits_two(self, tmp_path, monkeypatch, capsys):
        def boom(cfg, data_dir, out_dir):
            raise RuntimeError("non-finite loss (nan) at epoch 1; try a lower learning rate")

        monkeypatch.setattr(cli, "train_experiment", boom)
        path = write_config(tmp_path, **BASELINE_SMOKE)
        code = cli.main(["train", "--config", str(path), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "non-finite loss" in capsys.readouterr().err

    def test_unexpected_failure_exits_two(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(cli, "train_experiment", lambda *a: 1 / 0)
        path = write_config(tmp_path, **BASELINE_SMOKE)
        code = cli.main(["train", "--config", str(path), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "ZeroDivisionError" in capsys.readouterr().err

    def test_decomposed_command_dispatches(self, tmp_path, monkeypatch, capsys):
        # every subcommand must reach its experiment; a subparser alone is not wiring
        seen = {}

        def stub(cfg, data_dir, out_dir):
            seen["kind"] = cfg["kind"]
            return {
                "recognizer_accuracy": 0.87, "pair_accuracy": None,
                "rows": [{"policy": "no_query", "comparator": "oracle", "N": 0,
                          "accuracy": 0.87, "stderr": 0.003, "episodes": 100}],
            }

        monkeypatch.setattr(cli, "decomposed_experiment", stub)
        path = write_config(tmp_path, kind="decomposed", seed=0)
        code = cli.main(["decomposed", "--config", str(path), "--out", str(tmp_path / "out")])
        assert code == 0
        assert seen["kind"] == "decomposed"
        assert "recognizer accuracy: 0.8700" in capsys.readouterr().out

    def test_policy_theory_without_config(self, tmp_path, capsys):
        code = cli.main(["policy-theory", "--out", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "policy-theory.csv").exists()
        assert "optimal" in capsys.readouterr().out

    def test_report_empty_inputs_exits_zero(self, tmp_path, capsys):
        assert cli.main(["report", "--out", str(tmp_path)]) == 0
        assert "0 run(s)" in capsys.readouterr().out

    def test_report_malformed_row_exits_one_with_line_number(self, tmp_path, capsys):
        path = tmp_path / "m.csv"
        path.write_text(",".join(METRICS_COLUMNS) + "\nr,baseline,1,test,oops\n")
        code = cli.main(["report", str(path), "--out", str(tmp_path / "out")])
        assert code == 1
        assert ":2:" in capsys.readouterr().err

    def test_report_aggregates_and_prints_table(self, tmp_path, capsys):
        path = metrics_file(tmp_path, "m.csv", [result_row("runA", 1, 0.91)])
        assert cli.main(["report", str(path), "--out", str(tmp_path / "out")]) == 0
        out = capsys.readouterr().out
        assert "runA" in out and "0.91" in out

    def test_train_eval_cycle(self, tmp_path, capsys):
        cfg = write_config(tmp_path, **BASELINE_SMOKE)
        out = tmp_path / "out"
        assert cli.main([
            "train", "--config", str(cfg), "--data-dir", str(DATA_DIR), "--out", str(out),
        ]) == 0
        ckpt = out / "checkpoints" / "baseline-s0.ckpt"
        assert "baseline-s0" in capsys.readouterr().out
        eval_cfg = write_config(
            tmp_path, name="eval.json",
            kind="eval", seed=0, checkpoint=str(ckpt), query_modes=["standard"],
        )
        assert cli.main([
            "eval", "--config", str(eval_cfg), "--data-dir", str(DATA_DIR), "--out", str(out),
        ]) == 0
        assert "standard:" in capsys.readouterr().out

    def test_eval_baseline_in_blank_mode_is_a_mismatch(self, tmp_path, capsys):
        cfg = write_config(tmp_path, **BASELINE_SMOKE)
        out = tmp_path / "out"
        cli.main(["train", "--config", str(cfg), "--data-dir", str(DATA_DIR), "--out", str(out)])
        capsys.readouterr()
        eval_cfg = write_config(
            tmp_path, name="eval.json",
            kind="eval", seed=0,
            checkpoint=str(out / "checkpoints" / "baseline-s0.ckpt"), query_modes=["blank"],
        )
        code = cli.main([
            "eval", "--config", str(eval_cfg), "--data-dir", str(DATA_DIR), "--out", str(out),
        ])
        assert code == 1
        assert "checkpoint/config mismatch" in capsys.readouterr().err


@pytest.fixture(scope="module")
def rvnn_ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("rvnn-ablate")
    cfg = dict(RVNN_SMOKE)
    cfg["kind"] = "ablate-query"
    from rvnn.harness import ablate_experiment

    return out, ablate_experiment(cfg, DATA_DIR, out)


class TestAblateExperiment:
    def test_emits_all_three_query_mode_rows(self, rvnn_ablation):
        out, summary = rvnn_ablation
        rows = read_metrics(out / "metrics.csv")
        modes = {r["split"]: r["accuracy"] for r in rows if r["kind"] == "ablate-query" and r["split"] != "train"}
        assert set(modes) >= {"standard", "blank", "mistaken", "test"}
        assert summary["modes"]["standard"] == modes["standard"]

    def test_blank_accuracy_ignores_exemplar_seed(self, rvnn_ablation):
        _, summary = rvnn_ablation
        est, test = summary["estimator"], summary["test"]
        a = est.accuracy(test.images[:200], test.labels[:200], query_mode="blank", exemplar_seed=0)
        b = est.accuracy(test.images[:200], test.labels[:200], query_mode="blank", exemplar_seed=99)
        assert a == b

    def test_rvnn_checkpoint_round_trip(self, rvnn_ablation):
        out, summary = rvnn_ablation
        net, meta = load_checkpoint_model(summary["checkpoint"])
        assert meta["kind"] == "rvnn"
        from rvnn.harness import _eval_accuracy
        from rvnn.data import Dataset

        test = summary["test"]
        small = Dataset(test.images[:200], test.labels[:200])
        live = summary["estimator"].accuracy(small.images, small.labels, exemplar_seed=0)
        reloaded = _eval_accuracy(net, meta, small, summary["pools"], "standard", 0)
        assert live == reloaded


class TestSampleEfficiency:
    def test_shares_the_train_code_path(self, tmp_path):
        """A sample-efficiency fraction row must reproduce a plain train run
        with the same fraction and seed, value for value."""
        from rvnn.harness import sample_efficiency_experiment

        cfg = validate_config({
            "kind": "sample-efficiency", "seed": 0,
            "fractions": [{"fraction": 0.01, "epochs": 1}],
            "batch_size": 4, "lr": 3e-3,
            "baseline": {"channels": [10, 20], "fc_size": 68},
            "rvnn": {"conv_channels": [4, 8], "fc_size": 16, "hidden_size": 8, "steps": 1},
        })
        results = sample_efficiency_experiment(cfg, DATA_DIR, tmp_path / "se")
        assert len(results) == 1 and set(results[0]) == {"fraction", "epochs", "baseline", "rvnn"}

        plain = train_experiment(dict(BASELINE_SMOKE), DATA_DIR, tmp_path / "plain")
        assert results[0]["baseline"] == plain["accuracy"]
        se_rows = [r for r in read_metrics(tmp_path / "se" / "metrics.csv") if r["kind"] == "baseline"]
        plain_rows = read_metrics(tmp_path / "plain" / "metrics.csv")
        for a, b in zip(se_rows, plain_rows):
            drop = ("run_id", "seconds")
            assert {k: v for k, v in a.items() if k not in drop} == {k: v for k, v in b.items() if k not in drop}
