"""Config-driven experiment orchestration.

Every experiment is described by a JSON config with a fixed schema (unknown
keys are hard errors), reads data from one directory, and writes everything
it produces (metrics CSV, checkpoints, tables) under one output directory.
Runs are deterministic per (config, seed) at a fixed thread count.
"""

import csv
import json
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_params, restore_params, save_params
from .data import load_mnist, make_split, subset
from .decomposed import (
    InformedController,
    OracleComparator,
    evaluate_fixed_policy,
    evaluate_informed,
    learned_scorer_factory,
    oracle_scorer_factory,
    policy_theory,
    recognizer_probs,
    simulate_policy_theory,
    train_informed_controller,
    train_learned_comparator,
    train_weak_recognizer,
)
from .model import BaselineCnnClassifier, RvnnClassifier
from .network import BaselineCnn, RvnnConfig, RvnnNetwork
from .support import SupportStore

METRICS_COLUMNS = ("run_id", "kind", "epoch", "split", "loss", "accuracy", "tau", "params", "fraction", "seed", "seconds")
DECOMPOSED_COLUMNS = ("policy", "comparator", "N", "accuracy", "stderr", "episodes")
QUERY_MODES = ("standard", "blank", "mistaken")

MODEL_PRESETS = {
    "baseline-default": {"channels": [10, 20], "fc_size": 68, "dropout": 0.0},
    "baseline-larger": {"channels": [14, 28], "fc_size": 94, "dropout": 0.0},
    "rvnn-default": {
        "fusion": "concat_begin", "conv_channels": [8, 16], "fc_size": 30, "hidden_size": 16,
        "steps": 2, "estimator": "gumbel_softmax", "wc_space": "pixel",
        "query_memory": False, "separate_heads": False,
    },
    "rvnn-larger": {
        "fusion": "concat_begin", "conv_channels": [12, 24], "fc_size": 52, "hidden_size": 24,
        "steps": 2, "estimator": "gumbel_softmax", "wc_space": "pixel",
        "query_memory": False, "separate_heads": False,
    },
}


class ConfigError(ValueError):
    """Config file failed validation (bad key, missing field, bad value)."""


def _require(cfg, where, allowed, required=()):
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}; allowed keys: {sorted(allowed)}")
    missing = sorted(set(required) - set(cfg))
    if missing:
        raise ConfigError(f"missing required key(s) {missing} in {where}")


_COMMON = ("kind", "seed", "run_id")
_TRAIN_KEYS = _COMMON + ("epochs", "batch_size", "lr", "fraction", "model", "exemplar_seed")
_BASELINE_MODEL = ("channels", "fc_size", "dropout")
_RVNN_MODEL = (
    "fusion", "conv_channels", "fc_size", "hidden_size", "steps",
    "estimator", "wc_space", "query_memory", "separate_heads",
)

_SCHEMAS = {
    "baseline": _TRAIN_KEYS,
    "rvnn": _TRAIN_KEYS,
    "ablate-query": _TRAIN_KEYS,
    "eval": _COMMON + ("checkpoint", "query_modes", "exemplar_seed"),
    "decomposed": _COMMON + (
        "policies", "budgets", "comparators", "episodes",
        "recognizer", "comparator_net", "informed",
    ),
    "sample-efficiency": _COMMON + ("fractions", "baseline", "rvnn", "batch_size", "lr"),
    "param-count": _COMMON,
    "policy-theory": _COMMON + ("policies", "num_classes", "budgets", "episodes"),
}


def validate_config(cfg, where="config"):
    """Check the config tree against the schema for its kind; returns cfg."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(cfg).__name__}")
    kind = cfg.get("kind")
    if kind not in _SCHEMAS:
        raise ConfigError(f"{where}: kind must be one of {sorted(_SCHEMAS)}, got {kind!r}")
    _require(cfg, where, _SCHEMAS[kind], required=("kind", "seed"))
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError(f"{where}: seed must be an integer, got {cfg['seed']!r}")

    if kind in ("baseline", "rvnn", "ablate-query"):
        model_keys = _BASELINE_MODEL if kind == "baseline" else _RVNN_MODEL
        _require(cfg.get("model", {}), f"{where}.model", model_keys)
        fraction = cfg.get("fraction", 1.0)
        if not 0 < fraction <= 1:
            raise ConfigError(f"{where}: fraction must be in (0, 1], got {fraction}")
    elif kind == "eval":
        _require(cfg, where, _SCHEMAS[kind], required=("kind", "seed", "checkpoint"))
        modes = cfg.get("query_modes", ["standard"])
        bad = [m for m in modes if m not in QUERY_MODES]
        if bad:
            raise ConfigError(f"{where}: query_modes {bad} not in {QUERY_MODES}")
    elif kind == "decomposed":
        for policy in cfg.get("policies", []):
            if policy not in ("no_query", "random", "random_no_repeat", "optimal", "top_k", "informed"):
                raise ConfigError(f"{where}: unknown policy {policy!r}")
        for comp in cfg.get("comparators", []):
            if comp not in ("oracle", "learned"):
                raise ConfigError(f"{where}: comparator must be 'oracle' or 'learned', got {comp!r}")
        _require(cfg.get("recognizer", {}), f"{where}.recognizer", ("band", "channels", "fc_size", "lr", "max_epochs", "attempts"))
        _require(cfg.get("comparator_net", {}), f"{where}.comparator_net",
                 ("pairs", "holdout_pairs", "epochs", "batch_size", "lr", "conv_channels", "fc_size"))
        _require(cfg.get("informed", {}), f"{where}.informed", ("hidden_size", "epochs", "batch_size", "lr"))
    elif kind == "sample-efficiency":
        _require(cfg, where, _SCHEMAS[kind], required=("kind", "seed", "fractions"))
        for i, spec in enumerate(cfg["fractions"]):
            _require(spec, f"{where}.fractions[{i}]", ("fraction", "epochs"), required=("fraction", "epochs"))
        _require(cfg.get("baseline", {}), f"{where}.baseline", _BASELINE_MODEL)
        _require(cfg.get("rvnn", {}), f"{where}.rvnn", _RVNN_MODEL)
    elif kind == "policy-theory":
        for policy in cfg.get("policies", ["optimal", "random", "random_no_repeat"]):
            if policy not in ("optimal", "random", "random_no_repeat"):
                raise ConfigError(f"{where}: policy {policy!r} has no closed form")
    return cfg


def load_config(path, seed_override=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if seed_override is not None:
        cfg["seed"] = seed_override
    return validate_config(cfg, where=str(path))


def _run_id(cfg):
    return cfg.get("run_id") or f"{cfg['kind']}-s{cfg['seed']}"


def _fmt(value):
    if value is None or value == "":
        return ""
    if isinstance(value, (float, np.floating)):
        if np.isnan(value):
            return ""
        return repr(float(value))
    return str(value)


class MetricsWriter:
    """Appends rows to a metrics CSV, creating the header once."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_COLUMNS)

    def row(self, **fields):
        unknown = set(fields) - set(METRICS_COLUMNS)
        if unknown:
            raise ValueError(f"unknown metrics fields {sorted(unknown)}")
        acc = fields.get("accuracy", "")
        if acc != "" and acc is not None and not 0.0 <= float(acc) <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {acc}")
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(fields.get(c, "")) for c in METRICS_COLUMNS])


def _load_split(data_dir, seed, fraction=1.0):
    train_all, test = load_mnist(data_dir)
    remainder, pools = make_split(train_all, support_per_class=100, seed=seed)
    return subset(remainder, fraction, seed=seed), pools, test


def _build_estimator(cfg):
    model = dict(cfg.get("model", {}))
    common = dict(
        epochs=cfg.get("epochs", 10),
        batch_size=cfg.get("batch_size", 64),
        lr=cfg.get("lr", 1e-3),
        seed=cfg["seed"],
    )
    if cfg["kind"] == "baseline":
        defaults = dict(MODEL_PRESETS["baseline-default"])
        defaults.update(model)
        return BaselineCnnClassifier(
            channels=tuple(defaults["channels"]), fc_size=defaults["fc_size"],
            dropout=defaults["dropout"], **common,
        )
    defaults = dict(MODEL_PRESETS["rvnn-default"])
    defaults.update(model)
    defaults["conv_channels"] = tuple(defaults["conv_channels"])
    return RvnnClassifier(**defaults, **common)


def train_experiment(cfg, data_dir, out_dir):
    """Train one model per the config; stream metrics, checkpoint the best.

    Returns a summary dict with the estimator and the datasets it used.
    """
    out = Path(out_dir)
    run_id = _run_id(cfg)
    fraction = cfg.get("fraction", 1.0)
    train, pools, test = _load_split(data_dir, cfg["seed"], fraction)
    est = _build_estimator(cfg)
    params = est.param_count()
    writer = MetricsWriter(out / "metrics.csv")

    def emit(record):
        common = dict(run_id=run_id, kind=cfg["kind"], epoch=record["epoch"],
                      params=params, fraction=fraction, seed=cfg["seed"])
        writer.row(split="train", loss=record["train_loss"], tau=record["tau"],
                   seconds=record["seconds"], **common)
        writer.row(split="test", accuracy=record["test_accuracy"], tau=record["tau"], **common)

    eval_set = (test.images, test.labels)
    if cfg["kind"] == "baseline":
        est.fit(train.images, train.labels, eval_set=eval_set, log=emit)
    else:
        est.fit(train.images, train.labels, support_pools=pools, eval_set=eval_set, log=emit)

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = ckpt_dir / f"{run_id}.ckpt"
    meta = {
        "kind": "baseline" if cfg["kind"] == "baseline" else "rvnn",
        "model": {k: (list(v) if isinstance(v, tuple) else v) for k, v in _model_fields(est).items()},
        "run_id": run_id,
        "seed": cfg["seed"],
        "data_seed": cfg["seed"],
        "fraction": fraction,
        "params": params,
        "best_epoch": est.best_epoch_,
        "best_accuracy": est.best_accuracy_,
    }
    save_params(ckpt_path, est.named_params(), meta=meta)
    return {
        "estimator": est, "run_id": run_id, "checkpoint": ckpt_path, "params": params,
        "test": test, "pools": pools, "accuracy": est.best_accuracy_, "writer": writer,
    }


def _model_fields(est):
    if isinstance(est, BaselineCnnClassifier):
        return {"channels": est.channels, "fc_size": est.fc_size, "dropout": est.dropout}
    return {
        "fusion": est.fusion, "conv_channels": est.conv_channels, "fc_size": est.fc_size,
        "hidden_size": est.hidden_size, "steps": est.steps, "estimator": est.estimator,
        "wc_space": est.wc_space, "query_memory": est.query_memory,
        "separate_heads": est.separate_heads,
    }


def _rebuild_net(meta):
    model = meta.get("model")
    kind = meta.get("kind")
    if not model or kind not in ("baseline", "rvnn"):
        raise ValueError("checkpoint/config mismatch: checkpoint lacks a model description")
    if kind == "baseline":
        return BaselineCnn(channels=tuple(model["channels"]), fc_size=model["fc_size"], rng=np.random.default_rng(0))
    model = dict(model)
    model["conv_channels"] = tuple(model["conv_channels"])
    return RvnnNetwork(RvnnConfig(**model).validate(), np.random.default_rng(0))


def load_checkpoint_model(path):
    """Rebuild the network stored in a checkpoint; returns (net, meta)."""
    loaded, meta = load_params(path)
    net = _rebuild_net(meta or {})
    try:
        restore_params(net.named_params(), loaded)
    except ValueError as e:
        raise ValueError(f"checkpoint/config mismatch: {e}") from e
    return net, meta


def _eval_accuracy(net, meta, test, pools, query_mode, exemplar_seed):
    if meta["kind"] == "baseline":
        if query_mode != "standard":
            raise ValueError(f"checkpoint/config mismatch: baseline checkpoints only evaluate in standard mode, got {query_mode!r}")
        hits = sum(net.predict_class(img) == y for img, y in zip(test.images, test.labels))
        return hits / len(test)
    store = SupportStore(pools, mode=query_mode, rng=np.random.default_rng(exemplar_seed))
    hits = 0
    for img, y in zip(test.images, test.labels):
        store.begin_episode()
        _, trace = net.forward_episode(img, store, mode="eval")
        hits += trace.prediction == y
    return hits / len(test)


def eval_experiment(cfg, data_dir, out_dir):
    """Evaluate a checkpoint on the full test set under each query mode."""
    ckpt = Path(cfg["checkpoint"])
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    net, meta = load_checkpoint_model(ckpt)
    train_all, test = load_mnist(data_dir)
    _, pools = make_split(train_all, support_per_class=100, seed=meta.get("data_seed", cfg["seed"]))
    writer = MetricsWriter(Path(out_dir) / "metrics.csv")
    results = {}
    for mode in cfg.get("query_modes", ["standard"]):
        t0 = time.perf_counter()
        acc = _eval_accuracy(net, meta, test, pools, mode, cfg.get("exemplar_seed", 0))
        results[mode] = acc
        writer.row(
            run_id=meta.get("run_id", _run_id(cfg)), kind="eval", epoch=meta.get("best_epoch", ""),
            split=mode, accuracy=acc, params=meta.get("params", ""),
            fraction=meta.get("fraction", ""), seed=cfg["seed"], seconds=time.perf_counter() - t0,
        )
    return results


def ablate_experiment(cfg, data_dir, out_dir):
    """Train one query-based model, evaluate all three query modes."""
    summary = train_experiment(cfg, data_dir, out_dir)
    est, test = summary["estimator"], summary["test"]
    exemplar_seed = cfg.get("exemplar_seed", 0)
    results = {}
    for mode in QUERY_MODES:
        t0 = time.perf_counter()
        acc = est.accuracy(test.images, test.labels, query_mode=mode, exemplar_seed=exemplar_seed)
        results[mode] = acc
        summary["writer"].row(
            run_id=summary["run_id"], kind=cfg["kind"], epoch=est.best_epoch_, split=mode,
            accuracy=acc, params=summary["params"], fraction=cfg.get("fraction", 1.0),
            seed=cfg["seed"], seconds=time.perf_counter() - t0,
        )
    summary["modes"] = results
    return summary


def sample_efficiency_experiment(cfg, data_dir, out_dir):
    """Train the matched pair at each data fraction with shared seeds."""
    results = []
    for spec in cfg["fractions"]:
        fraction, epochs = spec["fraction"], spec["epochs"]
        pair = {}
        for kind, model_key in (("baseline", "baseline"), ("rvnn", "rvnn")):
            sub_cfg = {
                "kind": kind,
                "seed": cfg["seed"],
                "run_id": f"{kind}-f{fraction}-s{cfg['seed']}",
                "fraction": fraction,
                "epochs": epochs,
                "batch_size": cfg.get("batch_size", 64),
                "lr": cfg.get("lr", 1e-3),
                "model": cfg.get(model_key, {}),
            }
            summary = train_experiment(sub_cfg, data_dir, out_dir)
            pair[kind] = summary["accuracy"]
        results.append({"fraction": fraction, "epochs": epochs, **pair})
    return results


def decomposed_experiment(cfg, data_dir, out_dir):
    """Frozen recognizer + comparator + policy sweep; writes decomposed.csv."""
    seed = cfg["seed"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, pools, test = _load_split(data_dir, seed)

    rcfg = dict(cfg.get("recognizer", {}))
    recognizer, rec_acc = train_weak_recognizer(
        train.images, train.labels, test.images, test.labels,
        band=tuple(rcfg.get("band", (0.84, 0.90))),
        channels=tuple(rcfg.get("channels", (3, 6))),
        fc_size=rcfg.get("fc_size", 24),
        lr=rcfg.get("lr", 1e-3),
        max_epochs=rcfg.get("max_epochs", 2),
        attempts=rcfg.get("attempts", 3),
        seed=seed,
    )
    probs_test = recognizer_probs(recognizer, test.images)

    limit = cfg.get("episodes") or len(test)
    test_images, test_labels = test.images[:limit], test.labels[:limit]
    probs_test = probs_test[:limit]

    comparators = list(cfg.get("comparators", ["oracle"]))
    policies = list(cfg.get("policies", ["no_query", "random_no_repeat", "top_k", "informed"]))
    budgets = list(cfg.get("budgets", [0, 1, 2]))
    icfg = dict(cfg.get("informed", {}))

    pair_acc = None
    learned = None
    if "learned" in comparators:
        ccfg = dict(cfg.get("comparator_net", {}))
        learned, pair_acc = train_learned_comparator(
            train.images, train.labels, test.images, test.labels,
            pairs=ccfg.get("pairs", 60000),
            holdout_pairs=ccfg.get("holdout_pairs", 4000),
            epochs=ccfg.get("epochs", 4),
            batch_size=ccfg.get("batch_size", 64),
            lr=ccfg.get("lr", 1e-3),
            conv_channels=tuple(ccfg.get("conv_channels", (8, 16))),
            fc_size=ccfg.get("fc_size", 64),
            seed=seed,
        )

    probs_train = None
    if "informed" in policies:
        probs_train = recognizer_probs(recognizer, train.images)

    rows = []
    for comp_name in comparators:
        if comp_name == "oracle":
            comparator, store = OracleComparator(), None
            eval_factory = oracle_scorer_factory(test_labels)
            train_factory = oracle_scorer_factory(train.labels)
        else:
            comparator = learned
            store = SupportStore(pools, mode="standard", rng=np.random.default_rng(cfg.get("seed") + 7))
            eval_factory = learned_scorer_factory(learned.net, test_images, store)
            train_factory = learned_scorer_factory(learned.net, train.images, store)
        for policy in policies:
            for budget in budgets:
                if policy == "informed":
                    ctrl = InformedController(
                        hidden_size=icfg.get("hidden_size", 64), rng=np.random.default_rng(seed + 11)
                    )
                    train_informed_controller(
                        ctrl, probs_train, train.labels, budget, train_factory,
                        epochs=icfg.get("epochs", 3), batch_size=icfg.get("batch_size", 32),
                        lr=icfg.get("lr", 1e-2), seed=seed + 13,
                    )
                    acc, stderr, _ = evaluate_informed(ctrl, probs_test, test_labels, budget, eval_factory)
                else:
                    acc, stderr = evaluate_fixed_policy(
                        policy, probs_test, test_labels, budget, comparator,
                        images=test_images, store=store, seed=seed + 17,
                        k=budget if policy == "top_k" else None,
                    )
                rows.append({
                    "policy": policy, "comparator": comp_name, "N": budget,
                    "accuracy": acc, "stderr": stderr, "episodes": len(test_labels),
                })

    with open(out / "decomposed.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DECOMPOSED_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    summary = {"recognizer_accuracy": rec_acc, "pair_accuracy": pair_acc, "rows": rows}
    with open(out / "decomposed-summary.json", "w") as fh:
        json.dump({k: v for k, v in summary.items() if k != "rows"}, fh, indent=2)
    return summary


def policy_theory_experiment(cfg, out_dir):
    """Closed forms next to their Monte Carlo estimates, as CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policies = cfg.get("policies", ["optimal", "random", "random_no_repeat"])
    num_classes = cfg.get("num_classes", 10)
    budgets = cfg.get("budgets", list(range(10)))
    episodes = cfg.get("episodes", 100_000)
    rows = []
    for policy in policies:
        for budget in budgets:
            exact = policy_theory(policy, num_classes, budget)
            sim = simulate_policy_theory(policy, num_classes, budget, episodes, seed=cfg["seed"] + budget)
            rows.append({
                "policy": policy, "num_classes": num_classes, "N": budget,
                "closed_form": exact, "simulated": sim,
                "abs_error": abs(sim - exact), "episodes": episodes,
            })
    with open(out / "policy-theory.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["policy", "num_classes", "N", "closed_form", "simulated", "abs_error", "episodes"])
        w.writeheader()
        w.writerows(rows)
    return rows


def param_count_table(out_dir=None):
    """Parameter counts of the named model presets."""
    rows = []
    for name, model in MODEL_PRESETS.items():
        if name.startswith("baseline"):
            net = BaselineCnn(channels=tuple(model["channels"]), fc_size=model["fc_size"], rng=np.random.default_rng(0))
        else:
            fields = dict(model)
            fields["conv_channels"] = tuple(fields["conv_channels"])
            net = RvnnNetwork(RvnnConfig(**fields).validate(), np.random.default_rng(0))
        rows.append({"model": name, "params": net.param_count()})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "params.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["model", "params"])
            w.writeheader()
            w.writerows(rows)
    return rows


def read_metrics(path):
    """Parse one metrics CSV, rejecting malformed rows with line numbers."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"metrics file not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return rows
        if tuple(header) != METRICS_COLUMNS:
            raise ConfigError(f"{path}:1: bad header {header}; expected {list(METRICS_COLUMNS)}")
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(METRICS_COLUMNS):
                raise ConfigError(f"{path}:{lineno}: expected {len(METRICS_COLUMNS)} columns, got {len(raw)}")
            row = dict(zip(METRICS_COLUMNS, raw))
            for field in ("loss", "accuracy", "tau", "seconds"):
                if row[field] == "":
                    row[field] = None
                    continue
                try:
                    row[field] = float(row[field])
                except ValueError:
                    raise ConfigError(f"{path}:{lineno}: {field} is not a number: {row[field]!r}") from None
            if row["accuracy"] is not None and not 0.0 <= row["accuracy"] <= 1.0:
                raise ConfigError(f"{path}:{lineno}: accuracy {row['accuracy']} outside [0, 1]")
            for field in ("epoch", "params", "seed"):
                if row[field] != "":
                    try:
                        row[field] = int(row[field])
                    except ValueError:
                        raise ConfigError(f"{path}:{lineno}: {field} is not an integer: {row[field]!r}") from None
            rows.append(row)
    return rows


def _aligned(rows, columns):
    if not rows:
        return ""
    widths = [max(len(str(c)), max(len(str(r.get(c, ""))) for r in rows)) for c in columns]
    def line(values):
        return "  ".join(str(v).ljust(w) for v, w in zip(values, widths)).rstrip()
    body = [line(columns), line(["-" * w for w in widths])]
    body.extend(line([r.get(c, "") for c in columns]) for r in rows)
    return "\n".join(body) + "\n"


def report(inputs, out_dir):
    """Aggregate metrics files into accuracy and query-mode tables.

    Best test-accuracy epoch per run (duplicate run ids keep the best row)
    goes into the accuracy table; standard/blank/mistaken evaluation rows
    pivot into the query-mode table. Returns (accuracy_rows, mode_rows).
    """
    rows = []
    for path in inputs:
        rows.extend(read_metrics(path))

    best = {}
    for row in rows:
        if row["split"] != "test" or row["accuracy"] is None:
            continue
        cur = best.get(row["run_id"])
        if cur is None or row["accuracy"] > cur["accuracy"]:
            best[row["run_id"]] = row
    accuracy_rows = [
        {
            "run_id": r["run_id"], "kind": r["kind"], "params": r["params"],
            "fraction": r["fraction"], "seed": r["seed"],
            "best_epoch": r["epoch"], "accuracy": r["accuracy"],
        }
        for r in sorted(best.values(), key=lambda r: r["run_id"])
    ]

    by_mode = {}
    for row in rows:
        if row["split"] in QUERY_MODES and row["accuracy"] is not None and row["kind"] in ("eval", "ablate-query"):
            slot = by_mode.setdefault(row["run_id"], {})
            slot[row["split"]] = max(row["accuracy"], slot.get(row["split"], -1.0))
    mode_rows = []
    for run_id in sorted(by_mode):
        modes = by_mode[run_id]
        entry = {"run_id": run_id}
        entry.update({m: modes.get(m, "") for m in QUERY_MODES})
        if "standard" in modes:
            for m in ("blank", "mistaken"):
                if m in modes:
                    entry[f"{m}_drop"] = round(modes["standard"] - modes[m], 6)
        mode_rows.append(entry)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    acc_cols = ["run_id", "kind", "params", "fraction", "seed", "best_epoch", "accuracy"]
    mode_cols = ["run_id", "standard", "blank", "mistaken", "blank_drop", "mistaken_drop"]
    with open(out / "accuracy-table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=acc_cols)
        w.writeheader()
        w.writerows(accuracy_rows)
    with open(out / "query-mode-table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=mode_cols, restval="")
        w.writeheader()
        w.writerows(mode_rows)
    (out / "accuracy-table.txt").write_text(_aligned(accuracy_rows, acc_cols))
    (out / "query-mode-table.txt").write_text(_aligned(mode_rows, mode_cols))
    return accuracy_rows, mode_rows
