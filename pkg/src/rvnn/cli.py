"""Command line entry point for running experiments.

Exit codes: 0 on success, 1 on validation problems (bad config, bad paths,
malformed metrics), 2 on runtime failures (diverged training, band misses).
"""

import argparse
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    MODEL_PRESETS,
    ablate_experiment,
    decomposed_experiment,
    eval_experiment,
    load_config,
    param_count_table,
    policy_theory_experiment,
    report,
    sample_efficiency_experiment,
    train_experiment,
    validate_config,
)


def _add_common(parser, config_required=True):
    parser.add_argument("--config", required=config_required, help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override the config's seed")
    parser.add_argument("--data-dir", default="data/mnist", help="directory holding the dataset files")
    parser.add_argument("--out", default="runs", help="directory all outputs are written under")


def build_parser():
    parser = argparse.ArgumentParser(prog="rvnn", description="train and study query-based classifiers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train a model from a config and checkpoint the best epoch"),
        ("eval", "evaluate a checkpoint under one or more query modes"),
        ("ablate", "train a query-based model and score all query modes"),
        ("decomposed", "frozen recognizer + comparator policy experiments"),
        ("sample-efficiency", "train the matched model pair at several data fractions"),
    ):
        _add_common(sub.add_parser(name, help=help_text))
    p = sub.add_parser("policy-theory", help="closed-form policy accuracies next to simulation")
    _add_common(p, config_required=False)
    p = sub.add_parser("params", help="parameter counts for the named model presets")
    p.add_argument("--out", default=None, help="also write params.csv here")
    p = sub.add_parser("report", help="aggregate metrics CSVs into summary tables")
    p.add_argument("inputs", nargs="*", help="metrics CSV files")
    p.add_argument("--out", default="runs", help="directory the tables are written under")
    return parser


def _check_dirs(args):
    data_dir = Path(args.data_dir)
    if not data_dir.exists():
        raise ConfigError(f"data directory not found: {data_dir}")
    return data_dir


_EXPECTED_KIND = {
    "train": ("baseline", "rvnn"),
    "eval": ("eval",),
    "ablate": ("ablate-query",),
    "decomposed": ("decomposed",),
    "sample-efficiency": ("sample-efficiency",),
    "policy-theory": ("policy-theory",),
}


def _config_for(args):
    cfg = load_config(args.config, seed_override=args.seed)
    expected = _EXPECTED_KIND[args.command]
    if cfg["kind"] not in expected:
        raise ConfigError(f"{args.config}: kind {cfg['kind']!r} does not belong to the {args.command!r} command (expected {expected})")
    return cfg


def _dispatch(args):
    if args.command == "params":
        rows = param_count_table(args.out)
        for row in rows:
            print(f"{row['model']:<18} {row['params']:>7}")
        return

    if args.command == "report":
        accuracy_rows, mode_rows = report(args.inputs, args.out)
        out = Path(args.out)
        print((out / "accuracy-table.txt").read_text(), end="")
        if mode_rows:
            print()
            print((out / "query-mode-table.txt").read_text(), end="")
        print(f"[{len(accuracy_rows)} run(s), {len(mode_rows)} query-mode row(s); tables under {out}]")
        return

    if args.command == "policy-theory":
        if args.config is not None:
            cfg = _config_for(args)
        else:
            cfg = validate_config({"kind": "policy-theory", "seed": args.seed if args.seed is not None else 0})
        rows = policy_theory_experiment(cfg, args.out)
        for row in rows:
            print(f"{row['policy']:<18} N={row['N']}  exact={row['closed_form']:.6f}  simulated={row['simulated']:.6f}")
        return

    cfg = _config_for(args)
    data_dir = _check_dirs(args)
    if args.command == "train":
        summary = train_experiment(cfg, data_dir, args.out)
        print(f"{summary['run_id']}: best test accuracy {summary['accuracy']:.4f} "
              f"({summary['params']} params); checkpoint at {summary['checkpoint']}")
    elif args.command == "eval":
        results = eval_experiment(cfg, data_dir, args.out)
        for mode, acc in results.items():
            print(f"{mode}: {acc:.4f}")
    elif args.command == "ablate":
        summary = ablate_experiment(cfg, data_dir, args.out)
        std = summary["modes"]["standard"]
        for mode, acc in summary["modes"].items():
            drop = f"  (drop {100 * (std - acc):.2f} pp)" if mode != "standard" else ""
            print(f"{mode}: {acc:.4f}{drop}")
    elif args.command == "sample-efficiency":
        results = sample_efficiency_experiment(cfg, data_dir, args.out)
        for row in results:
            print(f"fraction {row['fraction']:<5} baseline={row['baseline']:.4f}  rvnn={row['rvnn']:.4f}")
    elif args.command == "decomposed":
        summary = decomposed_experiment(cfg, data_dir, args.out)
        print(f"recognizer accuracy: {summary['recognizer_accuracy']:.4f}")
        if summary["pair_accuracy"] is not None:
            print(f"comparator pair accuracy: {summary['pair_accuracy']:.4f}")
        for row in summary["rows"]:
            print(f"{row['comparator']:<8} {row['policy']:<18} N={row['N']}  "
                  f"accuracy={row['accuracy']:.4f} (stderr {row['stderr']:.4f})")
    else:
        raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except (ConfigError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - last resort, keep the exit contract
        print(f"unexpected failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
