"""Command line front end: fetch, train, eval, verify, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .engine import build_network, run_trial
from .errors import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NUMERICAL,
    ConfigError,
    DataFormatError,
    NumericalError,
)
from .harness import (
    config_from_preset,
    default_data_dir,
    evaluate,
    fetch_dataset,
    load_config,
    load_dataset_pair,
    load_network,
    make_split,
    run_experiment,
)
from .oracle import compare_grads, random_network_spec, selective_backprop_grads
from .presets import PRESETS
from .tensor import make_rng


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse seed list {text!r}") from None


def _train_overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = _parse_seeds(args.seed)
    for flag, key in [
        ("rule", "rule"), ("alpha", "alpha"), ("epsilon", "epsilon"),
        ("batch_size", "batch_size"), ("max_epochs", "max_epochs"),
        ("patience", "patience"), ("out", "out_dir"), ("data_dir", "data_dir"),
    ]:
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return overrides


def cmd_fetch(args) -> int:
    paths = fetch_dataset(args.dataset, args.data_dir)
    if not paths:
        print(f"{args.dataset}: bundled with the package, nothing to fetch")
        return 0
    for path in paths:
        print(path)
    return 0


def cmd_train(args) -> int:
    overrides = _train_overrides(args)
    if args.config is not None:
        config = load_config(args.config, **overrides)
    elif args.preset is not None:
        config = config_from_preset(args.preset, **overrides)
    else:
        raise ConfigError("train needs --config or --preset")
    print(f"{config.name}: rule={config.rule} alpha={config.alpha} "
          f"batch={config.batch_size} epsilon={config.epsilon} "
          f"seeds={list(config.seeds)}")
    results = run_experiment(config, max_workers=args.workers)
    done = {r.seed: r for r in results}
    for seed in config.seeds:
        result = done.get(seed)
        if result is None:
            print(f"  seed {seed}: FAILED (training diverged, see summary)")
            continue
        print(f"  seed {seed}: best epoch {result.best_epoch} "
              f"({result.epochs_trained} trained), "
              f"validation {result.validation_accuracy:.4f}, "
              f"test {result.test_accuracy:.4f}, {result.wall_time:.1f}s")
    out = Path(config.out_dir) / f"{config.name}-summary.json"
    print(f"summary: {out}")
    if not results:
        raise NumericalError("every seed diverged")
    return 0


def cmd_eval(args) -> int:
    network = load_network(args.weights)
    train, test = load_dataset_pair(args.dataset, args.data_dir)
    if args.split == "test":
        split = test
    elif args.split == "train":
        split = train
    else:
        split = make_split(train, test, args.seed, args.validation_size).validation
    accuracy = evaluate(network, split)
    print(f"{args.dataset} {args.split} accuracy: {accuracy:.4f} "
          f"({len(split)} samples)")
    return 0


def cmd_verify(args) -> int:
    """Random-network sweep: trial updates must match the independent
    chain-rule computation at tight relative tolerance."""
    worst = 0.0
    failures = 0
    for trial in range(args.trials):
        rng = make_rng(args.seed + trial)
        network = build_network(random_network_spec(rng), rng)
        stimulus = rng.standard_normal(network.in_shape)
        label = int(rng.integers(network.num_actions))
        result = run_trial(network, stimulus, label, epsilon=0.2, rng=rng)
        oracle = selective_backprop_grads(
            network, stimulus, result.outcome.selected, result.delta,
            result.trace.dropout_masks,
        )
        comparison = compare_grads(result.grads, oracle, rtol=args.tolerance)
        if not comparison.ok:
            failures += 1
            print(f"trial {trial}: relative difference {comparison.max_rel:.3e} "
                  f"at layer {comparison.worst_layer}", file=sys.stderr)
        if np.isfinite(comparison.max_rel):
            worst = max(worst, comparison.max_rel)
    print(f"verified {args.trials} random networks: "
          f"worst relative difference {worst:.3e} "
          f"(tolerance {args.tolerance:.0e}), {failures} failures")
    if failures:
        raise NumericalError(
            f"{failures} of {args.trials} trials exceeded tolerance")
    return 0


def cmd_report(args) -> int:
    rows = []
    for directory in args.runs:
        for path in sorted(Path(directory).glob("*-summary.json")):
            with open(path) as f:
                rows.append(json.load(f))
    if not rows:
        raise ConfigError(f"no *-summary.json files under {args.runs}")
    rows.sort(key=lambda s: s["name"])
    header = (f"{'experiment':<28} {'rule':<9} {'alpha':>7} {'epochs':>13} "
              f"{'test acc':>17} {'seeds':>7}")
    print(header)
    print("-" * len(header))
    for s in rows:
        agg = s["aggregate"]

        def stat(block):
            if block["mean"] is None:
                return "-"
            return f"{block['mean']:.4f} ({block['std']:.4f})"

        n_ok = len(s["runs"])
        n_total = n_ok + agg["n_failed"]
        print(f"{s['name']:<28} {s['rule']:<9} {s['alpha']:>7g} "
              f"{stat(agg['epochs']):>13} {stat(agg['test_accuracy']):>17} "
              f"{n_ok:>4}/{n_total}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qagrel",
        description="Train and evaluate reward-gated and backprop networks.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    fetch = sub.add_parser("fetch", help="download a dataset with checksum checks")
    fetch.add_argument("dataset", choices=["mnist", "cifar10", "cifar100", "desk-mnist"])
    fetch.add_argument("--data-dir", default=None,
                       help=f"dataset root (default: $QAGREL_DATA_DIR or {default_data_dir()})")
    fetch.set_defaults(func=cmd_fetch)

    train = sub.add_parser("train", help="run a multi-seed training experiment")
    train.add_argument("--config", default=None, help="flat key-value config file")
    train.add_argument("--preset", default=None, choices=sorted(PRESETS),
                       metavar="PRESET", help="named preset (see README for the list)")
    train.add_argument("--seed", default=None,
                       help="comma-separated seed list, overrides the config")
    train.add_argument("--rule", default=None, choices=["qagrel", "backprop"])
    train.add_argument("--alpha", type=float, default=None)
    train.add_argument("--epsilon", type=float, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--max-epochs", type=int, default=None)
    train.add_argument("--patience", type=int, default=None)
    train.add_argument("--out", default=None, help="output directory for metrics")
    train.add_argument("--data-dir", default=None)
    train.add_argument("--workers", type=int, default=1,
                       help="seeds run concurrently when > 1 (sequential mode "
                            "is the bitwise-reproducible one)")
    train.set_defaults(func=cmd_train)

    eval_ = sub.add_parser("eval", help="evaluate saved weights on a split")
    eval_.add_argument("--weights", required=True, help="npz file from a training run")
    eval_.add_argument("--dataset", required=True,
                       choices=["mnist", "cifar10", "cifar100", "desk-mnist"])
    eval_.add_argument("--split", default="test",
                       choices=["train", "validation", "test"])
    eval_.add_argument("--seed", type=int, default=1,
                       help="seed of the validation split (matches training)")
    eval_.add_argument("--validation-size", type=int, default=1000)
    eval_.add_argument("--data-dir", default=None)
    eval_.set_defaults(func=cmd_eval)

    verify = sub.add_parser(
        "verify",
        help="check trial updates against the independent gradient oracle")
    verify.add_argument("--trials", type=int, default=200)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--tolerance", type=float, default=1e-10)
    verify.set_defaults(func=cmd_verify)

    report = sub.add_parser("report", help="tabulate experiment summaries")
    report.add_argument("runs", nargs="+", help="directories holding *-summary.json")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
