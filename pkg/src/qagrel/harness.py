"""Experiment orchestration.

Turns a network, a learning rule, and a dataset into training runs: batch
gradient accumulation over shuffled epochs, validation after every epoch,
patience-based early stopping that keeps the best-epoch weights, and
multi-seed experiments that write one metrics CSV per run plus a JSON
summary per experiment.

Determinism contract: a run is a pure function of (config, seed) when
executed sequentially. Everything random, including the validation split,
the weight init, the per-epoch shuffles, action selection, and dropout,
derives from the run seed. Wall times are reported in the JSON summary
only, never in the CSV, so identical runs produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
import tarfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backprop import backprop_batch
from .data import (
    Dataset,
    SplitDataset,
    fetch_file,
    load_cifar_binary,
    load_desk_mnist,
    load_mnist_idx,
    split_validation,
)
from .engine import Network, build_network, predict, run_batch
from .errors import ConfigError, DataFormatError, NumericalError
from .layers import LayerKind, LayerSpec, LayerWeights
from .presets import DATASETS, get_preset, hidden_unit_counts
from .tensor import SeededRng, make_rng

RULES = ("qagrel", "backprop")
VALIDATION_SIZE = 1000
DATA_DIR_ENV = "QAGREL_DATA_DIR"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce an experiment."""

    name: str
    dataset: str
    rule: str
    alpha: float
    specs: tuple[LayerSpec, ...]
    init_range: float
    batch_size: int = 100
    epsilon: float = 0.05
    seeds: tuple[int, ...] = (1, 2, 3)
    patience: int = 20
    max_epochs: int = 500
    validation_size: int = VALIDATION_SIZE
    out_dir: str = "runs"
    data_dir: str | None = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.dataset not in DATASETS:
            known = ", ".join(sorted(DATASETS))
            raise ConfigError(f"unknown dataset {self.dataset!r}; available: {known}")
        if not self.specs:
            raise ConfigError("specs must name at least one layer")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not self.init_range > 0:
            raise ConfigError(f"init_range must be > 0, got {self.init_range}")
        if self.validation_size < 1:
            raise ConfigError(f"validation_size must be >= 1, got {self.validation_size}")


def config_from_preset(preset_name: str, **overrides) -> ExperimentConfig:
    """Build a config from a named preset, with field overrides on top."""
    preset = get_preset(preset_name)
    fields = dict(
        name=preset.name,
        dataset=preset.dataset,
        rule=preset.rule,
        alpha=preset.alpha,
        specs=preset.specs,
        init_range=preset.init_range,
    )
    fields.update(overrides)
    return ExperimentConfig(**fields)


# Flat key-value config files: `key = value` per line, # comments. A file
# names a preset and overrides hyperparameters; explicit layer lists are a
# library-level feature, not a config-file one.
_CONFIG_KEYS = {
    "preset": str,
    "name": str,
    "rule": str,
    "alpha": float,
    "batch_size": int,
    "epsilon": float,
    "seeds": "seeds",
    "patience": int,
    "early_stop_patience": int,  # alias for patience
    "max_epochs": int,
    "init_range": float,
    "validation_size": int,
    "out_dir": str,
    "data_dir": str,
}


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"config line {lineno}: empty key or value in {raw!r}")
        if key in pairs:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def config_from_mapping(pairs: dict[str, str], **overrides) -> ExperimentConfig:
    fields: dict = {}
    for key, value in pairs.items():
        kind = _CONFIG_KEYS.get(key)
        if kind is None:
            known = ", ".join(sorted(_CONFIG_KEYS))
            raise ConfigError(f"unknown config key {key!r}; known keys: {known}")
        try:
            if kind == "seeds":
                fields["seeds"] = tuple(int(s) for s in value.split(","))
            elif key == "early_stop_patience":
                fields["patience"] = int(value)
            else:
                fields[key] = kind(value)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from None
    fields.update(overrides)
    preset_name = fields.pop("preset", None)
    if preset_name is None:
        raise ConfigError("config must name a preset")
    return config_from_preset(preset_name, **fields)


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_mapping(parse_config_text(text), **overrides)


# ---------------------------------------------------------------------------
# datasets


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _existing(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(
        f"{name}[.gz] not found under {data_dir}; run the fetch command first"
    )


def load_dataset_pair(dataset: str, data_dir=None) -> tuple[Dataset, Dataset]:
    """Load (train, test) for a dataset id from disk or bundled assets."""
    if dataset == "desk-mnist":
        return load_desk_mnist()
    root = Path(data_dir) if data_dir is not None else default_data_dir()
    if dataset == "mnist":
        train = load_mnist_idx(
            _existing(root, "train-images-idx3-ubyte"),
            _existing(root, "train-labels-idx1-ubyte"),
            name="mnist-train",
        )
        test = load_mnist_idx(
            _existing(root, "t10k-images-idx3-ubyte"),
            _existing(root, "t10k-labels-idx1-ubyte"),
            name="mnist-test",
        )
        return train, test
    if dataset == "cifar10":
        base = root / "cifar-10-batches-bin"
        train = load_cifar_binary(
            [base / f"data_batch_{i}.bin" for i in range(1, 6)],
            variant="c10", name="cifar10-train",
        )
        test = load_cifar_binary([base / "test_batch.bin"], variant="c10",
                                 name="cifar10-test")
        return train, test
    if dataset == "cifar100":
        base = root / "cifar-100-binary"
        train = load_cifar_binary([base / "train.bin"], variant="c100",
                                  name="cifar100-train")
        test = load_cifar_binary([base / "test.bin"], variant="c100",
                                 name="cifar100-test")
        return train, test
    known = ", ".join(sorted(DATASETS))
    raise ConfigError(f"unknown dataset {dataset!r}; available: {known}")


def make_split(train: Dataset, test: Dataset, seed: int,
               n_val: int = VALIDATION_SIZE) -> SplitDataset:
    """Carve the validation set out of the training set, seeded per run."""
    return split_validation(train, n_val, seed, test=test)


# Download manifest: filename -> (url, sha256). The MNIST files come from
# the widely mirrored S3 copy; the CIFAR archives from their original host.
FETCH_MANIFEST: dict[str, dict[str, tuple[str, str]]] = {
    "mnist": {
        "train-images-idx3-ubyte.gz": (
            "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
            "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
        ),
        "train-labels-idx1-ubyte.gz": (
            "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
            "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
        ),
        "t10k-images-idx3-ubyte.gz": (
            "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
            "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
        ),
        "t10k-labels-idx1-ubyte.gz": (
            "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
            "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
        ),
    },
    "cifar10": {
        "cifar-10-binary.tar.gz": (
            "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
            "c4a38c50a1bc5f3a1c5537f2155ab9d68f9f25eb1ed8d9ddda3db29a59bca1dd",
        ),
    },
    "cifar100": {
        "cifar-100-binary.tar.gz": (
            "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
            "58a81ae192c23a4be8b1804d68e518ed807d710a4eb253b1f2a199162a40d8ec",
        ),
    },
}


def extract_tar_members(archive, data_dir, suffix: str = ".bin") -> list[Path]:
    """Extract regular members with the given suffix, archive paths kept.

    Members are written through extractfile rather than extractall, and any
    absolute or parent-escaping member name is rejected, so a hostile
    archive cannot write outside data_dir.
    """
    data_dir = Path(data_dir)
    written = []
    with tarfile.open(archive, "r:*") as tar:
        for member in tar:
            if not member.isreg() or not member.name.endswith(suffix):
                continue
            rel = Path(member.name)
            if rel.is_absolute() or ".." in rel.parts:
                raise DataFormatError(f"{archive}: unsafe member path {member.name!r}")
            dest = data_dir / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            src = tar.extractfile(member)
            with open(dest, "wb") as out:
                shutil.copyfileobj(src, out)
            written.append(dest)
    if not written:
        raise DataFormatError(f"{archive}: no {suffix} members found")
    return written


def fetch_dataset(dataset: str, data_dir=None) -> list[Path]:
    """Download (and for the tar archives, extract) one dataset's files."""
    if dataset == "desk-mnist":
        return []  # ships inside the package
    manifest = FETCH_MANIFEST.get(dataset)
    if manifest is None:
        known = ", ".join(sorted(FETCH_MANIFEST) + ["desk-mnist"])
        raise ConfigError(f"unknown dataset {dataset!r}; available: {known}")
    root = Path(data_dir) if data_dir is not None else default_data_dir()
    paths = []
    for filename, (url, digest) in manifest.items():
        dest = fetch_file(url, root / filename, digest)
        if filename.endswith(".tar.gz"):
            paths.extend(extract_tar_members(dest, root))
        else:
            paths.append(dest)
    return paths


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class EpochReport:
    """Metrics from one pass over the training split.

    train_metric is the mean per-trial reward under qagrel and the mean
    cross-entropy loss under backprop. exploration_fraction is 0.0 for
    backprop, which selects no actions during training.
    """

    epoch: int
    train_metric: float
    validation_accuracy: float
    wall_time: float
    exploration_fraction: float


@dataclass
class RunResult:
    """One seed's training outcome. The kept weights are the best epoch's."""

    seed: int
    best_epoch: int
    epochs_trained: int
    converged: bool
    validation_accuracy: float
    test_accuracy: float
    reports: list[EpochReport]

    @property
    def epochs_to_convergence(self) -> int:
        return self.best_epoch

    @property
    def wall_time(self) -> float:
        return float(sum(r.wall_time for r in self.reports))


def evaluate(network: Network, split: Dataset, batch_size: int = 500) -> float:
    """Greedy classification accuracy with dropout disabled."""
    if len(split) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    correct = 0
    for start in range(0, len(split), batch_size):
        stimuli = split.images[start:start + batch_size]
        labels = split.labels[start:start + batch_size]
        correct += int(np.sum(predict(network, stimuli) == labels))
    return correct / len(split)


def _check_finite_weights(network: Network, epoch: int) -> None:
    for i, w in enumerate(network.weights):
        if w.forward_w is not None and not np.all(np.isfinite(w.forward_w)):
            raise NumericalError(
                f"non-finite weights in layer {i} after epoch {epoch}; "
                "lower alpha or check the input scaling"
            )


def train_epoch(
    network: Network,
    rule: str,
    train: Dataset,
    config: ExperimentConfig,
    rng: SeededRng,
    epoch: int = 1,
    validation: Dataset | None = None,
) -> EpochReport:
    """One shuffled pass over the training split, updating after each batch.

    Per-trial grads are summed over the batch and applied scaled by
    alpha / batch_size, to forward and feedback weights alike. The divisor
    is the configured batch size even for a trailing short batch, so a
    split that is not a multiple of the batch size cannot produce one
    oversized update per epoch.
    """
    start_time = time.perf_counter()
    n = len(train)
    order = rng.permutation(n)
    metric_sum = 0.0
    explored = 0
    for i, lo in enumerate(range(0, n, config.batch_size)):
        idx = order[lo:lo + config.batch_size]
        stimuli = train.images[idx]
        labels = train.labels[idx]
        if rule == "qagrel":
            batch = run_batch(network, stimuli, labels, config.epsilon,
                              config.alpha, rng,
                              denominator=config.batch_size)
            metric_sum += batch.reward_sum
            explored += batch.explored
            check = batch.mean_error
        else:
            batch = backprop_batch(network, stimuli, labels, config.alpha, rng,
                                   denominator=config.batch_size)
            metric_sum += batch.error_sum
            check = batch.mean_error
        if not np.isfinite(check):
            raise NumericalError(
                f"training diverged: non-finite batch error in epoch {epoch}, "
                f"batch {i} (rule={rule}, alpha={config.alpha})"
            )
    _check_finite_weights(network, epoch)
    accuracy = evaluate(network, validation) if validation is not None else float("nan")
    return EpochReport(
        epoch=epoch,
        train_metric=metric_sum / n,
        validation_accuracy=accuracy,
        wall_time=time.perf_counter() - start_time,
        exploration_fraction=explored / n,
    )


def early_stop(history: Sequence[float], patience: int) -> bool:
    """True once the running-best accuracy has gone `patience` epochs unbeaten.

    The best index is the first attainment of the maximum, so a later tie
    does not reset the counter; only a strict improvement does.
    """
    if len(history) == 0:
        raise ConfigError("early_stop needs a nonempty history")
    best = int(np.argmax(history))
    return (len(history) - 1 - best) >= patience


def _snapshot(network: Network) -> list[LayerWeights]:
    return [
        LayerWeights(None, None) if w.forward_w is None
        else LayerWeights(w.forward_w.copy(), w.feedback_w.copy())
        for w in network.weights
    ]


def train_run(config: ExperimentConfig, seed: int,
              split: SplitDataset) -> tuple[Network, RunResult]:
    """Train one seed to early stop and return the best-epoch network."""
    rng = make_rng(seed)
    network = build_network(
        config.specs, rng,
        fc_init=config.init_range, spatial_init=config.init_range,
    )
    best_weights = _snapshot(network)
    best_epoch = 0
    best_accuracy = -np.inf
    history: list[float] = []
    reports: list[EpochReport] = []
    converged = False
    for epoch in range(1, config.max_epochs + 1):
        report = train_epoch(network, config.rule, split.train, config, rng,
                             epoch=epoch, validation=split.validation)
        reports.append(report)
        history.append(report.validation_accuracy)
        if report.validation_accuracy > best_accuracy:
            best_accuracy = report.validation_accuracy
            best_epoch = epoch
            best_weights = _snapshot(network)
        if early_stop(history, config.patience):
            converged = True
            break
    best_network = Network(tuple(config.specs), best_weights)
    test_accuracy = evaluate(best_network, split.test)
    return best_network, RunResult(
        seed=seed,
        best_epoch=best_epoch,
        epochs_trained=len(reports),
        converged=converged,
        validation_accuracy=float(best_accuracy),
        test_accuracy=test_accuracy,
        reports=reports,
    )


# ---------------------------------------------------------------------------
# metric files


def _fmt(value: float) -> str:
    # repr of a Python float round-trips exactly and is stable across runs
    return repr(float(value))


def write_run_csv(path, config: ExperimentConfig, result: RunResult) -> None:
    metric = "reward" if config.rule == "qagrel" else "loss"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "split", "metric", "value"])
        for report in result.reports:
            writer.writerow([report.epoch, "train", metric, _fmt(report.train_metric)])
            writer.writerow([report.epoch, "train", "exploration",
                             _fmt(report.exploration_fraction)])
            writer.writerow([report.epoch, "validation", "accuracy",
                             _fmt(report.validation_accuracy)])
        writer.writerow([result.best_epoch, "validation", "best_accuracy",
                         _fmt(result.validation_accuracy)])
        writer.writerow([result.best_epoch, "test", "accuracy",
                         _fmt(result.test_accuracy)])


def _aggregate(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": None}
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


def summarize(config: ExperimentConfig, results: list[RunResult],
              failures: list[dict]) -> dict:
    return {
        "name": config.name,
        "dataset": config.dataset,
        "rule": config.rule,
        "alpha": config.alpha,
        "batch_size": config.batch_size,
        "epsilon": config.epsilon,
        "patience": config.patience,
        "max_epochs": config.max_epochs,
        "init_range": config.init_range,
        "hidden_units": list(hidden_unit_counts(config.specs)),
        "seeds": list(config.seeds),
        "runs": [
            {
                "seed": r.seed,
                "best_epoch": r.best_epoch,
                "epochs_trained": r.epochs_trained,
                "converged": r.converged,
                "validation_accuracy": r.validation_accuracy,
                "test_accuracy": r.test_accuracy,
                "wall_time": r.wall_time,
            }
            for r in results
        ],
        "failures": failures,
        "aggregate": {
            "test_accuracy": _aggregate([r.test_accuracy for r in results]),
            "validation_accuracy": _aggregate([r.validation_accuracy for r in results]),
            "epochs": _aggregate([float(r.best_epoch) for r in results]),
            "n_converged": sum(r.converged for r in results),
            "n_failed": len(failures),
        },
    }


def run_name(config: ExperimentConfig, seed: int) -> str:
    return f"{config.name}-seed{seed}"


def run_experiment(config: ExperimentConfig,
                   max_workers: int = 1) -> list[RunResult]:
    """Run every seed, write one CSV and weights file per run plus a JSON
    summary, and return the successful results.

    A seed whose training diverges is recorded in the summary's failures
    list; it does not abort the experiment. Dataset problems do abort.
    With max_workers > 1 seeds run concurrently; sequential mode (the
    default) is the one with the bitwise-reproducibility guarantee.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_dataset_pair(config.dataset, config.data_dir)

    def one(seed: int) -> tuple[Network, RunResult]:
        split = make_split(train, test, seed, config.validation_size)
        return train_run(config, seed, split)

    results: list[RunResult] = []
    failures: list[dict] = []
    outcomes: dict[int, tuple[Network, RunResult] | Exception] = {}
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {seed: pool.submit(one, seed) for seed in config.seeds}
            for seed, future in futures.items():
                try:
                    outcomes[seed] = future.result()
                except NumericalError as exc:
                    outcomes[seed] = exc
    else:
        for seed in config.seeds:
            try:
                outcomes[seed] = one(seed)
            except NumericalError as exc:
                outcomes[seed] = exc

    for seed in config.seeds:
        outcome = outcomes[seed]
        if isinstance(outcome, Exception):
            failures.append({"seed": seed, "error": str(outcome)})
            continue
        network, result = outcome
        results.append(result)
        write_run_csv(out / (run_name(config, seed) + ".csv"), config, result)
        save_network(network, out / (run_name(config, seed) + ".npz"))

    summary = summarize(config, results, failures)
    with open(out / (config.name + "-summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return results


# ---------------------------------------------------------------------------
# network serialization


def _spec_to_dict(spec: LayerSpec) -> dict:
    return {
        "kind": spec.kind.value,
        "in_shape": list(spec.in_shape),
        "out_shape": list(spec.out_shape),
        "kernel_size": list(spec.kernel_size) if spec.kernel_size else None,
        "stride": list(spec.stride),
        "padding": list(spec.padding),
        "num_filters": spec.num_filters,
        "drop_rate": spec.drop_rate,
        "activation": spec.activation,
    }


def _spec_from_dict(d: dict) -> LayerSpec:
    return LayerSpec(
        kind=LayerKind(d["kind"]),
        in_shape=tuple(d["in_shape"]),
        out_shape=tuple(d["out_shape"]),
        kernel_size=tuple(d["kernel_size"]) if d["kernel_size"] else None,
        stride=tuple(d["stride"]),
        padding=tuple(d["padding"]),
        num_filters=d["num_filters"],
        drop_rate=d["drop_rate"],
        activation=d["activation"],
    )


def save_network(network: Network, path) -> None:
    """Write specs and both weight sets to one npz file."""
    arrays: dict[str, np.ndarray] = {
        "specs_json": np.array(json.dumps([_spec_to_dict(s) for s in network.specs])),
    }
    for i, w in enumerate(network.weights):
        if w.forward_w is not None:
            arrays[f"forward_{i}"] = w.forward_w
            arrays[f"feedback_{i}"] = w.feedback_w
    np.savez(path, **arrays)


def load_network(path) -> Network:
    with np.load(path, allow_pickle=False) as data:
        specs = tuple(
            _spec_from_dict(d) for d in json.loads(str(data["specs_json"][()]))
        )
        weights = []
        for i, spec in enumerate(specs):
            if spec.has_weights:
                weights.append(LayerWeights(data[f"forward_{i}"].copy(),
                                            data[f"feedback_{i}"].copy()))
            else:
                weights.append(LayerWeights(None, None))
    return Network(specs, weights)
