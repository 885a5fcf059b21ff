"""Named experiment presets for the benchmark grid.

Each preset bundles a dataset id, a layer stack, a learning rule, and the
hyperparameters used for that combination in the reference experiments.
Preset names follow ``{dataset}-{architecture}-{rule}``, e.g.
``mnist-full-qagrel`` or ``cifar10-conv-bp``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .layers import (
    LayerSpec,
    conv2d,
    dropout,
    fully_connected,
    locally_connected2d,
)

RULE_QAGREL = "qagrel"
RULE_BACKPROP = "backprop"

# dataset id -> (input shape, number of classes)
DATASETS: dict[str, tuple[tuple[int, int, int], int]] = {
    "mnist": ((28, 28, 1), 10),
    "desk-mnist": ((28, 28, 1), 10),
    "cifar10": ((32, 32, 3), 10),
    "cifar100": ((32, 32, 3), 100),
}


@dataclass(frozen=True)
class Preset:
    """A ready-to-run experiment definition."""

    name: str
    dataset: str
    rule: str
    alpha: float
    init_range: float
    specs: tuple[LayerSpec, ...]

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return DATASETS[self.dataset][0]

    @property
    def num_classes(self) -> int:
        return DATASETS[self.dataset][1]


def hidden_unit_counts(specs: tuple[LayerSpec, ...]) -> tuple[int, ...]:
    """Unit counts of the weighted hidden layers, readout excluded.

    Dropout layers reshape nothing and carry no units of their own, so they
    are skipped; this matches how architectures are usually summarized
    (e.g. 21632-5408-500).
    """
    return tuple(s.out_size for s in specs[:-1] if s.has_weights)


def _mlp_stack(
    in_shape: tuple[int, ...],
    hidden: tuple[int, ...],
    num_classes: int,
) -> tuple[LayerSpec, ...]:
    specs = []
    shape = in_shape
    for units in hidden:
        spec = fully_connected(shape, units)
        specs.append(spec)
        shape = spec.out_shape
    specs.append(fully_connected(shape, num_classes, activation="linear"))
    return tuple(specs)


def _spatial_stack(
    in_shape: tuple[int, int, int],
    num_classes: int,
    first: str,
    extra_fc: bool,
) -> tuple[LayerSpec, ...]:
    """Two spatial layers, dropout, then the fully connected tail.

    ``first`` picks the kind of the first layer ("conv" or "loccon"); the
    second layer is always convolutional, with stride 2 standing in for
    pooling. ``extra_fc`` inserts the optional 1000-unit layer ahead of the
    500-unit one.
    """
    if first == "conv":
        head = conv2d(in_shape, 32, (3, 3))
    elif first == "loccon":
        head = locally_connected2d(in_shape, 32, (3, 3))
    else:
        raise ConfigError(f"unknown first layer kind: {first!r}")
    specs = [
        head,
        conv2d(head.out_shape, 32, (3, 3), stride=(2, 2), padding=(1, 1)),
    ]
    specs.append(dropout(specs[-1].out_shape, 0.8))
    shape = specs[-1].out_shape
    if extra_fc:
        spec = fully_connected(shape, 1000)
        specs.append(spec)
        shape = spec.out_shape
    spec = fully_connected(shape, 500)
    specs.append(spec)
    specs.append(dropout(spec.out_shape, 0.3))
    specs.append(fully_connected(spec.out_shape, num_classes, activation="linear"))
    return tuple(specs)


def _build_presets() -> dict[str, Preset]:
    presets: dict[str, Preset] = {}

    def add(name: str, dataset: str, rule: str, alpha: float,
            init_range: float, specs: tuple[LayerSpec, ...]) -> None:
        presets[name] = Preset(name, dataset, rule, alpha, init_range, specs)

    # Fully connected nets: all weights in [-0.05, 0.05].
    full = _mlp_stack((28, 28, 1), (1500, 1000, 500), 10)
    add("mnist-full-qagrel", "mnist", RULE_QAGREL, 5e-1, 0.05, full)
    add("mnist-full-bp", "mnist", RULE_BACKPROP, 1e-1, 0.05, full)

    # Desk-scale variant of the fully connected net, sized so a full
    # training run finishes in minutes on a laptop CPU.
    desk = _mlp_stack((28, 28, 1), (300, 100), 10)
    add("mnist-desk-qagrel", "desk-mnist", RULE_QAGREL, 5e-1, 0.05, desk)
    add("mnist-desk-bp", "desk-mnist", RULE_BACKPROP, 1e-1, 0.05, desk)

    # Spatial nets: all weights in [-0.02, 0.02], learning rates per
    # dataset. The "-deep" variants add the 1000-unit layer.
    spatial_alpha = {
        ("mnist", RULE_QAGREL): 1e0,
        ("mnist", RULE_BACKPROP): 1e-2,
        ("cifar10", RULE_QAGREL): 1e0,
        ("cifar10", RULE_BACKPROP): 1e-3,
        ("cifar100", RULE_QAGREL): 1e0,
        ("cifar100", RULE_BACKPROP): 1e-3,
    }
    rule_tag = {RULE_QAGREL: "qagrel", RULE_BACKPROP: "bp"}
    for dataset in ("mnist", "cifar10", "cifar100"):
        in_shape, num_classes = DATASETS[dataset]
        for first in ("conv", "loccon"):
            for extra_fc in (False, True):
                arch = first + ("-deep" if extra_fc else "")
                specs = _spatial_stack(in_shape, num_classes, first, extra_fc)
                for rule in (RULE_QAGREL, RULE_BACKPROP):
                    name = f"{dataset}-{arch}-{rule_tag[rule]}"
                    add(name, dataset, rule, spatial_alpha[dataset, rule],
                        0.02, specs)

    return presets


PRESETS: dict[str, Preset] = _build_presets()


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(f"unknown preset {name!r}; available: {known}") from None
