"""Reward-gated deep learning with strictly reciprocal feedback weights.

The package trains deep ReLU networks with a four-factor synaptic rule:
a global reward-prediction error, the presynaptic activity, the
postsynaptic gate, and an attentional feedback signal propagated from the
selected output unit. An error-backpropagation arm with the same layer
stack, batching, and early stopping serves as the baseline, and an
independent gradient oracle checks that the two update routes agree.
"""

from .data import Dataset, SplitDataset, load_desk_mnist
from .engine import (
    ActionOutcome,
    ForwardTrace,
    Network,
    TrialResult,
    build_network,
    forward_pass,
    predict,
    run_batch,
    run_trial,
    select_action,
)
from .errors import (
    ConfigError,
    DataFormatError,
    NumericalError,
    QagrelError,
    ShapeError,
    StaleTraceError,
)
from .harness import (
    EpochReport,
    ExperimentConfig,
    RunResult,
    config_from_preset,
    evaluate,
    load_network,
    run_experiment,
    save_network,
    train_epoch,
    train_run,
)
from .layers import (
    LayerSpec,
    conv2d,
    dropout,
    fully_connected,
    locally_connected2d,
)
from .presets import PRESETS, get_preset
from .tensor import make_rng

__version__ = "0.1.0"

__all__ = [
    "ActionOutcome",
    "ConfigError",
    "DataFormatError",
    "Dataset",
    "EpochReport",
    "ExperimentConfig",
    "ForwardTrace",
    "LayerSpec",
    "Network",
    "NumericalError",
    "PRESETS",
    "QagrelError",
    "RunResult",
    "ShapeError",
    "SplitDataset",
    "StaleTraceError",
    "TrialResult",
    "build_network",
    "config_from_preset",
    "conv2d",
    "dropout",
    "evaluate",
    "forward_pass",
    "fully_connected",
    "get_preset",
    "load_desk_mnist",
    "load_network",
    "locally_connected2d",
    "make_rng",
    "predict",
    "run_batch",
    "run_experiment",
    "run_trial",
    "save_network",
    "select_action",
    "train_epoch",
    "train_run",
    "__version__",
]
