"""Trial engine: forward pass, action selection, feedback pass, updates.

A trial runs in five phases. The network maps a stimulus to action values
through ReLU layers and a linear output layer. An action is picked by the
max-Boltzmann rule: greedy with probability 1 - epsilon, otherwise a
softmax draw over the action values. A one-hot attention signal z at the
selected action then travels down the feedback weights, gated at every
layer by the units that were active on the way up. The reward prediction
error delta = reward - q_selected scales a four-factor weight change

    grad[p -> m] = delta * activity_p * gate_m * feedback_m

applied identically to the forward weight and its feedback pairing, so the
two stay reciprocal throughout learning.

All kernels accept a single sample or a batch (leading axis). A batch is
treated as independent trials whose weight changes are summed; the caller
divides by the batch size before applying.

Networks carry a version counter, bumped whenever an update is applied
through this module; traces remember the version they were computed
against, and the feedback / update phases refuse a trace from an older
version of the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError, StaleTraceError
from .layers import (
    LayerKind,
    LayerSpec,
    LayerWeights,
    apply_grad,
    init_layer_weights,
    layer_feedback,
    layer_forward,
    layer_update_grads,
)
from .tensor import SeededRng

__all__ = [
    "Network",
    "build_network",
    "ForwardTrace",
    "ActionOutcome",
    "FeedbackTrace",
    "TrialResult",
    "BatchResult",
    "forward_pass",
    "softmax",
    "select_action",
    "select_actions",
    "compute_reward",
    "compute_rpe",
    "backward_feedback",
    "trial_grads",
    "run_trial",
    "run_batch",
    "predict",
]


@dataclass
class Network:
    """Layer stack with paired forward / feedback weights.

    `version` counts applied updates; traces are tagged with it so that a
    trace computed before an update cannot silently drive the next one.
    """

    specs: tuple[LayerSpec, ...]
    weights: list[LayerWeights]
    version: int = 0

    @property
    def num_actions(self) -> int:
        return self.specs[-1].out_shape[0]

    @property
    def in_shape(self) -> tuple[int, ...]:
        return self.specs[0].in_shape


def build_network(specs, rng: SeededRng, fc_init: float = 0.05, spatial_init: float = 0.02) -> Network:
    """Validate a layer chain and draw reciprocal initial weights.

    Fully connected layers start uniform in +-fc_init, convolutional and
    locally connected layers in +-spatial_init. The stack must end in a
    linear fully connected output; every other weighted layer must be ReLU.
    """
    specs = tuple(specs)
    if not specs:
        raise ConfigError("network needs at least one layer")
    last = specs[-1]
    if last.kind is not LayerKind.FULLY_CONNECTED or last.activation != "linear":
        raise ConfigError("the final layer must be a linear fully connected readout")
    for i, spec in enumerate(specs[:-1]):
        if spec.has_weights and spec.activation != "relu":
            raise ConfigError(f"hidden layer {i} must use relu activation")
    for i in range(len(specs) - 1):
        got, want = specs[i].out_shape, specs[i + 1].in_shape
        if got != want:
            raise ConfigError(f"layer {i} output {got} does not feed layer {i + 1} input {want}")

    weights = []
    for spec in specs:
        r = spatial_init if spec.kind in (LayerKind.CONV2D, LayerKind.LOCALLY_CONNECTED2D) else fc_init
        weights.append(init_layer_weights(spec, r, rng))
    return Network(specs, weights)


@dataclass
class ForwardTrace:
    """Everything the feedback and update phases need from the forward pass.

    activities[0] is the stimulus; activities[l + 1] is layer l's output.
    The q-values are the last layer's raw linear outputs.
    """

    pre_activations: list[np.ndarray]
    activities: list[np.ndarray]
    gates: list[np.ndarray]
    dropout_masks: list[np.ndarray | None]
    training: bool
    net_version: int

    @property
    def q_values(self) -> np.ndarray:
        return self.activities[-1]


def forward_pass(
    network: Network,
    stimulus: np.ndarray,
    rng: SeededRng | None = None,
    training: bool = False,
    dropout_masks: list[np.ndarray | None] | None = None,
) -> ForwardTrace:
    """Run the stimulus up the stack, recording per-layer activity.

    In training mode dropout masks are sampled here (once per trial) unless
    `dropout_masks` replays stored ones; in evaluation mode dropout is the
    identity.
    """
    activities = [np.asarray(stimulus, dtype=np.float64)]
    pres: list[np.ndarray] = []
    gates: list[np.ndarray] = []
    masks: list[np.ndarray | None] = []
    for i, (spec, w) in enumerate(zip(network.specs, network.weights)):
        injected = dropout_masks[i] if dropout_masks is not None else None
        out = layer_forward(spec, w, activities[-1], rng=rng, training=training, dropout_mask=injected)
        pres.append(out.pre_activation)
        activities.append(out.activation)
        gates.append(out.gate)
        masks.append(out.dropout_mask)
    return ForwardTrace(pres, activities, gates, masks, training, network.version)


def softmax(q: np.ndarray) -> np.ndarray:
    """Boltzmann action probabilities exp(q) / sum(exp(q)), last axis."""
    q = np.asarray(q, dtype=np.float64)
    shifted = q - q.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ActionOutcome:
    """Selection result; reward and delta are filled once the label is seen.

    Scalar fields for a single trial, aligned arrays for a batch. `greedy`
    marks the argmax branch (False = Boltzmann exploration).
    """

    selected: int | np.ndarray
    z: np.ndarray
    greedy: bool | np.ndarray
    reward: float | np.ndarray | None = None
    delta: float | np.ndarray | None = None


def _one_hot(selected, num_actions: int) -> np.ndarray:
    idx = np.asarray(selected, dtype=np.intp)
    if idx.ndim == 0:
        z = np.zeros(num_actions)
        z[int(idx)] = 1.0
        return z
    z = np.zeros((idx.shape[0], num_actions))
    z[np.arange(idx.shape[0]), idx] = 1.0
    return z


def select_action(q: np.ndarray, epsilon: float, rng: SeededRng) -> ActionOutcome:
    """Max-Boltzmann selection over one action-value vector.

    With probability 1 - epsilon pick the greedy action (ties resolve to the
    lowest index); otherwise draw from the softmax distribution.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise ShapeError(f"select_action wants a 1-D action-value vector, got shape {q.shape}")
    if q.size == 0:
        raise ShapeError("select_action got an empty action-value vector")
    if rng.random() < epsilon:
        p = softmax(q)
        selected = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
        selected = min(selected, q.size - 1)  # guard against cumsum rounding at 1.0
        greedy = False
    else:
        selected = int(np.argmax(q))
        greedy = True
    return ActionOutcome(selected, _one_hot(selected, q.size), greedy)


def select_actions(q: np.ndarray, epsilon: float, rng: SeededRng) -> ActionOutcome:
    """Vectorized max-Boltzmann selection for a batch of action-value rows.

    Consumes exactly two uniform draws per row so the stream stays aligned
    whatever the outcome mix.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] == 0:
        raise ShapeError(f"select_actions wants (n, actions), got shape {q.shape}")
    n = q.shape[0]
    explore = rng.random(n) < epsilon
    u = rng.random(n)
    greedy_pick = np.argmax(q, axis=1)
    cdf = np.cumsum(softmax(q), axis=1)
    sampled = np.minimum((cdf > u[:, None]).argmax(axis=1), q.shape[1] - 1)
    selected = np.where(explore, sampled, greedy_pick)
    return ActionOutcome(selected, _one_hot(selected, q.shape[1]), ~explore)


def compute_reward(selected, label) -> np.ndarray:
    """Reward 1.0 for naming the correct class, 0.0 otherwise."""
    return (np.asarray(selected) == np.asarray(label)).astype(np.float64)


def compute_rpe(reward, q_selected) -> np.ndarray:
    """Reward prediction error delta = reward - q_selected."""
    return np.asarray(reward, dtype=np.float64) - np.asarray(q_selected, dtype=np.float64)


def selected_q(q_values: np.ndarray, selected) -> np.ndarray:
    """The q-value(s) of the selected action(s)."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.ndim == 1:
        return q[int(selected)]
    return q[np.arange(q.shape[0]), np.asarray(selected, dtype=np.intp)]


@dataclass
class FeedbackTrace:
    """Gated feedback at each layer's output units for one trial (or batch).

    fbs[l] is gate_l * (signal arriving from above); a unit that was silent
    or dropped on the way up therefore carries exactly zero feedback.
    """

    fbs: list[np.ndarray]
    net_version: int


def _check_fresh(network: Network, version: int, what: str) -> None:
    if version != network.version:
        raise StaleTraceError(
            f"{what} was computed against network version {version}, "
            f"but the weights are now at version {network.version}"
        )


def backward_feedback(network: Network, trace: ForwardTrace, z: np.ndarray) -> FeedbackTrace:
    """Propagate the one-hot attention signal z down the feedback weights,
    gating at every layer by the forward activity.
    """
    _check_fresh(network, trace.net_version, "forward trace")
    arriving = np.asarray(z, dtype=np.float64)
    want = trace.q_values.shape
    if arriving.shape != want:
        raise ShapeError(f"attention signal shape {arriving.shape} != q shape {want}")
    fbs: list[np.ndarray | None] = [None] * len(network.specs)
    for i in range(len(network.specs) - 1, -1, -1):
        spec = network.specs[i]
        fbs[i] = trace.gates[i] * arriving
        if i == 0:
            break
        arriving = layer_feedback(
            spec, network.weights[i], arriving, trace.gates[i], trace.dropout_masks[i]
        )
    return FeedbackTrace(fbs, trace.net_version)


def trial_grads(
    network: Network, trace: ForwardTrace, feedback: FeedbackTrace, delta
) -> list[np.ndarray | None]:
    """Four-factor weight changes for every layer of one trial (or summed
    over a batch when the trace is batched and delta is per-sample).

    Entries are update directions: the caller applies w += alpha * grad.
    Dropout layers yield None.
    """
    _check_fresh(network, trace.net_version, "forward trace")
    _check_fresh(network, feedback.net_version, "feedback trace")
    grads: list[np.ndarray | None] = []
    for i, spec in enumerate(network.specs):
        if not spec.has_weights:
            grads.append(None)
            continue
        grads.append(
            layer_update_grads(spec, trace.activities[i], trace.gates[i], feedback.fbs[i], delta)
        )
    return grads


@dataclass
class TrialResult:
    trace: ForwardTrace
    outcome: ActionOutcome
    error: float
    grads: list[np.ndarray | None] = field(default_factory=list)

    @property
    def reward(self) -> float:
        return self.outcome.reward

    @property
    def delta(self) -> float:
        return self.outcome.delta


def run_trial(
    network: Network,
    stimulus: np.ndarray,
    label: int,
    epsilon: float,
    rng: SeededRng,
    training: bool = True,
) -> TrialResult:
    """One full trial: forward, select, reward, feedback, grads.

    Does not touch the weights; the caller decides when and how to apply
    the returned grads.
    """
    trace = forward_pass(network, stimulus, rng=rng, training=training)
    outcome = select_action(trace.q_values, epsilon, rng)
    reward = float(compute_reward(outcome.selected, label))
    delta = float(compute_rpe(reward, selected_q(trace.q_values, outcome.selected)))
    outcome = replace(outcome, reward=reward, delta=delta)
    feedback = backward_feedback(network, trace, outcome.z)
    grads = trial_grads(network, trace, feedback, delta)
    return TrialResult(trace, outcome, 0.5 * delta * delta, grads)


@dataclass
class BatchResult:
    n: int
    reward_sum: float
    error_sum: float
    explored: int = 0

    @property
    def mean_reward(self) -> float:
        return self.reward_sum / self.n

    @property
    def mean_error(self) -> float:
        return self.error_sum / self.n

    @property
    def exploration_fraction(self) -> float:
        return self.explored / self.n


def run_batch(
    network: Network,
    stimuli: np.ndarray,
    labels: np.ndarray,
    epsilon: float,
    alpha: float,
    rng: SeededRng,
    update: bool = True,
    denominator: int | None = None,
) -> BatchResult:
    """Run a batch of independent trials and (optionally) apply the summed
    weight change scaled by alpha / batch_size.

    `denominator` overrides the divisor; a trailing short batch should keep
    the full epoch's batch size there so its few samples do not get an
    outsized step.
    """
    labels = np.asarray(labels)
    n = stimuli.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    trace = forward_pass(network, stimuli, rng=rng, training=True)
    outcome = select_actions(trace.q_values, epsilon, rng)
    rewards = compute_reward(outcome.selected, labels)
    deltas = compute_rpe(rewards, selected_q(trace.q_values, outcome.selected))
    feedback = backward_feedback(network, trace, outcome.z)
    grads = trial_grads(network, trace, feedback, deltas)
    if update:
        scale = alpha / (denominator if denominator is not None else n)
        for w, g in zip(network.weights, grads):
            if g is not None:
                apply_grad(w, g, scale)
        network.version += 1
    return BatchResult(
        n, float(rewards.sum()), float(0.5 * (deltas**2).sum()), int(n - np.sum(outcome.greedy))
    )


def predict(network: Network, stimuli: np.ndarray) -> np.ndarray:
    """Greedy actions in evaluation mode (dropout off)."""
    trace = forward_pass(network, stimuli, training=False)
    q = trace.q_values
    if q.ndim == 1:
        return np.asarray(int(np.argmax(q)))
    return np.argmax(q, axis=1)
