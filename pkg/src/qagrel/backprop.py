"""Error-backpropagation baseline over the same layer stack.

Trains the identical architecture with softmax outputs and cross-entropy
loss, using true gradients (the transpose of the forward weights carries
the error signal, not the learned feedback weights). Gradients follow the
mathematical sign convention: the trainer applies w -= alpha * grad.
"""

from __future__ import annotations

import numpy as np

from .engine import BatchResult, ForwardTrace, Network, _check_fresh, forward_pass, softmax
from .errors import ShapeError
from .layers import LayerKind, LayerWeights, apply_grad, layer_feedback, layer_update_grads
from .tensor import SeededRng

__all__ = [
    "softmax_xent",
    "xent_output_error",
    "backprop_grads",
    "backprop_batch",
]


def softmax_xent(q_values: np.ndarray, labels) -> np.ndarray:
    """Per-sample cross-entropy of softmax(q) against integer labels."""
    p = softmax(q_values)
    if p.ndim == 1:
        return -np.log(p[int(labels)])
    idx = np.asarray(labels, dtype=np.intp)
    return -np.log(p[np.arange(p.shape[0]), idx])


def xent_output_error(q_values: np.ndarray, labels) -> np.ndarray:
    """dLoss/dq for softmax cross-entropy: softmax(q) - one_hot(label)."""
    p = softmax(q_values)
    if p.ndim == 1:
        err = p.copy()
        err[int(labels)] -= 1.0
        return err
    err = p.copy()
    err[np.arange(p.shape[0]), np.asarray(labels, dtype=np.intp)] -= 1.0
    return err


def _transpose_pairing(spec, w: LayerWeights) -> LayerWeights:
    # The error signal travels down the forward weights themselves; reuse
    # the feedback kernel by presenting them in its expected layout.
    if spec.kind is LayerKind.FULLY_CONNECTED:
        return LayerWeights(w.forward_w, w.forward_w.T)
    return LayerWeights(w.forward_w, w.forward_w)


def backprop_grads(network: Network, trace: ForwardTrace, output_error: np.ndarray) -> list[np.ndarray | None]:
    """True loss gradients for every weighted layer, given dLoss/dq.

    Works on a single-trial or batched trace (batched grads are summed over
    samples). Dropout layers pass the error through their stored trial mask
    and contribute None.
    """
    _check_fresh(network, trace.net_version, "forward trace")
    err = np.asarray(output_error, dtype=np.float64)
    if err.shape != trace.q_values.shape:
        raise ShapeError(f"output error shape {err.shape} != q shape {trace.q_values.shape}")
    upstream = err
    grads: list[np.ndarray | None] = [None] * len(network.specs)
    for i in range(len(network.specs) - 1, -1, -1):
        spec = network.specs[i]
        w = network.weights[i]
        if spec.has_weights:
            grads[i] = layer_update_grads(spec, trace.activities[i], trace.gates[i], upstream, 1.0)
        if i > 0:
            upstream = layer_feedback(
                spec, _transpose_pairing(spec, w), upstream, trace.gates[i], trace.dropout_masks[i]
            )
    return grads


def backprop_batch(
    network: Network,
    stimuli: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    rng: SeededRng,
    update: bool = True,
    denominator: int | None = None,
) -> BatchResult:
    """One gradient-descent step on the mean cross-entropy of a batch.

    Feedback weights receive the same increment as their forward pairing so
    reciprocity holds for this arm too (they are simply unused by it).
    Returns reward-style stats: reward 1 where the greedy prediction is
    correct, and the per-batch mean loss in the error slot. `denominator`
    overrides the divisor for trailing short batches, as in run_batch.
    """
    labels = np.asarray(labels)
    n = stimuli.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    trace = forward_pass(network, stimuli, rng=rng, training=True)
    losses = softmax_xent(trace.q_values, labels)
    grads = backprop_grads(network, trace, xent_output_error(trace.q_values, labels))
    if update:
        scale = -alpha / (denominator if denominator is not None else n)
        for w, g in zip(network.weights, grads):
            if g is not None:
                apply_grad(w, g, scale)
        network.version += 1
    correct = float((np.argmax(trace.q_values, axis=1) == labels).sum())
    return BatchResult(n, correct, float(losses.sum()))
