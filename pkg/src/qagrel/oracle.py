"""Independent gradient cross-checks.

Two reference routes for the same quantity the trial engine produces:

* `selective_backprop_grads` differentiates the prediction error through
  the forward weights by the chain rule, attending only to the selected
  action. It re-implements the forward pass and the backward sweep with
  per-position loops on purpose, sharing none of the vectorized layer
  kernels, so a bug there cannot cancel a bug here.
* `finite_diff` perturbs every weight element and measures the loss
  directly.

Both return update directions (w += alpha * grad) so results compare
one-to-one with the trial engine's output. `random_network_spec` draws the
small mixed-architecture stacks the sweep tests run on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Network
from .layers import LayerKind, LayerSpec, conv2d, dropout, fully_connected, locally_connected2d
from .tensor import SeededRng

__all__ = [
    "selective_backprop_grads",
    "finite_diff",
    "selected_action_error",
    "action_values",
    "compare_grads",
    "GradComparison",
    "random_network_spec",
]


def _pad(x: np.ndarray, padding) -> np.ndarray:
    ph, pw = padding
    if ph or pw:
        return np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    return x


def _oracle_forward(network: Network, stimulus: np.ndarray, masks):
    """Plain re-implementation of the stack's forward pass (one sample)."""
    acts = [np.asarray(stimulus, dtype=np.float64)]
    gates = []
    for i, spec in enumerate(network.specs):
        w = network.weights[i].forward_w
        x = acts[-1]
        if spec.kind is LayerKind.DROPOUT:
            mask = masks[i] if masks is not None else None
            y = x if mask is None else x * mask
            gates.append(np.ones_like(x) if mask is None else (mask > 0).astype(np.float64))
            acts.append(y)
            continue
        if spec.kind is LayerKind.FULLY_CONNECTED:
            a = w.T @ x.ravel()
        else:
            kh, kw = spec.kernel_size
            sh, sw = spec.stride
            xp = _pad(x, spec.padding)
            oh, ow, f = spec.out_shape
            a = np.empty((oh, ow, f))
            for ox in range(oh):
                for oy in range(ow):
                    patch = xp[ox * sh : ox * sh + kh, oy * sw : oy * sw + kw, :]
                    if spec.kind is LayerKind.CONV2D:
                        kernel = w
                    else:
                        kernel = w[ox, oy].reshape(kh, kw, x.shape[2], f)
                    a[ox, oy] = np.tensordot(patch, kernel, axes=3)
        if spec.activation == "linear":
            y = a
            gate = np.ones_like(a)
        else:
            y = np.maximum(a, 0.0)
            gate = (y > 0.0).astype(np.float64)
        gates.append(gate)
        acts.append(y)
    return acts, gates


def selective_backprop_grads(
    network: Network,
    stimulus: np.ndarray,
    action: int,
    delta: float,
    dropout_masks=None,
) -> list[np.ndarray | None]:
    """Chain-rule gradients of the selected action value, scaled by delta.

    Computes delta * d(q_action)/dw for every weighted layer, holding the
    given dropout masks fixed; this is the update direction that gradient
    descent on the prediction error 0.5 * delta**2 would take.
    """
    acts, gates = _oracle_forward(network, stimulus, dropout_masks)
    sens = np.zeros(network.num_actions)
    sens[int(action)] = 1.0
    grads: list[np.ndarray | None] = [None] * len(network.specs)
    for i in range(len(network.specs) - 1, -1, -1):
        spec = network.specs[i]
        w = network.weights[i].forward_w
        x = acts[i]
        if spec.kind is LayerKind.DROPOUT:
            mask = dropout_masks[i] if dropout_masks is not None else None
            if mask is not None:
                sens = sens * mask
            continue
        dpre = sens * gates[i]
        if spec.kind is LayerKind.FULLY_CONNECTED:
            grads[i] = np.outer(x.ravel(), dpre)
            sens = (w @ dpre).reshape(spec.in_shape)
        else:
            kh, kw = spec.kernel_size
            sh, sw = spec.stride
            ph, pw = spec.padding
            xp = _pad(x, spec.padding)
            oh, ow, f = spec.out_shape
            c = x.shape[2]
            grad = np.zeros(w.shape)
            down = np.zeros(xp.shape)
            for ox in range(oh):
                for oy in range(ow):
                    patch = xp[ox * sh : ox * sh + kh, oy * sw : oy * sw + kw, :]
                    d = dpre[ox, oy]
                    contrib = patch[:, :, :, None] * d[None, None, None, :]
                    if spec.kind is LayerKind.CONV2D:
                        grad += contrib
                        kernel = w
                    else:
                        grad[ox, oy] += contrib.reshape(kh * kw * c, f)
                        kernel = w[ox, oy].reshape(kh, kw, c, f)
                    down[ox * sh : ox * sh + kh, oy * sw : oy * sw + kw, :] += np.tensordot(
                        kernel, d, axes=([3], [0])
                    )
            grads[i] = grad
            h, wd = spec.in_shape[:2]
            sens = down[ph : ph + h, pw : pw + wd, :]
    return [None if g is None else delta * g for g in grads]


def selected_action_error(network: Network, stimulus, action: int, reward: float, dropout_masks=None) -> float:
    """Prediction error 0.5 * (reward - q_action)^2 under fixed masks."""
    acts, _ = _oracle_forward(network, stimulus, dropout_masks)
    d = reward - acts[-1][int(action)]
    return 0.5 * d * d


def action_values(network: Network, stimulus, dropout_masks=None) -> np.ndarray:
    """Output values from the reference forward pass under fixed masks."""
    acts, _ = _oracle_forward(network, stimulus, dropout_masks)
    return acts[-1]


def finite_diff(loss_fn, weights: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of loss_fn with respect to one weight
    array, perturbing a single element at a time.
    """
    grad = np.zeros_like(weights)
    flat = weights.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = loss_fn()
        flat[i] = keep - step
        down = loss_fn()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class GradComparison:
    max_rel: float
    max_abs: float
    worst_layer: int
    ok: bool


def compare_grads(got, want, rtol: float, atol: float = 1e-12) -> GradComparison:
    """Elementwise comparison of two per-layer gradient lists.

    Relative error uses the larger magnitude of the pair as denominator;
    pairs both below atol count as matching.
    """
    max_rel = 0.0
    max_abs = 0.0
    worst = -1
    for i, (a, b) in enumerate(zip(got, want)):
        if a is None and b is None:
            continue
        if (a is None) != (b is None):
            return GradComparison(np.inf, np.inf, i, False)
        diff = np.abs(a - b)
        small = (np.abs(a) < atol) & (np.abs(b) < atol)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), atol)
        rel = float(np.where(small, 0.0, diff / denom).max()) if diff.size else 0.0
        ab = float(diff.max()) if diff.size else 0.0
        if rel > max_rel:
            max_rel, worst = rel, i
        max_abs = max(max_abs, ab)
    return GradComparison(max_rel, max_abs, worst, max_rel <= rtol)


def random_network_spec(rng: SeededRng) -> list[LayerSpec]:
    """A small random stack of depth 2 to 4 mixing all four layer kinds,
    ending in a linear readout.
    """
    depth = int(rng.integers(2, 5))
    spatial = rng.random() < 0.7
    shape: tuple[int, ...] = (int(rng.integers(4, 7)), int(rng.integers(4, 7)), int(rng.integers(1, 3))) if spatial else (int(rng.integers(4, 10)),)
    specs: list[LayerSpec] = []
    for _ in range(depth - 1):
        choices = ["fc", "drop"]
        if len(shape) == 3:
            choices += ["conv", "loccon"]
        kind = choices[int(rng.integers(len(choices)))]
        if kind == "fc":
            units = int(rng.integers(3, 9))
            specs.append(fully_connected(shape, units))
            shape = (units,)
        elif kind == "drop":
            specs.append(dropout(shape, float(rng.choice([0.2, 0.5, 0.8]))))
        else:
            maker = conv2d if kind == "conv" else locally_connected2d
            filters = int(rng.integers(1, 4))
            k = int(rng.integers(2, 4))
            stride = int(rng.choice([1, 2]))
            pad = int(rng.choice([0, 1]))
            try:
                spec = maker(shape, filters, (k, k), stride=(stride, stride), padding=(pad, pad))
            except ValueError:
                units = int(rng.integers(3, 9))
                spec = fully_connected(shape, units)
            specs.append(spec)
            shape = spec.out_shape
    specs.append(fully_connected(shape, int(rng.integers(2, 5)), activation="linear"))
    return specs
