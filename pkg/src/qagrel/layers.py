"""Per-layer forward, feedback, and update kernels.

Four layer kinds: fully connected, 2-D convolution (optionally strided),
2-D locally connected (convolution topology with unshared per-position
weights), and dropout. Weighted layers carry two weight arrays:

* ``forward_w`` drives the bottom-up pass;
* ``feedback_w`` drives the top-down pass that gates plasticity.

The two arrays are stored separately but describe the same set of
connections. For fully connected layers ``feedback_w`` is laid out
transposed (``feedback_w[m, p]`` pairs with ``forward_w[p, m]``); for
convolutional and locally connected layers both arrays share the kernel
layout and the pairing is elementwise (each kernel element is one
receptive-field connection). Under reciprocal initialization and the
update rule here, the pairing stays numerically equal forever: both sides
receive the identical increment.

Spatial layers use channel-last layout ``(height, width, channels)``. A
sample flows through a layer as an array of exactly ``spec.in_shape``;
every kernel also accepts a batch with a leading axis, and returns arrays
with the same leading axis. Output spatial sizes follow

    out = (in + 2 * pad - kernel) // stride + 1

with no bias term anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import SeededRng, relu, relu_gate, uniform_init

__all__ = [
    "LayerKind",
    "LayerSpec",
    "LayerWeights",
    "LayerForward",
    "fully_connected",
    "conv2d",
    "locally_connected2d",
    "dropout",
    "conv_output_size",
    "init_layer_weights",
    "layer_forward",
    "layer_feedback",
    "layer_update_grads",
    "apply_grad",
]


class LayerKind(Enum):
    FULLY_CONNECTED = "fully_connected"
    CONV2D = "conv2d"
    LOCALLY_CONNECTED2D = "locally_connected2d"
    DROPOUT = "dropout"


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer; weight values live in LayerWeights."""

    kind: LayerKind
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kernel_size: tuple[int, int] | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    num_filters: int | None = None
    drop_rate: float = 0.0
    activation: str = "relu"  # "relu" or "linear"; weighted kinds only

    @property
    def in_size(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def has_weights(self) -> bool:
        return self.kind is not LayerKind.DROPOUT


def conv_output_size(in_dim: int, kernel: int, stride: int, pad: int) -> int:
    return (in_dim + 2 * pad - kernel) // stride + 1


def fully_connected(in_shape, units: int, activation: str = "relu") -> LayerSpec:
    in_shape = _as_shape(in_shape)
    if units < 1:
        raise ValueError(f"fully connected layer needs units >= 1, got {units}")
    if activation not in ("relu", "linear"):
        raise ValueError(f"unknown activation {activation!r}")
    return LayerSpec(
        kind=LayerKind.FULLY_CONNECTED,
        in_shape=in_shape,
        out_shape=(units,),
        activation=activation,
    )


def conv2d(in_shape, num_filters: int, kernel_size, stride=(1, 1), padding=(0, 0)) -> LayerSpec:
    return _spatial_spec(LayerKind.CONV2D, in_shape, num_filters, kernel_size, stride, padding)


def locally_connected2d(in_shape, num_filters: int, kernel_size, stride=(1, 1), padding=(0, 0)) -> LayerSpec:
    return _spatial_spec(
        LayerKind.LOCALLY_CONNECTED2D, in_shape, num_filters, kernel_size, stride, padding
    )


def dropout(in_shape, drop_rate: float) -> LayerSpec:
    in_shape = _as_shape(in_shape)
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must be in [0, 1), got {drop_rate}")
    return LayerSpec(
        kind=LayerKind.DROPOUT,
        in_shape=in_shape,
        out_shape=in_shape,
        drop_rate=drop_rate,
    )


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, int):
        return (shape,)
    return tuple(int(d) for d in shape)


def _spatial_spec(kind, in_shape, num_filters, kernel_size, stride, padding) -> LayerSpec:
    in_shape = _as_shape(in_shape)
    if len(in_shape) != 3:
        raise ValueError(f"{kind.value} expects (height, width, channels) input, got {in_shape}")
    kh, kw = _pair(kernel_size)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    h, w, _ = in_shape
    oh = conv_output_size(h, kh, sh, ph)
    ow = conv_output_size(w, kw, sw, pw)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"kernel {kh}x{kw} stride {sh}x{sw} pad {ph}x{pw} does not fit input {h}x{w}"
        )
    if num_filters < 1:
        raise ValueError(f"need num_filters >= 1, got {num_filters}")
    return LayerSpec(
        kind=kind,
        in_shape=in_shape,
        out_shape=(oh, ow, num_filters),
        kernel_size=(kh, kw),
        stride=(sh, sw),
        padding=(ph, pw),
        num_filters=num_filters,
    )


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass
class LayerWeights:
    """Paired forward / feedback weight arrays (both None for dropout).

    Layouts by kind:
      fully connected     forward (in_size, units), feedback (units, in_size)
      conv2d              forward == feedback shape (kh, kw, in_c, filters)
      locally connected   forward == feedback shape (oh, ow, kh*kw*in_c, filters)
    """

    forward_w: np.ndarray | None
    feedback_w: np.ndarray | None


def forward_weight_shape(spec: LayerSpec) -> tuple[int, ...] | None:
    if spec.kind is LayerKind.FULLY_CONNECTED:
        return (spec.in_size, spec.out_shape[0])
    if spec.kind is LayerKind.CONV2D:
        kh, kw = spec.kernel_size
        return (kh, kw, spec.in_shape[2], spec.num_filters)
    if spec.kind is LayerKind.LOCALLY_CONNECTED2D:
        kh, kw = spec.kernel_size
        oh, ow, _ = spec.out_shape
        return (oh, ow, kh * kw * spec.in_shape[2], spec.num_filters)
    return None


def init_layer_weights(spec: LayerSpec, init_range: float, rng: SeededRng) -> LayerWeights:
    """Uniform init in [-init_range, init_range] with strict reciprocity.

    The feedback array starts as an exact copy of its forward pairing
    (transposed copy for fully connected layers).
    """
    shape = forward_weight_shape(spec)
    if shape is None:
        return LayerWeights(None, None)
    fwd = uniform_init(shape, -init_range, init_range, rng)
    if spec.kind is LayerKind.FULLY_CONNECTED:
        fb = fwd.T.copy()
    else:
        fb = fwd.copy()
    return LayerWeights(fwd, fb)


class LayerForward(NamedTuple):
    pre_activation: np.ndarray
    activation: np.ndarray
    gate: np.ndarray
    dropout_mask: np.ndarray | None


def _batched(x: np.ndarray, shape: tuple[int, ...], what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == shape:
        return x[None], True
    if x.shape[1:] == shape and x.ndim == len(shape) + 1:
        return x, False
    raise ShapeError(f"{what}: expected shape {shape} or (n, *{shape}), got {x.shape}")


def _unbatch(single: bool, *arrays):
    if not single:
        return arrays
    return tuple(a[0] if isinstance(a, np.ndarray) else a for a in arrays)


def _im2col(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Extract receptive-field patches: (n, H, W, C) -> (n, oh, ow, kh*kw*C).

    Patch elements are ordered (kh, kw, C), matching the kernel layout
    flattened as forward_w.reshape(kh*kw*C, filters).
    """
    kh, kw = spec.kernel_size
    sh, sw = spec.stride
    ph, pw = spec.padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    patches = win.transpose(0, 1, 2, 4, 5, 3)  # (n, oh, ow, kh, kw, C)
    n, oh, ow = patches.shape[:3]
    return np.ascontiguousarray(patches).reshape(n, oh, ow, kh * kw * x.shape[3])


def _col2im(cols: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back onto the input plane."""
    h, w, c = spec.in_shape
    kh, kw = spec.kernel_size
    sh, sw = spec.stride
    ph, pw = spec.padding
    n, oh, ow = cols.shape[:3]
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :] += cols[:, :, :, i, j, :]
    if ph or pw:
        out = out[:, ph : ph + h, pw : pw + w, :]
    return out


def _sample_dropout_mask(spec: LayerSpec, n: int, rng: SeededRng) -> np.ndarray:
    # Inverted dropout: survivors carry 1/keep so evaluation needs no rescale.
    keep = 1.0 - spec.drop_rate
    return (rng.random((n,) + spec.in_shape) >= spec.drop_rate) / keep


def layer_forward(
    spec: LayerSpec,
    w: LayerWeights,
    input: np.ndarray,
    rng: SeededRng | None = None,
    training: bool = False,
    dropout_mask: np.ndarray | None = None,
) -> LayerForward:
    """One layer's bottom-up pass.

    Weighted kinds return the weighted-sum pre-activation, its ReLU (or the
    identity for a linear layer), and the activity gate (1 where the
    activation is positive; all ones for a linear layer). Dropout returns
    the masked input in training mode (mask sampled here, once per trial,
    unless a previously sampled mask is injected to replay a trial) and the
    input unchanged in evaluation mode; its gate marks surviving units.
    """
    x, single = _batched(input, spec.in_shape, f"{spec.kind.value} input")
    n = x.shape[0]

    if spec.kind is LayerKind.DROPOUT:
        if training:
            if dropout_mask is not None:
                mask, _ = _batched(dropout_mask, spec.in_shape, "dropout mask")
                mask = np.broadcast_to(mask, x.shape) if mask.shape[0] == 1 and n > 1 else mask
            elif rng is None:
                raise ValueError("dropout in training mode needs an rng or an injected mask")
            else:
                mask = _sample_dropout_mask(spec, n, rng)
            act = x * mask
            gate = (mask > 0).astype(np.float64)
        else:
            mask = None
            act = x
            gate = np.ones_like(x)
        pre, act, gate = _unbatch(single, act, act, gate)
        if mask is not None and single:
            mask = mask[0]
        return LayerForward(pre, act, gate, mask)

    if spec.kind is LayerKind.FULLY_CONNECTED:
        a = x.reshape(n, -1) @ w.forward_w
    elif spec.kind is LayerKind.CONV2D:
        patches = _im2col(x, spec)
        k = patches.shape[-1]
        a = (patches.reshape(-1, k) @ w.forward_w.reshape(k, spec.num_filters)).reshape(
            (n,) + spec.out_shape
        )
    else:  # LOCALLY_CONNECTED2D
        patches = _im2col(x, spec)
        a = np.einsum("nxyk,xykf->nxyf", patches, w.forward_w)

    if spec.activation == "linear":
        act = a
        gate = np.ones_like(a)
    else:
        act = relu(a)
        gate = relu_gate(act)
    a, act, gate = _unbatch(single, a, act, gate)
    return LayerForward(a, act, gate, None)


def layer_feedback(
    spec: LayerSpec,
    w: LayerWeights,
    fb_upstream: np.ndarray,
    gate: np.ndarray,
    dropout_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Propagate feedback arriving at this layer's output units down to its
    input side.

    Each output unit q contributes gate_q * feedback_w[q -> m] * fb_q to
    input-side unit m; silent units (gate 0) contribute nothing. Dropout
    passes the signal through its stored trial mask.
    """
    fb, single = _batched(fb_upstream, spec.out_shape, "feedback input")
    if spec.kind is LayerKind.DROPOUT:
        if dropout_mask is None:
            out = fb
        else:
            mask, _ = _batched(dropout_mask, spec.in_shape, "dropout mask")
            out = fb * mask
        return _unbatch(single, out)[0]

    g, _ = _batched(gate, spec.out_shape, "gate")
    gfb = g * fb
    n = gfb.shape[0]

    if spec.kind is LayerKind.FULLY_CONNECTED:
        out = (gfb @ w.feedback_w).reshape((n,) + spec.in_shape)
    elif spec.kind is LayerKind.CONV2D:
        k = w.feedback_w.size // spec.num_filters
        cols = (gfb.reshape(-1, spec.num_filters) @ w.feedback_w.reshape(k, spec.num_filters).T)
        out = _col2im(cols.reshape(n, *spec.out_shape[:2], k), spec)
    else:  # LOCALLY_CONNECTED2D
        cols = np.einsum("nxyf,xykf->nxyk", gfb, w.feedback_w)
        out = _col2im(cols, spec)
    return _unbatch(single, out)[0]


def layer_update_grads(
    spec: LayerSpec,
    pre_layer_activity: np.ndarray,
    gate: np.ndarray,
    fb: np.ndarray,
    delta,
) -> np.ndarray | None:
    """Four-factor weight change for this layer's forward weights.

    Per connection p -> m:  grad = delta * activity_p * gate_m * fb_m,
    where fb_m is the feedback arriving at output unit m. The learning rate
    and batch averaging are applied by the caller. Convolution sums the
    change over all spatial positions sharing a kernel element; locally
    connected layers keep per-position entries. For a batch, per-trial
    grads are summed (delta may be a per-sample vector). Dropout has no
    weights and returns None.
    """
    if spec.kind is LayerKind.DROPOUT:
        return None
    x, _ = _batched(pre_layer_activity, spec.in_shape, "presynaptic activity")
    g, _ = _batched(gate, spec.out_shape, "gate")
    f, _ = _batched(fb, spec.out_shape, "feedback")
    n = x.shape[0]
    d = np.asarray(delta, dtype=np.float64).reshape(-1)
    if d.size == 1:
        d = np.broadcast_to(d, (n,))
    elif d.size != n:
        raise ShapeError(f"delta has {d.size} entries for batch of {n}")

    post = g * f * d.reshape((n,) + (1,) * len(spec.out_shape))

    if spec.kind is LayerKind.FULLY_CONNECTED:
        return x.reshape(n, -1).T @ post
    patches = _im2col(x, spec)
    if spec.kind is LayerKind.CONV2D:
        k = patches.shape[-1]
        grad = patches.reshape(-1, k).T @ post.reshape(-1, spec.num_filters)
        kh, kw = spec.kernel_size
        return grad.reshape(kh, kw, spec.in_shape[2], spec.num_filters)
    return np.einsum("nxyk,nxyf->xykf", patches, post)


def apply_grad(w: LayerWeights, grad: np.ndarray | None, alpha: float) -> LayerWeights:
    """Add alpha * grad to the forward weights and the identical increment to
    the paired feedback weights (in place).
    """
    if grad is None:
        return w
    if w.forward_w is None:
        raise ShapeError("apply_grad called with a gradient for a weightless layer")
    if grad.shape != w.forward_w.shape:
        raise ShapeError(f"grad shape {grad.shape} != weight shape {w.forward_w.shape}")
    step = alpha * grad
    w.forward_w += step
    if w.feedback_w.shape == w.forward_w.shape:
        w.feedback_w += step
    else:
        w.feedback_w += step.T
    return w
