"""Dense float64 arrays and seeded randomness.

All values in the package are plain numpy float64 arrays; this module fixes
that convention and provides the few primitives everything else builds on.
Double precision is deliberate: the gradient-equivalence checks assert
near-exact agreement between independent computation paths, which single
precision cannot support.
"""

from __future__ import annotations

import numpy as np

__all__ = ["SeededRng", "make_rng", "relu", "relu_gate", "uniform_init", "as_tensor"]

# A SeededRng is a numpy Generator constructed from an explicit 64-bit seed
# (PCG64 state). Identical seed => identical stream. Single-owner: never
# share one generator between concurrent consumers.
SeededRng = np.random.Generator


def make_rng(seed: int) -> SeededRng:
    """Create a deterministic generator from a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(values) -> np.ndarray:
    """Coerce to a float64 array (copying only if needed)."""
    return np.asarray(values, dtype=np.float64)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(as_tensor(x), 0.0)


def relu_gate(y: np.ndarray) -> np.ndarray:
    """Activity gate of a post-ReLU tensor: 1.0 where y > 0, else 0.0.

    The inequality is strict; a unit sitting exactly at threshold is
    silent and its gate is 0.
    """
    return (as_tensor(y) > 0.0).astype(np.float64)


def uniform_init(shape, lo: float, hi: float, rng: SeededRng) -> np.ndarray:
    """I.i.d. uniform values in [lo, hi], deterministic given the rng state.

    Raises ValueError unless lo < hi.
    """
    if not lo < hi:
        raise ValueError(f"invalid uniform range: lo={lo!r} must be < hi={hi!r}")
    return rng.uniform(lo, hi, size=shape).astype(np.float64)
