"""Weight initialization helpers (truncated normal for projections, zeros
for biases, ones for layer-norm gains)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def truncated_normal(
    rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02
) -> Tensor:
    """Normal(0, std) resampled until inside +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return Tensor(out, requires_grad=True)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)
