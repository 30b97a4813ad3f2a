"""Named parameter collection, Adam with linear warmup, and gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import Tensor, TensorError


class OptimizerError(TensorError):
    """Raised on optimizer misuse (missing or non-finite gradients)."""


class ParameterTree:
    """Ordered name -> Tensor mapping for every learnable tensor of a model."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise TensorError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise TensorError(f"parameter {name!r} must have requires_grad=True")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def value_dict(self) -> dict[str, np.ndarray]:
        """Snapshot of all parameter arrays (copies)."""
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_value_dict(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise TensorError(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, t in self._params.items():
            t.assign(values[name])


@dataclass
class OptimizerState:
    """Adam accumulators plus the warmup schedule inputs.

    The step counter is the number of optimizer steps taken so far; the
    learning rate for a step is evaluated at the pre-increment counter, so the
    very first step of a fresh run uses lr 0 (the warmup ramp starts at zero).
    """

    base_lr: float
    warmup_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(
        cls,
        params: ParameterTree,
        base_lr: float,
        warmup_steps: int,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "OptimizerState":
        if base_lr <= 0:
            raise OptimizerError("base_lr must be positive")
        if warmup_steps < 1:
            raise OptimizerError("warmup_steps must be a positive integer")
        state = cls(base_lr=base_lr, warmup_steps=warmup_steps, beta1=beta1, beta2=beta2, eps=eps)
        for name, t in params.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def lr_at_step(state: OptimizerState) -> float:
    """base_lr * min(1, step/warmup); constant at base_lr after warmup."""
    return state.base_lr * min(1.0, state.step / state.warmup_steps)


def adam_step(params: ParameterTree, state: OptimizerState) -> float:
    """One Adam update with bias correction; returns the learning rate used.

    Gradients are left untouched (the caller clears them). The bias-correction
    exponent is ``step + 1`` so the first update of zero-initialized moments is
    corrected exactly.
    """
    lr = lr_at_step(state)
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.assign(p.data - update)
    state.step += 1
    return lr


def clip_global_norm(params: ParameterTree, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the applied factor (1.0 when already under the threshold).
    """
    if max_norm <= 0:
        raise OptimizerError("max_norm must be positive")
    total = 0.0
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")
        if not np.isfinite(p.grad).all():
            raise OptimizerError(f"parameter {name!r} has a non-finite gradient")
        total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for p in params.tensors():
        p.grad *= factor
    return factor
