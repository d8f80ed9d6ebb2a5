"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import DimensionError, Tensor


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return dict(grads), total
    c = max_norm / total
    return {k: g * c for k, g in grads.items()}, total


def adamw_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState
) -> None:
    """Apply one AdamW update in place to every parameter named in ``grads``.

    Moment buffers are created lazily, so parameters that never receive a
    gradient (frozen ones) never get optimizer state.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * update
