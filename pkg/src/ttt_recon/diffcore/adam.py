"""Bias-corrected Adam over named parameter dicts.

Moment tensors are stored in float32 like the parameters; each update is
computed in float64 and rounded back, so step arithmetic is reproducible to
the rounding of the stored state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ShapeError
from .tensor import REAL, Tensor


@dataclass
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be nonnegative, got {self.lr}")


@dataclass
class AdamState:
    hyper: AdamHyper
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, Tensor], lr: float, **kw) -> "AdamState":
        state = cls(hyper=AdamHyper(lr=lr, **kw))
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | Tensor],
    state: AdamState,
) -> tuple[dict[str, Tensor], AdamState]:
    """One Adam update over all parameters; mutates params/state in place."""
    hp = state.hyper
    t = state.step_count + 1
    bc1 = 1.0 - hp.beta1**t
    bc2 = 1.0 - hp.beta2**t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient entries for parameter '{name}'")
        g64 = g.astype(np.float64)
        m = (hp.beta1 * state.first_moment[name].astype(np.float64) + (1.0 - hp.beta1) * g64).astype(REAL)
        v = (hp.beta2 * state.second_moment[name].astype(np.float64) + (1.0 - hp.beta2) * g64 * g64).astype(REAL)
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m.astype(np.float64) / bc1
        v_hat = v.astype(np.float64) / bc2
        upd = p.data.astype(np.float64) - hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)
        p.data = upd.astype(REAL)
    state.step_count = t
    return params, state
