from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.param_name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: ParamSet) -> None:
    """One AdamW update (bias-corrected moments, decoupled decay), then zero grads.

    Frozen parameters are skipped entirely. Any NaN/Inf gradient aborts the
    step before a single value is written.
    """
    live = params.trainable()
    for p in live:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(p.name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in live:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(g)
            state.v[p.name] = np.zeros_like(g)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        params.replace_data(p.name, p.data - state.lr * update)
    params.zero_grad()
