from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .graph import Node, backprop
from .params import Parameter, ParamSet


class NondeterministicLoss(RuntimeError):
    pass


def _loss_value(build: Callable[[], Node]) -> float:
    loss = build()
    if loss.data.size != 1:
        raise ValueError(f"loss builder must return a scalar, got shape {loss.shape}")
    return float(loss.data.reshape(()))


def _set(p: Parameter, data: np.ndarray) -> None:
    p.node = Node(data, p.trainable)


def finite_diff_check(build_loss: Callable[[], Node], params: ParamSet | Iterable[Parameter],
                      epsilon: float = 1e-5) -> float:
    """Max relative error between backprop gradients and central differences.

    ``build_loss`` must rebuild the scalar loss from the *current* parameter
    nodes each call. Relative error per entry is
    ``|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    plist = [p for p in (params if not isinstance(params, ParamSet) else list(params)) if p.trainable]
    for p in plist:
        p.node.zero_grad()
    first = _loss_value(build_loss)
    if _loss_value(build_loss) != first:
        raise NondeterministicLoss("two evaluations at identical parameters differ")

    loss = build_loss()
    backprop(loss)
    analytic = {id(p): p.grad.copy() for p in plist}

    worst = 0.0
    for p in plist:
        base = p.data.copy()
        ga = analytic[id(p)].reshape(-1)
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + epsilon
            _set(p, bumped.reshape(base.shape))
            up = _loss_value(build_loss)
            bumped[i] = flat[i] - epsilon
            _set(p, bumped.reshape(base.shape))
            down = _loss_value(build_loss)
            g_fd = (up - down) / (2.0 * epsilon)
            err = abs(ga[i] - g_fd) / max(1e-8, abs(ga[i]) + abs(g_fd))
            worst = max(worst, err)
        _set(p, base)
    return worst
