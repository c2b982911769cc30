"""AdamW with decoupled weight decay and a linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensorcore import Tensor


@dataclass
class ParamGroup:
    lr: float
    weight_decay: float


def linear_decay(step: int, total_steps: int) -> float:
    """Multiplier ``1 - step / total_steps`` (step counted from 0), floored at 0."""
    if total_steps <= 0:
        return 1.0
    return max(0.0, 1.0 - step / total_steps)


class AdamW:
    """Adam with decoupled weight decay.

    ``param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + wd * param)``.
    ``groups`` maps each parameter name to its :class:`ParamGroup`.
    """

    def __init__(self, params: Mapping[str, Tensor], groups: Mapping[str, ParamGroup],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 total_steps: int = 0):
        missing = set(params) - set(groups)
        if missing:
            raise ValueError(f"no parameter group for {sorted(missing)}")
        for name, g in groups.items():
            if g.lr < 0 or g.weight_decay < 0:
                raise ValueError(f"negative lr or weight decay for {name}")
        self.params = dict(params)
        self.groups = dict(groups)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.total_steps = total_steps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_scale(self) -> float:
        return linear_decay(self.t, self.total_steps)

    def step(self) -> float:
        """Apply one update from the stored grads; returns the lr multiplier used."""
        mult = self.current_scale()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = self.groups[name]
            lr = g.lr * mult
            if lr == 0.0:
                continue
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if g.weight_decay:
                upd = upd + g.weight_decay * p.data
            p.data = (p.data - lr * upd).astype(p.data.dtype, copy=False)
        return mult

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
