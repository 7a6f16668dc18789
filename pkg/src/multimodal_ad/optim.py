"""Gradient-descent optimizers over lists of Tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float
    step: int = 0
    # first/second moments, one per parameter (adaptive variant only)
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


class SGD:
    """Plain gradient descent: ``p <- p - lr * grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01):
        self.params = list(params)
        self.state = OptimizerState(lr=lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ValueError(f"parameters {missing} have no gradient; run backward first")
        return [p.grad for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        lr = self.state.lr
        for p, g in zip(self.params, grads):
            p.data = p.data - p.data.dtype.type(lr) * g
        self.state.step += 1


class Adam(SGD):
    """Adaptive first/second-moment descent with bias correction."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        b1, b2 = self.betas
        st = self.state
        st.step += 1
        c1 = 1 - b1 ** st.step
        c2 = 1 - b2 ** st.step
        for i, (p, g) in enumerate(zip(self.params, grads)):
            st.m[i] = b1 * st.m[i] + (1 - b1) * g
            st.v[i] = b2 * st.v[i] + (1 - b2) * g * g
            update = st.lr * (st.m[i] / c1) / (np.sqrt(st.v[i] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float):
    kinds = {"sgd": SGD, "adam": Adam}
    if kind not in kinds:
        raise ValueError(f"unknown optimizer {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](params, lr=lr)


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> list[Tensor]:
    """One plain descent step on `params` using their populated grads."""
    opt = SGD(params, state.lr)
    opt.state = state
    opt.step()
    return list(params)
