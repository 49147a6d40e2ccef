"""Layer helpers and first-order optimizers on top of :mod:`vpp.autodiff`."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ParameterStore, Tensor


def add_dense(store: ParameterStore, rng: np.random.Generator, name: str, fan_in: int,
              fan_out: int, stack: int | None = None) -> None:
    """Register ``name.W`` / ``name.b``; ``stack`` adds a leading per-agent axis."""
    if stack is None:
        store.add(f"{name}.W", ad.glorot_uniform(rng, fan_in, fan_out))
        store.add(f"{name}.b", np.zeros(fan_out))
    else:
        store.add(f"{name}.W", ad.glorot_uniform(rng, fan_in, fan_out, (stack, fan_in, fan_out)))
        store.add(f"{name}.b", np.zeros((stack, 1, fan_out)))


def dense(x: Tensor, store: ParameterStore, name: str, act=None) -> Tensor:
    y = ad.matmul(x, store[f"{name}.W"]) + store[f"{name}.b"]
    return act(y) if act is not None else y


def stacked_dense(x: Tensor, weights, act=None) -> Tensor:
    """Per-agent dense layer: ``x`` is (N, B, in), ``W`` is (N, in, out)."""
    W, b = weights
    y = ad.matmul(x, W) + b
    return act(y) if act is not None else y


class SGD:
    def __init__(self, params, lr: float = 0.01):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params: list[Parameter], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
