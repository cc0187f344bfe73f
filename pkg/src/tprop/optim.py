"""Optimizers with per-parameter learning rates and a cosine schedule.

Parameters are updated in place.  Gradients follow the descent convention:
``theta <- theta - lr * direction``.
"""
from __future__ import annotations

import math
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError, DimensionError

Rate = Union[float, Sequence[float]]


def _expand(value: Rate, count: int, name: str) -> list[float]:
    if np.isscalar(value):
        return [float(value)] * count
    value = [float(v) for v in value]
    if len(value) != count:
        raise ConfigError(f"{name} needs {count} values, got {len(value)}")
    return value


class Optimizer:
    def __init__(self, params: list[np.ndarray], lr: Rate, weight_decay: Rate = 0.0):
        self.params = list(params)
        self.base_lrs = _expand(lr, len(self.params), "lr")
        if any(v < 0 for v in self.base_lrs):
            raise ConfigError(f"learning rates must be >= 0, got {self.base_lrs}")
        self.lrs = list(self.base_lrs)
        self.weight_decay = _expand(weight_decay, len(self.params), "weight_decay")
        self.steps = 0

    def set_lrs(self, lrs: Sequence[float]) -> None:
        self.lrs = _expand(lrs, len(self.params), "lr")

    def _check(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise DimensionError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self._check(grads)
        self.steps += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay[i]:
                g = g + self.weight_decay[i] * p
            p -= (self.lrs[i] * self._direction(i, g)).astype(p.dtype, copy=False)

    def _direction(self, i: int, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    """Heavy-ball momentum: ``v <- mu v + (g + wd theta)``, ``theta <- theta - lr v``."""

    def __init__(self, params, lr: Rate, momentum: float = 0.0, weight_decay: Rate = 0.0):
        super().__init__(params, lr, weight_decay)
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in self.params]

    def _direction(self, i, g):
        if not self.momentum:
            return g
        v = self.velocity[i]
        v *= self.momentum
        v += g
        return v


class Adam(Optimizer):
    """Adam with bias correction; ``eps`` may differ per parameter."""

    def __init__(self, params, lr: Rate, betas=(0.9, 0.999), eps: Rate = 1e-8, weight_decay: Rate = 0.0):
        super().__init__(params, lr, weight_decay)
        b1, b2 = betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {betas}")
        self.betas = (float(b1), float(b2))
        self.eps = _expand(eps, len(self.params), "eps")
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def _direction(self, i, g):
        b1, b2 = self.betas
        m, v = self.m[i], self.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** self.steps)
        v_hat = v / (1 - b2 ** self.steps)
        return m_hat / (np.sqrt(v_hat) + self.eps[i])


def cosine_lr(base_lr: float, epoch: int, t_max: int, eta_min: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` at epoch 0 to ``eta_min`` at ``t_max``, flat afterwards."""
    if t_max <= 0:
        raise ConfigError(f"cosine schedule needs t_max > 0, got {t_max}")
    epoch = min(epoch, t_max)
    return eta_min + 0.5 * (base_lr - eta_min) * (1 + math.cos(math.pi * epoch / t_max))


class CosineSchedule:
    """Sets every learning rate of ``opt`` for a given epoch."""

    def __init__(self, opt: Optimizer, t_max: int, eta_min: float = 0.0):
        if t_max <= 0:
            raise ConfigError(f"cosine schedule needs t_max > 0, got {t_max}")
        self.opt, self.t_max, self.eta_min = opt, t_max, eta_min

    def set_epoch(self, epoch: int) -> None:
        self.opt.set_lrs([cosine_lr(lr, epoch, self.t_max, self.eta_min) for lr in self.opt.base_lrs])


def make_optimizer(kind: str, params, lr: Rate, momentum: float = 0.0, weight_decay: Rate = 0.0,
                   betas=(0.9, 0.999), eps: Rate = 1e-8) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr, momentum, weight_decay)
    if kind == "adam":
        return Adam(params, lr, betas, eps, weight_decay)
    raise ConfigError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adam'")
