"""Difference target propagation: targets and the induced forward update."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bp import GradSet, LossFn
from .errors import ConfigError, StateError
from .net import DIRECT, Network
from .tensor import softmax_ce_grad


@dataclass
class TargetSet:
    """Targets ``t^1..t^N`` (``targets[0]`` is ``None``) tied to one forward pass."""

    targets: list
    beta: float
    token: int
    loss: float


@dataclass
class DtpUpdate:
    """Per-layer parameter directions (gradient convention, apply with ``-lr``)
    and the activation updates ``delta^n = (t^n - s^n) / beta`` for ``n = 1..N``."""

    grads: GradSet
    deltas: list
    layer_losses: list


def compute_targets(net: Network, y: np.ndarray, beta: float, loss_fn: LossFn = softmax_ce_grad) -> TargetSet:
    """Nudge the output against the loss gradient and propagate it down.

    The labels only enter through the output-loss gradient.
    Layer-wise feedback uses ``t^n = s^n + G^n(t^{n+1}) - G^n(s^{n+1})``;
    direct feedback reads ``t^N`` and ``s^N`` for every layer.
    """
    if beta < 0:
        raise ConfigError(f"target step beta must be >= 0, got {beta}")
    acts = net.acts
    n_layers = net.depth
    loss, g = loss_fn(acts[n_layers], y)
    targets: list = [None] * (n_layers + 1)
    targets[n_layers] = acts[n_layers] - beta * g
    for n in range(n_layers - 1, 0, -1):
        net._require_feedback(n)
        fb = net.feedback[n]
        if fb.topology == DIRECT:
            upper, base = targets[n_layers], acts[n_layers]
        else:
            upper, base = targets[n + 1], acts[n + 1]
        targets[n] = acts[n] + (fb.apply(upper) - fb.apply(base))
    return TargetSet(targets, beta, net.cache_token, loss)


def forward_update_direction(net: Network, targets: TargetSet) -> DtpUpdate:
    """Gradient of ``sum_n ||t^n - s^n||^2 / (2 beta)`` with respect to each
    ``theta^{n-1}``, with targets held fixed."""
    if targets.token != net.cache_token:
        raise StateError("targets were computed for a different forward pass")
    if targets.beta <= 0:
        raise ConfigError("forward update needs beta > 0")
    acts = net.acts
    n_layers = net.depth
    grads: GradSet = [None] * n_layers
    deltas: list = [None] * (n_layers + 1)
    losses: list = [None] * (n_layers + 1)
    for n in range(1, n_layers + 1):
        diff = targets.targets[n] - acts[n]
        deltas[n] = diff / targets.beta
        losses[n] = float(np.sum(diff * diff) / (2 * targets.beta))
        grads[n - 1] = net.param_vjp(n - 1, -deltas[n])
    return DtpUpdate(grads, deltas, losses)
