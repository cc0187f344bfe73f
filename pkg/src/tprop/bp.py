"""Exact backpropagation and a finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .net import Network
from .tensor import softmax_ce_grad

LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]
GradSet = list[dict[str, np.ndarray]]


def backprop(net: Network, x: np.ndarray, y: np.ndarray, loss_fn: LossFn = softmax_ce_grad
             ) -> tuple[float, GradSet, list]:
    """Loss, per-layer parameter gradients and activation updates.

    ``deltas[n]`` is ``delta^n_BP = -dL/ds^n`` for ``n = 1..N`` (``deltas[0]``
    is ``None``; the input needs no error signal).
    """
    out = net.forward(x)
    loss, g = loss_fn(out, y)
    n_layers = net.depth
    deltas: list = [None] * (n_layers + 1)
    grads: GradSet = [None] * n_layers
    deltas[n_layers] = -g
    for n in range(n_layers - 1, -1, -1):
        grads[n] = net.param_vjp(n, -deltas[n + 1])
        if n > 0:
            deltas[n] = net.jacobian_T_vjp(n, deltas[n + 1])
    return loss, grads, deltas


def loss_value(net: Network, x: np.ndarray, y: np.ndarray, loss_fn: LossFn = softmax_ce_grad) -> float:
    return loss_fn(net.forward(x), y)[0]


def _tail(net: Network, start: int, s: np.ndarray, y: np.ndarray, loss_fn: LossFn) -> tuple[float, list]:
    """Loss from layer ``start`` upwards plus the max-pool routing it used."""
    routing = []
    for layer in net.layers[start:]:
        s, ctx = layer.forward(s)
        if hasattr(ctx, "idx"):
            routing.append(ctx.idx.flat)
    return loss_fn(s, y)[0], routing


def _same_routing(a: list, b: list) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


@dataclass
class FdReport:
    max_rel_error: float
    mean_rel_error: float
    worst: tuple[int, str, tuple[int, ...]]
    n_coords: int
    tol: float
    kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        layer, name, idx = self.worst
        status = "ok" if self.passed else "FAILED"
        return (f"fd_check {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}) at "
                f"layer {layer} {name}{list(idx)}, mean {self.mean_rel_error:.3e} over {self.n_coords} coords"
                f", {self.kinks} skipped at pooling kinks")


def fd_check(net: Network, x: np.ndarray, y: np.ndarray, step: float = 1e-5, tol: float = 1e-4,
             max_coords: int = 1000, seed: int = 0, floor: float = 1e-7,
             loss_fn: LossFn = softmax_ce_grad, refinements: int = 3) -> FdReport:
    """Compare backprop gradients with central differences.

    Each parameter array contributes at most ``max_coords`` coordinates,
    chosen by a seeded RNG.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    A stencil whose two ends pick different max-pool winners straddles a point
    where the loss is not differentiable; it is retried with the step divided
    by 10 up to ``refinements`` times and otherwise counted in ``kinks``
    instead of ``n_coords``.  The network parameters are restored afterwards.
    """
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    if net.dtype != np.float64:
        raise ConfigError("fd_check requires a float64 network")
    _, grads, _ = backprop(net, x, y, loss_fn)
    acts = net.acts
    rng = np.random.default_rng(seed)
    errors, worst, worst_err, kinks = [], (0, "", ()), -1.0, 0
    for n, params in enumerate(net.forward_params()):
        _, base = _tail(net, n, acts[n], y, loss_fn)
        for name, p in params.items():
            flat = p.reshape(-1)
            picks = np.arange(flat.size)
            if flat.size > max_coords:
                picks = np.sort(rng.choice(flat.size, max_coords, replace=False))
            analytic = grads[n][name].reshape(-1)
            for i in picks:
                old, h, numeric = flat[i], step, None
                for _ in range(refinements + 1):
                    flat[i] = old + h
                    fp, rp = _tail(net, n, acts[n], y, loss_fn)
                    flat[i] = old - h
                    fm, rm = _tail(net, n, acts[n], y, loss_fn)
                    flat[i] = old
                    if _same_routing(rp, base) and _same_routing(rm, base):
                        numeric = (fp - fm) / (2 * h)
                        break
                    h /= 10
                if numeric is None:
                    kinks += 1
                    continue
                err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
                errors.append(err)
                if err > worst_err:
                    worst_err, worst = err, (n, name, np.unravel_index(i, p.shape))
    net.invalidate()
    worst = (worst[0], worst[1], tuple(int(v) for v in worst[2]))
    if not errors:
        raise ConfigError("fd_check: every sampled coordinate sits at a pooling kink")
    return FdReport(float(max(errors)), float(np.mean(errors)), worst, len(errors), tol, kinks)
