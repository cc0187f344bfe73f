"""Training the feedback weights.

Three reconstruction objectives are available:

* ``ldrl``: local difference reconstruction.  For one layer it pairs a noisy
  input ``s + eps`` with a noisy output ``s' + eta`` and minimises
  ``-eps . (r_eps - s) + 0.5 ||r_eta - s||^2``; in expectation this pulls the
  feedback Jacobian towards the transpose of the forward Jacobian.
* ``vanilla``: ``0.5 ||G(F(s + eps)) - (s + eps)||^2``, an approximate inverse.
* ``drl``: difference reconstruction through all upper layers, pulling the
  feedback towards a pseudo-inverse of the forward map.

Every loss is averaged over the batch.  Feedback maps are linear in their
weights after the elementwise ``phi``, so gradients are closed-form.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, StateError
from .net import DIRECT, FeedbackModule, Network

SCHEMES = ("ldrl", "vanilla", "drl", "none")


def noise_rng(seed: int, batch: int, layer: int, iteration: int) -> np.random.Generator:
    """Independent stream per (seed, batch, layer, iteration); thread-count agnostic."""
    return np.random.default_rng([seed, batch, layer, iteration])


def _gauss(rng: np.random.Generator, sigma: float, like: np.ndarray) -> np.ndarray:
    return (sigma * rng.standard_normal(like.shape)).astype(like.dtype, copy=False)


# ---------------------------------------------------------------------------
# layer-local objectives
# ---------------------------------------------------------------------------

def ldrl_terms(layer, fb: FeedbackModule, s: np.ndarray, s_next: np.ndarray,
               eps: np.ndarray, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Differences ``a_eps, a_eta`` after ``phi`` and reconstructions ``r - s``."""
    base = fb.lift(s_next)
    a_eps = fb.lift(layer.forward(s + eps)[0]) - base
    a_eta = fb.lift(s_next + eta) - base
    return a_eps, a_eta, fb.transform(a_eps), fb.transform(a_eta)


def ldrl_sample_losses(layer, fb: FeedbackModule, s, s_next, eps, eta) -> np.ndarray:
    _, _, d_eps, d_eta = ldrl_terms(layer, fb, s, s_next, eps, eta)
    axes = tuple(range(1, s.ndim))
    return -np.sum(eps * d_eps, axis=axes) + 0.5 * np.sum(d_eta * d_eta, axis=axes)


def ldrl_loss_grad(layer, fb: FeedbackModule, s: np.ndarray, s_next: np.ndarray, sigma: float,
                   rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Batch-mean local reconstruction loss and its weight gradient.

    Only layer-local state enters: the forward module, its feedback module,
    its input ``s`` and output ``s_next``.
    """
    check_sigma(sigma)
    eps = _gauss(rng, sigma, s)
    eta = _gauss(rng, sigma, s_next)
    a_eps, a_eta, d_eps, d_eta = ldrl_terms(layer, fb, s, s_next, eps, eta)
    bsz = s.shape[0]
    loss = (-np.sum(eps * d_eps) + 0.5 * np.sum(d_eta * d_eta)) / bsz
    grad = (fb.weight_grad(a_eta, d_eta) - fb.weight_grad(a_eps, eps)) / bsz
    return float(loss), grad


def vanilla_loss_grad(layer, fb: FeedbackModule, s: np.ndarray, sigma: float,
                      rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Batch-mean ``0.5 ||G(F(s + eps)) - (s + eps)||^2`` and its weight gradient."""
    check_sigma(sigma)
    noisy = s + _gauss(rng, sigma, s)
    a = fb.lift(layer.forward(noisy)[0])
    resid = fb.transform(a) - noisy
    bsz = s.shape[0]
    return float(0.5 * np.sum(resid * resid) / bsz), fb.weight_grad(a, resid) / bsz


# ---------------------------------------------------------------------------
# difference reconstruction through the upper layers
# ---------------------------------------------------------------------------

@dataclass
class _Reconstruction:
    r: np.ndarray
    a: np.ndarray   # phi(input of G^n) - phi(its cached value)
    calls: int


def _reconstruct(net: Network, n: int, top: np.ndarray) -> _Reconstruction:
    """Run the reconstruction loop ``k = N - 1 .. n`` seeded with ``r^N = top``.

    Layer-wise modules use ``r^k = G^k(r^{k+1}) - G^k(s^{k+1}) + s^k``; direct
    modules read the output, ``r^k = G^k(r^N) - G^k(s^N) + s^k``.
    """
    acts = net.acts
    n_layers = net.depth
    r, a = top, None
    for k in range(n_layers - 1, n - 1, -1):
        fb = net.feedback[k]
        upper, base = (top, acts[n_layers]) if fb.topology == DIRECT else (r, acts[k + 1])
        a = fb.lift(upper) - fb.lift(base)
        r = fb.transform(a) + acts[k]
    return _Reconstruction(r, a, n_layers - n)


def drl_loss_grad(net: Network, n: int, sigma: float, rng: np.random.Generator, weight_decay: float = 0.0,
                  eta_term: bool = False, sigma_eta: Optional[float] = None) -> tuple[float, np.ndarray, int]:
    """Reconstruction of ``s^n + eps`` after propagating it to the output.

    Returns the batch-mean loss (with ``weight_decay / 2 * ||w||^2``), the
    gradient for ``w^n`` and the number of feedback applications (``N - n``).
    With ``eta_term`` an extra ``weight_decay * ||r^n_eta - s^n||^2`` is added,
    where ``r^n_eta`` reconstructs a noisy output ``s^N + eta``.
    """
    check_sigma(sigma)
    net._require_feedback(n)
    acts = net.acts
    n_layers = net.depth
    fb = net.feedback[n]
    noisy = acts[n] + _gauss(rng, sigma, acts[n])
    cur = noisy
    for k in range(n, n_layers):
        cur = net.layers[k].forward(cur)[0]
    rec = _reconstruct(net, n, cur)
    resid = rec.r - noisy
    bsz = acts[n].shape[0]
    w = fb.weight
    loss = 0.5 * np.sum(resid * resid) / bsz + 0.5 * weight_decay * np.sum(w * w)
    grad = fb.weight_grad(rec.a, resid) / bsz + weight_decay * w
    if eta_term:
        top = acts[n_layers] + _gauss(rng, sigma if sigma_eta is None else sigma_eta, acts[n_layers])
        rec_eta = _reconstruct(net, n, top)
        d = rec_eta.r - acts[n]
        loss += weight_decay * np.sum(d * d) / bsz
        grad = grad + 2 * weight_decay * fb.weight_grad(rec_eta.a, d) / bsz
    return float(loss), grad, rec.calls


# ---------------------------------------------------------------------------
# single optimizer steps on a forwarded network
# ---------------------------------------------------------------------------

def ldrl_step(net: Network, n: int, sigma: float, optimizer, rng: np.random.Generator) -> float:
    net._require_feedback(n)
    acts = net.acts
    loss, grad = ldrl_loss_grad(net.layers[n], net.feedback[n], acts[n], acts[n + 1], sigma, rng)
    optimizer.step([grad])
    return loss


def vanilla_dtp_step(net: Network, n: int, sigma: float, optimizer, rng: np.random.Generator) -> float:
    net._require_feedback(n)
    loss, grad = vanilla_loss_grad(net.layers[n], net.feedback[n], net.acts[n], sigma, rng)
    optimizer.step([grad])
    return loss


def drl_step(net: Network, n: int, sigma: float, optimizer, rng: np.random.Generator,
             weight_decay: float = 0.0, eta_term: bool = False, sigma_eta: Optional[float] = None) -> float:
    loss, grad, _ = drl_loss_grad(net, n, sigma, rng, weight_decay, eta_term, sigma_eta)
    optimizer.step([grad])
    return loss


# ---------------------------------------------------------------------------
# phase driver
# ---------------------------------------------------------------------------

def _per_layer(value, n_layers: int, name: str) -> list:
    if np.isscalar(value):
        return [value] * (n_layers - 1)
    value = list(value)
    if len(value) != n_layers - 1:
        raise ConfigError(f"{name} needs {n_layers - 1} per-layer values, got {len(value)}")
    return value


def check_sigma(sigma: float) -> None:
    if not sigma > 0:
        raise ConfigError(f"noise amplitude sigma must be > 0, got {sigma}")


def run_feedback_phase(net: Network, scheme: str, iterations, sigma, optimizers: Sequence,
                       batch_index: int = 0, seed: int = 0, weight_decay=0.0,
                       eta_term: bool = False, sigma_eta: Optional[float] = None,
                       threads: int = 1, layers: Optional[Sequence[int]] = None) -> list:
    """Run ``iterations[n]`` feedback steps for every ``G^n`` on the cached batch.

    ``layers`` restricts training to a subset of feedback modules (default all).
    ``optimizers[n]`` updates ``w^n`` from a gradient (``optimizers[0]`` is
    unused).  ``weight_decay`` (scalar or per layer) only enters ``drl``.
    Noise comes from :func:`noise_rng`, so results do not depend on
    ``threads``.  Returns per-layer lists of losses (index 0 is ``None``).
    Layer-local schemes train layers concurrently; ``drl`` trains from the top
    layer down because lower reconstructions read upper feedback weights.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown feedback scheme {scheme!r}; expected {SCHEMES}")
    n_layers = net.depth
    losses: list = [None] + [[] for _ in range(n_layers - 1)]
    if scheme == "none":
        return losses
    if net.feedback is None:
        raise StateError("network has no feedback modules")
    iterations = _per_layer(iterations, n_layers, "iterations")
    sigma = _per_layer(sigma, n_layers, "sigma")
    weight_decay = _per_layer(weight_decay, n_layers, "weight_decay")
    for value in sigma:
        check_sigma(value)
    if scheme == "ldrl" and any(g.topology == DIRECT for g in net.feedback[1:]):
        raise ConfigError("local difference reconstruction needs layer-wise feedback")

    if any(int(k) < 1 for k in iterations):
        raise ConfigError(f"feedback iterations must be >= 1, got {iterations}")

    def train_layer(n: int) -> list:
        out = []
        for i in range(int(iterations[n - 1])):
            rng = noise_rng(seed, batch_index, n, i)
            if scheme == "ldrl":
                out.append(ldrl_step(net, n, sigma[n - 1], optimizers[n], rng))
            elif scheme == "vanilla":
                out.append(vanilla_dtp_step(net, n, sigma[n - 1], optimizers[n], rng))
            else:
                out.append(drl_step(net, n, sigma[n - 1], optimizers[n], rng, weight_decay[n - 1],
                                    eta_term, sigma_eta))
        return out

    if layers is None:
        layers = list(range(n_layers - 1, 0, -1))
    else:
        bad = [n for n in layers if not 1 <= n < n_layers]
        if bad:
            raise ConfigError(f"feedback layers must lie in [1, {n_layers - 1}], got {bad}")
        layers = sorted(set(layers), reverse=True)
    if scheme != "drl" and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for n, out in zip(layers, pool.map(train_layer, layers)):
                losses[n] = out
    else:
        for n in layers:
            losses[n] = train_layer(n)
    return losses
