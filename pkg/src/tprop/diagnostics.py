"""Alignment measurements: Frobenius angles, Jacobian matching, gradient
matching, and a Monte-Carlo check of the local reconstruction loss limit."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bp import LossFn, backprop
from .errors import ConfigError, DimensionError
from .feedback_train import ldrl_sample_losses
from .net import DIRECT, FCLayer, LinearFeedback, Network
from .targetprop import compute_targets, forward_update_direction
from .tensor import softmax_ce_grad


def frobenius_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in degrees between two same-shaped tensors under the Frobenius product.

    Two zero tensors have angle 0; a zero tensor against a nonzero one is
    treated as orthogonal (90).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"angle between tensors of shape {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return 90.0
    # stable near 0 and 180, unlike arccos of the cosine
    ua, ub = a / na, b / nb
    return math.degrees(2.0 * math.atan2(np.linalg.norm(ua - ub), np.linalg.norm(ua + ub)))


def relative_distance(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / ||a||`` in the Frobenius norm; ``a`` is the reference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"distance between tensors of shape {a.shape} and {b.shape}")
    na = np.linalg.norm(a)
    if na == 0:
        raise ValueError("relative distance needs a nonzero reference tensor")
    return float(np.linalg.norm(a - b) / na)


@dataclass
class AngleReport:
    layer: int
    angle_degrees: float
    relative_distance: float
    context: str
    step: int = 0


# ---------------------------------------------------------------------------
# Jacobian matching
# ---------------------------------------------------------------------------

def jmc_probe(net: Network, n: int, num_probes: int = 64, rng: Optional[np.random.Generator] = None,
              method: str = "auto", step: int = 0) -> AngleReport:
    """Compare the transpose Jacobian of ``F^n`` with the Jacobian of ``G^n``.

    ``method="matrix"`` compares ``theta^T`` with ``w`` directly (dense layers);
    ``method="probe"`` stacks the responses of both maps to ``num_probes``
    Gaussian directions shaped like the cached ``s^{n+1}``.  ``"auto"`` uses the
    matrix form for dense layers and probes otherwise.
    """
    if num_probes < 1:
        raise ConfigError(f"num_probes must be >= 1, got {num_probes}")
    net._require_feedback(n)
    layer, fb = net.layers[n], net.feedback[n]
    if fb.topology == DIRECT and n != net.depth - 1:
        raise ConfigError(f"direct feedback G^{n} reads the output; its Jacobian has no "
                          f"counterpart in layer {n}")
    if method == "auto":
        method = "matrix" if isinstance(layer, FCLayer) and isinstance(fb, LinearFeedback) else "probe"
    if method == "matrix":
        if not (isinstance(layer, FCLayer) and isinstance(fb, LinearFeedback)):
            raise ConfigError("matrix comparison needs a dense layer with a dense feedback matrix")
        ref, est = layer.weight.T, fb.w
    elif method == "probe":
        rng = np.random.default_rng(0) if rng is None else rng
        out = net.acts[n + 1]
        refs, ests = [], []
        for _ in range(num_probes):
            v = rng.standard_normal(out.shape).astype(out.dtype)
            refs.append(net.jacobian_T_vjp(n, v).astype(np.float64).ravel())
            ests.append(net.feedback_jvp(n, v).astype(np.float64).ravel())
        ref, est = np.concatenate(refs), np.concatenate(ests)
    else:
        raise ConfigError(f"unknown jmc method {method!r}")
    return AngleReport(n, frobenius_angle(ref, est), relative_distance(ref, est), "jmc", step)


# ---------------------------------------------------------------------------
# gradient matching
# ---------------------------------------------------------------------------

def gmp_probe(net: Network, x: np.ndarray, y: np.ndarray, beta: float,
              loss_fn: LossFn = softmax_ce_grad, step: int = 0) -> list[AngleReport]:
    """Per-layer angle between the target-propagation update and the backprop
    gradient of the weights (biases excluded).  ``net`` is left untouched."""
    work = net.copy()
    work.forward(x)
    update = forward_update_direction(work, compute_targets(work, y, beta, loss_fn))
    _, grads, _ = backprop(work, x, y, loss_fn)
    reports = []
    for n in range(work.depth):
        bp_dir, dtp_dir = grads[n]["weight"], update.grads[n]["weight"]
        reports.append(AngleReport(n, frobenius_angle(bp_dir, dtp_dir),
                                   relative_distance(bp_dir, dtp_dir) if np.any(bp_dir) else float("nan"),
                                   "gmp", step))
    return reports


# ---------------------------------------------------------------------------
# Monte-Carlo check of the small-noise limit
# ---------------------------------------------------------------------------

def ldrl_closed_form(w: np.ndarray, m: np.ndarray) -> float:
    """``-<W^T, M>_F + 0.5 ||M||_F^2``: the small-noise limit of the scaled loss."""
    w = np.asarray(w, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    return float(-np.sum(w.T * m) + 0.5 * np.sum(m * m))


@dataclass
class LimitRow:
    sigma: float
    estimate: float
    std_error: float
    closed_form: float

    @property
    def abs_error(self) -> float:
        return abs(self.estimate - self.closed_form)


@dataclass
class LimitTable:
    rows: list[LimitRow]
    samples: int
    warnings: list[str] = field(default_factory=list)

    def within_se(self, k: float = 3.0) -> Optional[bool]:
        """Is the smallest-sigma estimate within ``k`` standard errors?  ``None`` if SE is undefined."""
        row = min(self.rows, key=lambda r: r.sigma)
        if not math.isfinite(row.std_error):
            return None
        return row.abs_error <= k * row.std_error

    def monotone(self, rel_tol: float = 1e-9) -> bool:
        """Errors do not grow as sigma shrinks (up to rounding, ``rel_tol`` of the limit's scale)."""
        rows = sorted(self.rows, key=lambda r: -r.sigma)
        slack = rel_tol * (1 + abs(rows[0].closed_form))
        return all(b.abs_error <= a.abs_error + slack for a, b in zip(rows, rows[1:]))

    def passed(self) -> Optional[bool]:
        ok = self.within_se()
        return None if ok is None else ok and self.monotone()

    def format(self) -> str:
        lines = [f"{'sigma':>10} {'estimate':>14} {'std err':>11} {'closed form':>14} {'abs error':>11}"]
        for r in self.rows:
            lines.append(f"{r.sigma:>10.1e} {r.estimate:>14.6f} {r.std_error:>11.3e} "
                         f"{r.closed_form:>14.6f} {r.abs_error:>11.3e}")
        return "\n".join(lines + self.warnings)


def random_linear_pair(d_out: int, d_in: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Forward matrix ``W`` (``d_out x d_in``) and feedback matrix ``M`` (``d_in x d_out``)."""
    return rng.standard_normal((d_out, d_in)), rng.standard_normal((d_in, d_out))


def noise_limit_harness(w: np.ndarray, m: np.ndarray, sigmas: Sequence[float], samples: int,
                        seed: int = 0, chunk: int = 20000) -> LimitTable:
    """Monte-Carlo mean of the local reconstruction loss divided by ``sigma^2``.

    The same standard-normal draws are reused for every sigma, so the table
    isolates the effect of the noise scale from sampling noise.  Each sample
    is one batch row of a linear layer ``s -> W s`` with feedback ``u -> M u``.
    """
    if samples < 1:
        raise ConfigError(f"samples must be >= 1, got {samples}")
    for s in sigmas:
        if not s > 0:
            raise ConfigError(f"sigma must be > 0, got {s}")
    w = np.asarray(w, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    d_out, d_in = w.shape
    if m.shape != (d_in, d_out):
        raise DimensionError(f"feedback {m.shape} does not match forward {w.shape}")
    layer = FCLayer(w, np.zeros(d_out), "linear", (d_in,), final=True)
    fb = LinearFeedback(m, (d_out,), (d_in,))
    closed = ldrl_closed_form(w, m)
    rows = []
    for sigma in sigmas:
        rng = np.random.default_rng(seed)
        values = []
        for start in range(0, samples, chunk):
            b = min(chunk, samples - start)
            s = rng.standard_normal((b, d_in))
            z_eps = rng.standard_normal((b, d_in))
            z_eta = rng.standard_normal((b, d_out))
            losses = ldrl_sample_losses(layer, fb, s, layer.forward(s)[0], sigma * z_eps, sigma * z_eta)
            values.append(losses / sigma ** 2)
        values = np.concatenate(values)
        se = float(values.std(ddof=1) / math.sqrt(samples)) if samples > 1 else float("nan")
        rows.append(LimitRow(float(sigma), float(values.mean()), se, closed))
    table = LimitTable(rows, samples)
    if samples < 2:
        table.warnings.append("warning: fewer than two samples, standard error undefined; check skipped")
    return table
