"""Single-batch alignment experiments: Jacobian matching of trained feedback,
gradient matching under several feedback initializations, and the Monte-Carlo
check of the local reconstruction loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .diagnostics import AngleReport, LimitTable, gmp_probe, jmc_probe, noise_limit_harness, random_linear_pair
from .errors import ConfigError
from .feedback_train import run_feedback_phase
from .net import DIRECT, LAYERWISE, Network, build_network, lenet
from .optim import make_optimizer

Rate = Union[float, list[float]]

GMP_SCHEMES = ("direct_random", "layerwise_random", "drl", "ldrl", "symmetric")


@dataclass
class ProbeRunSection:
    seed: int = 0
    dtype: str = "float32"
    threads: int = 1


@dataclass
class ProbeModelSection:
    channels: list[int] = field(default_factory=lambda: [8, 16])
    fc: int = 64
    layers: list[str] = field(default_factory=list)
    activation: str = "elu"
    init: str = "kaiming_uniform"
    input_shape: list[int] = field(default_factory=lambda: [3, 32, 32])
    classes: int = 10
    batch_size: int = 64

    def build(self, topology: str, seed: int, dtype) -> Network:
        arch = list(self.layers) if self.layers else lenet(tuple(self.channels), self.fc, self.classes)
        return build_network(tuple(self.input_shape), arch, self.activation, topology, seed, dtype, self.init)


@dataclass
class ProbeFeedbackSection:
    scheme: str = "ldrl"
    topology: str = ""
    optimizer: str = "sgd"
    lr: Rate = 0.05
    momentum: float = 0.9
    weight_decay: Rate = 0.0
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: Rate = 1e-8
    sigma: Rate = 0.1
    iterations: int = 5000
    layers: list[int] = field(default_factory=list)
    eta_term: bool = False
    sigma_eta: float = 0.0


@dataclass
class ProbeSection:
    every: int = 1
    num_probes: int = 16


@dataclass
class JmcConfig:
    run: ProbeRunSection = field(default_factory=ProbeRunSection)
    model: ProbeModelSection = field(default_factory=ProbeModelSection)
    feedback: ProbeFeedbackSection = field(default_factory=ProbeFeedbackSection)
    probe: ProbeSection = field(default_factory=ProbeSection)

    def validate(self) -> None:
        _check_common(self.run, self.model, self.feedback)
        if self.feedback.scheme not in ("ldrl", "drl"):
            raise ConfigError(f"feedback.scheme: {self.feedback.scheme!r} is not 'ldrl' or 'drl'")
        if self.feedback.iterations < 0:
            raise ConfigError("feedback.iterations: must be >= 0")
        if self.probe.every < 1:
            raise ConfigError("probe.every: must be >= 1")

    @property
    def topology(self) -> str:
        return self.feedback.topology or (LAYERWISE if self.feedback.scheme == "ldrl" else DIRECT)


@dataclass
class GmpTargetSection:
    beta: float = 1e-3


@dataclass
class GmpConfig:
    run: ProbeRunSection = field(default_factory=lambda: ProbeRunSection(dtype="float64"))
    model: ProbeModelSection = field(default_factory=ProbeModelSection)
    feedback: ProbeFeedbackSection = field(default_factory=lambda: ProbeFeedbackSection(iterations=1000))
    targets: GmpTargetSection = field(default_factory=GmpTargetSection)
    schemes: list[str] = field(default_factory=lambda: list(GMP_SCHEMES))

    def validate(self) -> None:
        _check_common(self.run, self.model, self.feedback)
        if self.feedback.iterations < 0:
            raise ConfigError("feedback.iterations: must be >= 0")
        if not self.targets.beta > 0:
            raise ConfigError("targets.beta: must be > 0")
        unknown = [s for s in self.schemes if s not in GMP_SCHEMES]
        if unknown:
            raise ConfigError(f"schemes: unknown {unknown}; expected a subset of {GMP_SCHEMES}")


def _check_common(run: ProbeRunSection, model: ProbeModelSection, fb: ProbeFeedbackSection) -> None:
    if run.dtype not in ("float32", "float64"):
        raise ConfigError(f"run.dtype: {run.dtype!r} is not float32 or float64")
    if run.threads < 1:
        raise ConfigError("run.threads: must be >= 1")
    if model.batch_size < 1:
        raise ConfigError("model.batch_size: must be >= 1")
    if fb.topology not in ("", LAYERWISE, DIRECT):
        raise ConfigError(f"feedback.topology: {fb.topology!r} is not layerwise or direct")


def probe_batch(model: ProbeModelSection, seed: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """The single random input batch and labels every probe experiment uses."""
    rng = np.random.default_rng([seed, 5])
    x = rng.standard_normal((model.batch_size, *model.input_shape)).astype(dtype)
    return x, rng.integers(0, model.classes, model.batch_size)


def _per_layer(value, count: int, name: str) -> list:
    if isinstance(value, list):
        if len(value) != count:
            raise ConfigError(f"{name}: needs {count} per-layer values, got {len(value)}")
        return value
    return [value] * count


def _feedback_optimizers(net: Network, fb: ProbeFeedbackSection, decay_in_loss: bool) -> tuple[list, list]:
    count = net.depth - 1
    lrs = _per_layer(fb.lr, count, "feedback.lr")
    eps = _per_layer(fb.eps, count, "feedback.eps")
    wds = _per_layer(fb.weight_decay, count, "feedback.weight_decay")
    opts = [None]
    for n in range(1, net.depth):
        wd = 0.0 if decay_in_loss else wds[n - 1]
        opts.append(make_optimizer(fb.optimizer, [net.feedback[n].weight], lrs[n - 1], fb.momentum, wd,
                                   tuple(fb.betas), eps[n - 1]))
    return opts, (wds if decay_in_loss else [0.0] * count)


def train_feedback(net: Network, scheme: str, fb: ProbeFeedbackSection, seed: int, threads: int = 1,
                   on_step=None) -> None:
    """Train the feedback weights of ``net`` on its cached batch for ``fb.iterations`` rounds.

    Each round is one step per selected layer with noise stream ``round``.
    ``on_step(round)`` is called after every round.
    """
    opts, decay = _feedback_optimizers(net, fb, scheme == "drl")
    sigma = _per_layer(fb.sigma, net.depth - 1, "feedback.sigma")
    layers = fb.layers or None
    for i in range(fb.iterations):
        run_feedback_phase(net, scheme, 1, sigma, opts, i, seed, decay, fb.eta_term, fb.sigma_eta or None,
                           threads, layers)
        if on_step is not None:
            on_step(i + 1)


def run_jmc(cfg: JmcConfig, sink=None) -> list[AngleReport]:
    """Freeze random forward weights, train feedback on one batch and track the
    Jacobian angle of each probed layer.  Returns the final reports."""
    cfg.validate()
    dtype = np.dtype(cfg.run.dtype)
    net = cfg.model.build(cfg.topology, cfg.run.seed, dtype)
    x, _ = probe_batch(cfg.model, cfg.run.seed, dtype)
    net.forward(x)
    if cfg.topology == DIRECT:
        probed = [net.depth - 1]
    else:
        probed = sorted(cfg.feedback.layers) if cfg.feedback.layers else list(range(1, net.depth))
    last: list[AngleReport] = []

    def probe(step: int) -> None:
        nonlocal last
        last = [jmc_probe(net, n, cfg.probe.num_probes, np.random.default_rng([cfg.run.seed, 7, step]),
                          step=step) for n in probed]
        if sink is not None:
            for r in last:
                sink.emit("jmc", 0, step, r.layer, "angle", r.angle_degrees)
                sink.emit("jmc", 0, step, r.layer, "distance", r.relative_distance)

    probe(0)

    def on_step(step: int) -> None:
        if step % cfg.probe.every == 0 or step == cfg.feedback.iterations:
            probe(step)

    train_feedback(net, cfg.feedback.scheme, cfg.feedback, cfg.run.seed, cfg.run.threads, on_step)
    return last


def run_gmp(cfg: GmpConfig, sink=None) -> dict[str, list[AngleReport]]:
    """Angles between target-propagation updates and backprop gradients for
    each feedback initialization scheme, all on the same weights and batch."""
    cfg.validate()
    dtype = np.dtype(cfg.run.dtype)
    x, y = probe_batch(cfg.model, cfg.run.seed, dtype)
    out = {}
    for scheme in cfg.schemes:
        topology = DIRECT if scheme in ("direct_random", "drl") else LAYERWISE
        net = cfg.model.build(topology, cfg.run.seed, dtype)
        if scheme == "symmetric":
            net.set_symmetric_feedback()
        elif scheme in ("drl", "ldrl"):
            net.forward(x)
            train_feedback(net, scheme, cfg.feedback, cfg.run.seed, cfg.run.threads)
        reports = gmp_probe(net, x, y, cfg.targets.beta)
        out[scheme] = reports
        if sink is not None:
            for r in reports:
                sink.emit("gmp", 0, 0, r.layer, f"angle/{scheme}", r.angle_degrees)
    return out


def format_gmp(results: dict[str, list[AngleReport]]) -> str:
    depth = max(len(r) for r in results.values())
    lines = [f"{'scheme':<18}" + "".join(f"{'layer ' + str(n):>10}" for n in range(depth))]
    for scheme, reports in results.items():
        lines.append(f"{scheme:<18}" + "".join(f"{r.angle_degrees:>10.2f}" for r in reports))
    return "\n".join(lines)


def run_noise_limit(pairs: int = 5, max_dim: int = 8, sigmas: Sequence[float] = (1e-1, 1e-2, 1e-3),
                    samples: int = 20000, seed: int = 0) -> list[tuple[tuple[int, int], LimitTable]]:
    """Monte-Carlo tables for ``pairs`` random linear (forward, feedback) pairs
    with dimensions drawn from ``[2, max_dim]``; the first pair is ``max_dim`` square."""
    if pairs < 1 or max_dim < 1:
        raise ConfigError(f"pairs and max_dim must be >= 1, got {pairs}, {max_dim}")
    rng = np.random.default_rng([seed, 6])
    out = []
    for i in range(pairs):
        dims = (max_dim, max_dim) if i == 0 else tuple(int(d) for d in rng.integers(min(2, max_dim), max_dim + 1, 2))
        w, m = random_linear_pair(dims[0], dims[1], rng)
        out.append((dims, noise_limit_harness(w, m, sigmas, samples, seed=seed + i)))
    return out


def noise_limit_verdict(tables: list[tuple[tuple[int, int], LimitTable]]) -> Optional[bool]:
    """``True``/``False`` when every table could be checked, ``None`` if any check was skipped."""
    results = [t.passed() for _, t in tables]
    if any(r is None for r in results):
        return None
    return all(results)
