"""Training loops: target propagation with per-batch feedback training,
the scheduled DDTP variants, and plain backprop."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .bp import backprop
from .data import Dataset, augment, iterate_batches, load_dataset, synthetic_classification
from .errors import ConfigError
from .feedback_train import SCHEMES, run_feedback_phase
from .net import DIRECT, LAYERWISE, Network, build_network, lenet
from .optim import CosineSchedule, Optimizer, make_optimizer
from .targetprop import compute_targets, forward_update_direction
from .tensor import softmax_ce_grad

ALGORITHMS = ("dtp_ldrl", "dtp_vanilla", "ddtp_p", "ddtp_s", "bp")
DEFAULT_SCHEME = {"dtp_ldrl": "ldrl", "dtp_vanilla": "vanilla", "ddtp_p": "drl", "ddtp_s": "drl"}
DEFAULT_TOPOLOGY = {"dtp_ldrl": LAYERWISE, "dtp_vanilla": LAYERWISE, "ddtp_p": DIRECT, "ddtp_s": DIRECT}

Rate = Union[float, list[float]]


@dataclass
class RunSection:
    algorithm: str = "dtp_ldrl"
    seed: int = 1
    epochs: int = 40
    batch_size: int = 107
    eval_batch_size: int = 1000
    dtype: str = "float32"
    threads: int = 1


@dataclass
class DataSection:
    dataset: str = "mnist"
    root: str = ""
    augment: bool = False
    train_limit: int = 0
    test_limit: int = 0
    synthetic_size: int = 1024
    synthetic_shape: list[int] = field(default_factory=lambda: [1, 28, 28])
    synthetic_classes: int = 10


@dataclass
class ModelSection:
    channels: list[int] = field(default_factory=lambda: [32, 64])
    fc: int = 512
    layers: list[str] = field(default_factory=list)
    activation: str = "elu"
    init: str = "kaiming_uniform"
    topology: str = ""

    def architecture(self, classes: int) -> list[str]:
        return list(self.layers) if self.layers else lenet(tuple(self.channels), self.fc, classes)


@dataclass
class OptimSection:
    optimizer: str = "sgd"
    lr: Rate = 0.01
    momentum: float = 0.9
    weight_decay: Rate = 0.0
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: Rate = 1e-8


@dataclass
class FeedbackSection(OptimSection):
    scheme: str = ""
    sigma: Rate = 0.1
    iterations: Union[int, list[int]] = 1
    eta_term: bool = False
    sigma_eta: float = 0.0
    pretrain_epochs: Optional[int] = None
    extra_epochs: Optional[int] = None


@dataclass
class TargetSection:
    beta: float = 0.4768550374762699


@dataclass
class SchedulerSection:
    kind: str = "cosine"
    eta_min: float = 1e-5
    t_max: int = 85


@dataclass
class TrainConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    targets: TargetSection = field(default_factory=TargetSection)
    forward: OptimSection = field(default_factory=OptimSection)
    feedback: FeedbackSection = field(default_factory=FeedbackSection)
    scheduler: SchedulerSection = field(default_factory=SchedulerSection)

    @property
    def algorithm(self) -> str:
        return self.run.algorithm

    @property
    def scheme(self) -> Optional[str]:
        if self.algorithm == "bp":
            return None
        return self.feedback.scheme or DEFAULT_SCHEME[self.algorithm]

    @property
    def topology(self) -> Optional[str]:
        if self.algorithm == "bp":
            return None
        return self.model.topology or DEFAULT_TOPOLOGY[self.algorithm]

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"run.algorithm: {self.algorithm!r} is not one of {ALGORITHMS}")
        for name in ("epochs", "batch_size", "eval_batch_size", "threads"):
            if getattr(self.run, name) < (0 if name == "epochs" else 1):
                raise ConfigError(f"run.{name}: invalid value {getattr(self.run, name)}")
        if self.run.dtype not in ("float32", "float64"):
            raise ConfigError(f"run.dtype: expected float32 or float64, got {self.run.dtype!r}")
        if self.scheme is not None and self.scheme not in SCHEMES:
            raise ConfigError(f"feedback.scheme: {self.scheme!r} is not one of {SCHEMES}")
        if self.topology is not None and self.topology not in (LAYERWISE, DIRECT):
            raise ConfigError(f"model.topology: {self.topology!r} is not 'layerwise' or 'direct'")
        if self.algorithm != "bp" and not self.targets.beta > 0:
            raise ConfigError(f"targets.beta: must be > 0, got {self.targets.beta}")
        if self.algorithm == "ddtp_s":
            for name in ("pretrain_epochs", "extra_epochs"):
                value = getattr(self.feedback, name)
                if value is None or value < 0:
                    raise ConfigError(f"feedback.{name}: required (>= 0) for ddtp_s")
        if self.scheduler.kind not in ("cosine", "none"):
            raise ConfigError(f"scheduler.kind: {self.scheduler.kind!r} is not 'cosine' or 'none'")
        if self.scheduler.kind == "cosine" and self.scheduler.t_max < 1:
            raise ConfigError("scheduler.t_max: must be >= 1")
        if self.data.dataset not in ("mnist", "fmnist", "cifar10", "synthetic"):
            raise ConfigError(f"data.dataset: unknown dataset {self.data.dataset!r}")


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float
    batches: int
    seconds: float
    feedback_loss: list = field(default_factory=list)


def _per_layer(value, count: int, name: str) -> list:
    if isinstance(value, list):
        if len(value) != count:
            raise ConfigError(f"{name}: needs {count} per-layer values, got {len(value)}")
        return value
    return [value] * count


class Trainer:
    """Owns a network, its optimizers and the counters that drive RNG streams."""

    def __init__(self, cfg: TrainConfig, input_shape: tuple[int, ...], classes: int, sink=None):
        cfg.validate()
        self.cfg = cfg
        self.sink = sink
        dtype = np.dtype(cfg.run.dtype)
        self.net: Network = build_network(input_shape, cfg.model.architecture(classes), cfg.model.activation,
                                          cfg.topology, cfg.run.seed, dtype, cfg.model.init)
        n_layers = self.net.depth
        fw = cfg.forward
        lrs = _per_layer(fw.lr, n_layers, "forward.lr")
        eps = _per_layer(fw.eps, n_layers, "forward.eps")
        wds = _per_layer(fw.weight_decay, n_layers, "forward.weight_decay")
        params, p_lr, p_eps, p_wd = [], [], [], []
        for n, layer_params in enumerate(self.net.forward_params()):
            for p in layer_params.values():
                params.append(p)
                p_lr.append(lrs[n])
                p_eps.append(eps[n])
                p_wd.append(wds[n])
        self.forward_opt: Optimizer = make_optimizer(fw.optimizer, params, p_lr, fw.momentum, p_wd,
                                                     tuple(fw.betas), p_eps)
        self.schedule = (CosineSchedule(self.forward_opt, cfg.scheduler.t_max, cfg.scheduler.eta_min)
                         if cfg.scheduler.kind == "cosine" else None)
        self.feedback_opts: list = [None]
        if cfg.scheme is not None:
            fb = cfg.feedback
            self.sigma = _per_layer(fb.sigma, n_layers - 1, "feedback.sigma")
            self.iterations = _per_layer(fb.iterations, n_layers - 1, "feedback.iterations")
            fb_lr = _per_layer(fb.lr, n_layers - 1, "feedback.lr")
            fb_eps = _per_layer(fb.eps, n_layers - 1, "feedback.eps")
            fb_wd = _per_layer(fb.weight_decay, n_layers - 1, "feedback.weight_decay")
            # difference reconstruction carries its decay inside the loss
            self.drl_lambda = fb_wd if cfg.scheme == "drl" else [0.0] * (n_layers - 1)
            for n in range(1, n_layers):
                wd = 0.0 if cfg.scheme == "drl" else fb_wd[n - 1]
                self.feedback_opts.append(make_optimizer(fb.optimizer, [self.net.feedback[n].weight], fb_lr[n - 1],
                                                         fb.momentum, wd, tuple(fb.betas), fb_eps[n - 1]))
        self.batch_counter = 0
        self.data_pass = 0
        self.feedback_epochs = 0
        self.forward_epochs = 0

    # -- single batches -------------------------------------------------------

    def _prepare(self, x: np.ndarray, batch: int) -> np.ndarray:
        if self.cfg.data.augment:
            x = augment(x, np.random.default_rng([self.cfg.run.seed, 4, self.data_pass, batch]))
        return x.astype(self.net.dtype, copy=False)

    def _feedback_phase(self) -> list:
        cfg = self.cfg
        return run_feedback_phase(self.net, cfg.scheme, self.iterations, self.sigma, self.feedback_opts,
                                  self.batch_counter, cfg.run.seed, self.drl_lambda, cfg.feedback.eta_term,
                                  cfg.feedback.sigma_eta or None, cfg.run.threads)

    def train_step(self, x: np.ndarray, y: np.ndarray) -> tuple[float, int, list]:
        """One batch: feedback phase, targets, forward step.  Returns loss, correct count, feedback losses."""
        logits = self.net.forward(x)
        fb_losses = self._feedback_phase()
        targets = compute_targets(self.net, y, self.cfg.targets.beta)
        update = forward_update_direction(self.net, targets)
        self.forward_opt.step([g for layer in update.grads for g in layer.values()])
        self.net.invalidate()
        self.batch_counter += 1
        return targets.loss, int(np.sum(np.argmax(logits, axis=1) == y)), fb_losses

    def bp_step(self, x: np.ndarray, y: np.ndarray) -> tuple[float, int]:
        loss, grads, _ = backprop(self.net, x, y)
        correct = int(np.sum(np.argmax(self.net.acts[-1], axis=1) == y))
        self.forward_opt.step([g for layer in grads for g in layer.values()])
        self.net.invalidate()
        self.batch_counter += 1
        return loss, correct

    def feedback_step(self, x: np.ndarray) -> list:
        self.net.forward(x)
        losses = self._feedback_phase()
        self.net.invalidate()
        self.batch_counter += 1
        return losses

    # -- epochs ---------------------------------------------------------------

    def _batches(self, data: Dataset):
        gen = iterate_batches(data, self.cfg.run.batch_size, self.cfg.run.seed, self.data_pass)
        for i, (x, y) in enumerate(gen):
            yield self._prepare(x, i), y
        self.data_pass += 1

    def _emit(self, phase, epoch, step, layer, name, value):
        if self.sink is not None:
            self.sink.emit(phase, epoch, step, layer, name, value)

    def _run_epoch(self, data: Dataset, epoch: int, step_fn) -> EpochMetrics:
        if self.schedule is not None:
            self.schedule.set_epoch(epoch)
        start = time.perf_counter()
        total, correct, batches = 0.0, 0, 0
        fb_sums = np.zeros(self.net.depth)
        for x, y in self._batches(data):
            out = step_fn(x, y)
            total += out[0] * len(y)
            correct += out[1]
            if len(out) > 2:
                for n in range(1, self.net.depth):
                    fb_sums[n] += out[2][n][-1] if out[2][n] else 0.0
            batches += 1
        metrics = EpochMetrics(total / len(data), 100.0 * correct / len(data), batches,
                               time.perf_counter() - start, list(fb_sums[1:] / max(batches, 1)))
        self.forward_epochs += 1
        self._emit("train", epoch, self.batch_counter, None, "loss", metrics.loss)
        self._emit("train", epoch, self.batch_counter, None, "accuracy", metrics.accuracy)
        self._emit("train", epoch, self.batch_counter, None, "lr", self.forward_opt.lrs[0])
        if self.cfg.scheme is not None:
            for n, v in enumerate(metrics.feedback_loss, start=1):
                self._emit("train", epoch, self.batch_counter, n, "feedback_loss", v)
        return metrics

    def feedback_epoch(self, data: Dataset) -> int:
        """One pass of pure feedback training; forward weights are untouched."""
        batches = 0
        for x, _ in self._batches(data):
            self.feedback_step(x)
            batches += 1
        self.feedback_epochs += 1
        return batches

    def train_epoch(self, data: Dataset, epoch: int) -> EpochMetrics:
        if self.cfg.algorithm == "bp":
            return train_epoch_bp(self, data, epoch)
        if self.cfg.algorithm == "ddtp_s":
            return train_epoch_sddtp(self, data, epoch)
        return train_epoch_dtp(self, data, epoch)

    def fit(self, train: Dataset, test: Optional[Dataset] = None) -> list:
        history = []
        for epoch in range(self.cfg.run.epochs):
            m = self.train_epoch(train, epoch)
            row = {"epoch": epoch, "train_loss": m.loss, "train_acc": m.accuracy}
            if test is not None:
                loss, top1, top5 = evaluate(self.net, test, self.cfg.run.eval_batch_size)
                row.update(test_loss=loss, test_top1=top1, test_top5=top5)
                for name in ("loss", "top1", "top5"):
                    self._emit("eval", epoch, self.batch_counter, None, name, row[f"test_{name}"])
            history.append(row)
        return history


def train_epoch_dtp(trainer: Trainer, data: Dataset, epoch: int) -> EpochMetrics:
    if trainer.cfg.algorithm not in ("dtp_ldrl", "dtp_vanilla", "ddtp_p", "ddtp_s"):
        raise ConfigError(f"target-propagation epoch requested for algorithm {trainer.cfg.algorithm!r}")
    if trainer.cfg.algorithm != "ddtp_s":
        trainer.feedback_epochs += 1
    return trainer._run_epoch(data, epoch, trainer.train_step)


def train_epoch_sddtp(trainer: Trainer, data: Dataset, epoch: int) -> EpochMetrics:
    """Pretraining passes before the first epoch, one interleaved epoch, then extra feedback passes."""
    cfg = trainer.cfg
    if cfg.algorithm != "ddtp_s":
        raise ConfigError("scheduled DDTP epoch needs run.algorithm = 'ddtp_s'")
    if epoch == 0:
        for _ in range(cfg.feedback.pretrain_epochs):
            trainer.feedback_epoch(data)
    metrics = trainer._run_epoch(data, epoch, trainer.train_step)
    trainer.feedback_epochs += 1
    for _ in range(cfg.feedback.extra_epochs):
        trainer.feedback_epoch(data)
    return metrics


def train_epoch_bp(trainer: Trainer, data: Dataset, epoch: int) -> EpochMetrics:
    return trainer._run_epoch(data, epoch, trainer.bp_step)


def evaluate(net: Network, data: Dataset, batch_size: int = 1000) -> tuple[float, float, float]:
    """Mean cross-entropy, top-1 and top-5 accuracy (percent); no augmentation."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    loss, top1, top5 = 0.0, 0, 0
    k = min(5, data.classes)
    for x, y in iterate_batches(data, batch_size, shuffle=False):
        logits = net.forward(x.astype(net.dtype, copy=False))
        loss += softmax_ce_grad(logits, y)[0] * len(y)
        top1 += int(np.sum(np.argmax(logits, axis=1) == y))
        best = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        top5 += int(np.sum(np.any(best == y[:, None], axis=1)))
    net.invalidate()
    n = len(data)
    return loss / n, 100.0 * top1 / n, 100.0 * top5 / n


def load_data(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    """Train and test splits named by ``cfg.data``, truncated to the configured limits.

    The synthetic dataset draws one pool of Gaussian blobs and holds out a fifth
    of it (at least one sample) for testing.
    """
    d = cfg.data
    if d.dataset == "synthetic":
        shape = tuple(d.synthetic_shape)
        n_test = max(1, d.synthetic_size // 5)
        pool = synthetic_classification(d.synthetic_size + n_test, math.prod(shape), d.synthetic_classes,
                                        seed=cfg.run.seed, shape=shape)
        train = Dataset(pool.images[:d.synthetic_size], pool.labels[:d.synthetic_size], pool.classes)
        test = Dataset(pool.images[d.synthetic_size:], pool.labels[d.synthetic_size:], pool.classes)
    else:
        train, test = load_dataset(d.dataset, d.root or None)
    return train.subset(d.train_limit or None), test.subset(d.test_limit or None)
