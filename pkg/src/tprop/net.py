"""Feedforward/feedback module pairs and the network container.

A network is a chain ``s^{n+1} = F^n(s^n)`` for ``n = 0..N-1``.  Every
module except the first owns a feedback operator ``G^n`` that maps
``s^{n+1}`` (layer-wise topology) or the output ``s^N`` (direct-linear
topology) back to the shape of ``s^n``.  Feedback operators are written as
``G(u) = A_w(phi(u))`` with ``A_w`` linear in both ``w`` and its input, which
keeps all of their gradients closed-form.
"""
from __future__ import annotations

import copy
import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .tensor import (
    ArgIndices,
    Kernel4D,
    activation,
    activation_deriv,
    conv2d,
    conv2d_transpose,
    conv2d_weight_grad,
    maxpool,
    maxpool_jvp,
    maxpool_vjp,
)

LAYERWISE = "layerwise"
DIRECT = "direct"
TOPOLOGIES = (LAYERWISE, DIRECT)


# ---------------------------------------------------------------------------
# architecture grammar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    pool_window: int = 1
    pool_stride: int = 1
    pool_pad: int = 0


@dataclass(frozen=True)
class FCSpec:
    units: int
    final: bool = False


_CONV_RE = re.compile(r"^conv\s+(\d+)x(\d+)x(\d+)\s*(?:\(\s*stride\s*=\s*(\d+)\s*,\s*pad\s*=\s*(\d+)\s*\))?$", re.I)
_POOL_RE = re.compile(r"^maxpool\s+(\d+)x(\d+)\s*(?:\(\s*stride\s*=\s*(\d+)\s*,\s*pad\s*=\s*(\d+)\s*\))?$", re.I)
_FINAL_RE = re.compile(r"^fc\s*\+\s*softmax\s+(\d+)$", re.I)
_FC_RE = re.compile(r"^fc\s+(\d+)$", re.I)


def parse_architecture(lines: list[str]) -> list[Union[ConvSpec, FCSpec]]:
    """Parse layer descriptions such as ``"Conv 5x5x32 (stride=1, pad=2)"``.

    A ``Maxpool`` line is merged into the preceding convolution, so one
    convolution block becomes a single feedforward module.
    """
    specs: list[Union[ConvSpec, FCSpec]] = []
    for raw in lines:
        line = raw.strip()
        if m := _CONV_RE.match(line):
            kh, kw, ch = int(m[1]), int(m[2]), int(m[3])
            if kh != kw:
                raise ConfigError(f"only square kernels are supported: {raw!r}")
            specs.append(ConvSpec(ch, kh, int(m[4] or 1), int(m[5] or 0)))
        elif m := _POOL_RE.match(line):
            if not specs or not isinstance(specs[-1], ConvSpec) or specs[-1].pool_window != 1:
                raise ConfigError(f"maxpool must directly follow a conv layer: {raw!r}")
            if m[1] != m[2]:
                raise ConfigError(f"only square pooling is supported: {raw!r}")
            prev = specs[-1]
            specs[-1] = ConvSpec(prev.channels, prev.kernel, prev.stride, prev.pad,
                                 int(m[1]), int(m[3] or m[1]), int(m[4] or 0))
        elif m := _FINAL_RE.match(line):
            specs.append(FCSpec(int(m[1]), final=True))
        elif m := _FC_RE.match(line):
            specs.append(FCSpec(int(m[1])))
        else:
            raise ConfigError(f"cannot parse architecture line {raw!r}")
    if not specs or not isinstance(specs[-1], FCSpec) or not specs[-1].final:
        raise ConfigError("architecture must end with an 'FC+Softmax <classes>' layer")
    if any(isinstance(s, FCSpec) and s.final for s in specs[:-1]):
        raise ConfigError("'FC+Softmax' may only appear as the last layer")
    return specs


def lenet(channels=(32, 64), fc: int = 512, classes: int = 10) -> list[str]:
    """Layer list of the two-block LeNet used throughout the experiments."""
    return [
        f"Conv 5x5x{channels[0]} (stride=1, pad=2)",
        "Maxpool 3x3 (stride=2, pad=1)",
        f"Conv 5x5x{channels[1]} (stride=1, pad=2)",
        "Maxpool 3x3 (stride=2, pad=1)",
        f"FC {fc}",
        f"FC+Softmax {classes}",
    ]


# ---------------------------------------------------------------------------
# feedforward modules
# ---------------------------------------------------------------------------

@dataclass
class ConvCtx:
    s: np.ndarray
    z: np.ndarray
    idx: ArgIndices


@dataclass
class FCCtx:
    s: np.ndarray
    z: np.ndarray


class ConvBlock:
    """conv -> activation -> maxpool, treated as one module."""

    kind = "conv"

    def __init__(self, kernel: Kernel4D, bias: np.ndarray, act: str, pool: tuple[int, int, int],
                 in_shape: tuple[int, ...]):
        self.kernel = kernel
        self.bias = bias
        self.activation = act
        self.pool = pool
        self.in_shape = tuple(in_shape)
        c, h, w = self.in_shape
        if c != kernel.weight.shape[1]:
            raise DimensionError(f"conv expects {kernel.weight.shape[1]} input channels, got {c}")
        ho, wo = kernel.output_hw(h, w)
        win, st, pd = pool
        if ho + 2 * pd < win:
            raise DimensionError(f"pool window {win} larger than conv output {ho}x{wo}")
        self.conv_shape = (kernel.weight.shape[0], ho, wo)
        self.out_shape = (kernel.weight.shape[0], (ho + 2 * pd - win) // st + 1, (wo + 2 * pd - win) // st + 1)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.kernel.weight, "bias": self.bias}

    def forward(self, s: np.ndarray) -> tuple[np.ndarray, ConvCtx]:
        z = conv2d(s, self.kernel) + self.bias[None, :, None, None]
        out, idx = maxpool(activation(z, self.activation), *self.pool)
        return out, ConvCtx(s, z, idx)

    def _preact_grad(self, ctx: ConvCtx, v: np.ndarray) -> np.ndarray:
        return maxpool_vjp(v, ctx.idx, ctx.z.shape) * activation_deriv(ctx.z, self.activation)

    def input_vjp(self, ctx: ConvCtx, v: np.ndarray) -> np.ndarray:
        return conv2d_transpose(self._preact_grad(ctx, v), self.kernel, ctx.s.shape)

    def input_jvp(self, ctx: ConvCtx, u: np.ndarray) -> np.ndarray:
        dz = conv2d(u, self.kernel) * activation_deriv(ctx.z, self.activation)
        return maxpool_jvp(dz, ctx.idx)

    def param_vjp(self, ctx: ConvCtx, v: np.ndarray) -> dict[str, np.ndarray]:
        gz = self._preact_grad(ctx, v)
        return {"weight": conv2d_weight_grad(ctx.s, gz, self.kernel), "bias": gz.sum(axis=(0, 2, 3))}


class FCLayer:
    """Affine map on the flattened input, optionally followed by an activation.

    With ``final=True`` the activation is linear and the outputs are logits.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, act: str, in_shape: tuple[int, ...],
                 final: bool = False):
        self.weight = weight
        self.bias = bias
        self.activation = "linear" if final else act
        self.final = final
        self.in_shape = tuple(in_shape)
        if weight.shape[1] != math.prod(self.in_shape):
            raise DimensionError(f"FC expects {weight.shape[1]} inputs, previous layer gives {self.in_shape}")
        self.out_shape = (weight.shape[0],)

    @property
    def kind(self) -> str:
        return "fc_final" if self.final else "fc"

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, s: np.ndarray) -> tuple[np.ndarray, FCCtx]:
        z = s.reshape(s.shape[0], -1) @ self.weight.T + self.bias
        return activation(z, self.activation), FCCtx(s, z)

    def input_vjp(self, ctx: FCCtx, v: np.ndarray) -> np.ndarray:
        gz = v * activation_deriv(ctx.z, self.activation)
        return (gz @ self.weight).reshape(ctx.s.shape)

    def input_jvp(self, ctx: FCCtx, u: np.ndarray) -> np.ndarray:
        dz = u.reshape(u.shape[0], -1) @ self.weight.T
        return dz * activation_deriv(ctx.z, self.activation)

    def param_vjp(self, ctx: FCCtx, v: np.ndarray) -> dict[str, np.ndarray]:
        gz = v * activation_deriv(ctx.z, self.activation)
        return {"weight": gz.T @ ctx.s.reshape(ctx.s.shape[0], -1), "bias": gz.sum(axis=0)}


FeedforwardModule = Union[ConvBlock, FCLayer]


# ---------------------------------------------------------------------------
# feedback modules
# ---------------------------------------------------------------------------

class FeedbackModule:
    """Base class: ``G(u) = A_w(phi(u))``.

    Subclasses implement ``transform(a)`` (``A_w``, linear in ``a`` and ``w``)
    and ``weight_grad(a, g)`` (gradient of ``<g, A_w(a)>`` with respect to
    ``w``).  ``source_shape`` is the per-sample shape of ``u`` and
    ``target_shape`` the shape of the result.
    """

    phi: str = "linear"
    topology: str = LAYERWISE
    source_shape: tuple[int, ...]
    target_shape: tuple[int, ...]

    @property
    def weight(self) -> np.ndarray:
        raise NotImplementedError

    def transform(self, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def weight_grad(self, a: np.ndarray, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self, u: np.ndarray) -> None:
        if tuple(u.shape[1:]) != self.source_shape:
            raise DimensionError(f"feedback expects input of shape (B, {self.source_shape}), got {u.shape}")

    def lift(self, u: np.ndarray) -> np.ndarray:
        """Elementwise pre-transform ``phi(u)``."""
        self._check(u)
        return activation(u, self.phi)

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.transform(self.lift(u))

    def jvp(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Directional derivative of ``G`` at ``u`` along ``v``."""
        self._check(u)
        if v.shape != u.shape:
            raise DimensionError(f"direction {v.shape} does not match point {u.shape}")
        return self.transform(activation_deriv(u, self.phi) * v)


class LinearFeedback(FeedbackModule):
    """Dense matrix ``w`` of shape ``dim(target) x dim(source)``."""

    kind = "linear"

    def __init__(self, w: np.ndarray, source_shape, target_shape, topology: str = LAYERWISE):
        self.w = w
        self.source_shape = tuple(source_shape)
        self.target_shape = tuple(target_shape)
        self.topology = topology
        if w.shape != (math.prod(self.target_shape), math.prod(self.source_shape)):
            raise DimensionError(f"feedback matrix {w.shape} does not map {self.source_shape} -> {self.target_shape}")

    @property
    def weight(self) -> np.ndarray:
        return self.w

    def transform(self, a: np.ndarray) -> np.ndarray:
        return (a.reshape(a.shape[0], -1) @ self.w.T).reshape(a.shape[0], *self.target_shape)

    def weight_grad(self, a: np.ndarray, g: np.ndarray) -> np.ndarray:
        return g.reshape(g.shape[0], -1).T @ a.reshape(a.shape[0], -1)


class ConvFeedback(FeedbackModule):
    """Transposed convolution of ``phi(u)``; its kernel has the forward layout
    ``C_{n+1} x C_n x K x K`` so a copy of the forward kernel is a valid value."""

    kind = "conv"

    def __init__(self, kernel: Kernel4D, phi: str, source_shape, target_shape):
        self.kernel = kernel
        self.phi = phi
        self.source_shape = tuple(source_shape)
        self.target_shape = tuple(target_shape)
        out = (kernel.weight.shape[0], *kernel.output_hw(*self.target_shape[1:]))
        if out != self.source_shape or kernel.weight.shape[1] != self.target_shape[0]:
            raise DimensionError(f"feedback kernel {kernel.shape} (stride {kernel.stride}, pad {kernel.pad}) "
                                 f"does not map {self.source_shape} -> {self.target_shape}")

    @property
    def weight(self) -> np.ndarray:
        return self.kernel.weight

    def transform(self, a: np.ndarray) -> np.ndarray:
        return conv2d_transpose(a, self.kernel, (a.shape[0], *self.target_shape))

    def weight_grad(self, a: np.ndarray, g: np.ndarray) -> np.ndarray:
        # <g, K^T a> = <K g, a>
        return conv2d_weight_grad(g, a, self.kernel)


def solve_feedback_padding(target_shape, source_shape, kernel: int, stride: int) -> int:
    """Smallest padding making a ``kernel``/``stride`` convolution map target -> source spatially."""
    _, h, w = target_shape
    _, hs, ws = source_shape
    for pad in range(kernel):
        if h + 2 * pad < kernel:
            continue
        if ((h + 2 * pad - kernel) // stride + 1, (w + 2 * pad - kernel) // stride + 1) == (hs, ws):
            return pad
    raise ConfigError(f"no padding lets a {kernel}x{kernel}/stride {stride} transposed conv "
                      f"map {source_shape} to {target_shape}")


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

INITS = ("kaiming_uniform", "xavier_normal")


def _init_weight(rng: np.random.Generator, shape, fan_in: int, dtype, init: str = "kaiming_uniform") -> np.ndarray:
    if init == "kaiming_uniform":
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    fan_out = math.prod(shape) // fan_in
    return (rng.standard_normal(shape) * math.sqrt(2.0 / (fan_in + fan_out))).astype(dtype)


@dataclass
class _Cache:
    token: int
    acts: list[np.ndarray]
    ctxs: list = field(default_factory=list)


class Network:
    """Ordered feedforward modules with optional paired feedback modules.

    ``feedback[n]`` is ``G^n``; ``feedback[0]`` is always ``None``.  Networks
    built for plain backprop carry ``feedback = None``.
    """

    _tokens = itertools.count(1)

    def __init__(self, input_shape, layers: list[FeedforwardModule],
                 feedback: Optional[list[Optional[FeedbackModule]]] = None,
                 topology: Optional[str] = LAYERWISE, dtype=np.float64):
        self.input_shape = tuple(input_shape)
        self.layers = layers
        self.feedback = feedback
        self.topology = topology if feedback is not None else None
        self.dtype = np.dtype(dtype)
        self._cache: Optional[_Cache] = None
        self._validate()

    def _validate(self) -> None:
        shape = self.input_shape
        for n, layer in enumerate(self.layers):
            if layer.in_shape != shape:
                raise DimensionError(f"layer {n} expects input {layer.in_shape}, previous gives {shape}")
            shape = layer.out_shape
        if not isinstance(self.layers[-1], FCLayer) or not self.layers[-1].final:
            raise DimensionError("the last module must be a final FC (logits) layer")
        if any(isinstance(l, FCLayer) and l.final for l in self.layers[:-1]):
            raise DimensionError("only the last module may be a final FC layer")
        if self.feedback is None:
            return
        if len(self.feedback) != len(self.layers) or self.feedback[0] is not None:
            raise DimensionError("feedback list must have one entry per layer with feedback[0] = None")
        shapes = self.shapes
        for n in range(1, self.depth):
            g = self.feedback[n]
            if g is None:
                raise DimensionError(f"missing feedback module for layer {n}")
            source = shapes[self.depth] if g.topology == DIRECT else shapes[n + 1]
            if g.source_shape != source or g.target_shape != shapes[n]:
                raise DimensionError(f"feedback {n} maps {g.source_shape} -> {g.target_shape}, "
                                     f"expected {source} -> {shapes[n]}")

    @property
    def depth(self) -> int:
        """Number of feedforward modules ``N``."""
        return len(self.layers)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shapes of ``s^0 .. s^N``."""
        return [self.input_shape] + [l.out_shape for l in self.layers]

    # -- forward ------------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"input shape {x.shape[1:]} does not match layer 0 input {self.input_shape}")
        s = np.asarray(x, dtype=self.dtype)
        acts, ctxs = [s], []
        for n, layer in enumerate(self.layers):
            try:
                s, ctx = layer.forward(s)
            except DimensionError as exc:
                raise DimensionError(f"layer {n}: {exc}") from exc
            acts.append(s)
            ctxs.append(ctx)
        self._cache = _Cache(next(Network._tokens), acts, ctxs)
        return s

    def invalidate(self) -> None:
        """Drop cached activations, e.g. after the forward weights changed."""
        self._cache = None

    def _require_cache(self) -> _Cache:
        if self._cache is None:
            raise StateError("no valid forward cache; call forward() first")
        return self._cache

    @property
    def cache_token(self) -> int:
        return self._require_cache().token

    @property
    def acts(self) -> list[np.ndarray]:
        """Cached activations ``s^0 .. s^N`` of the last forward pass."""
        return self._require_cache().acts

    def ctx(self, n: int):
        return self._require_cache().ctxs[n]

    # -- local linearisations ---------------------------------------------

    def jacobian_T_vjp(self, n: int, v: np.ndarray) -> np.ndarray:
        """``(dF^n/ds^n)^T v`` at the cached ``s^n``."""
        cache = self._require_cache()
        if v.shape != cache.acts[n + 1].shape:
            raise DimensionError(f"layer {n}: vjp direction {v.shape} != output {cache.acts[n + 1].shape}")
        return self.layers[n].input_vjp(cache.ctxs[n], v)

    def jacobian_jvp(self, n: int, u: np.ndarray) -> np.ndarray:
        cache = self._require_cache()
        if u.shape != cache.acts[n].shape:
            raise DimensionError(f"layer {n}: jvp direction {u.shape} != input {cache.acts[n].shape}")
        return self.layers[n].input_jvp(cache.ctxs[n], u)

    def param_vjp(self, n: int, v: np.ndarray) -> dict[str, np.ndarray]:
        return self.layers[n].param_vjp(self._require_cache().ctxs[n], v)

    def feedback_source(self, n: int) -> np.ndarray:
        """Cached activation that ``G^n`` reads: ``s^{n+1}`` or ``s^N``."""
        acts = self.acts
        return acts[self.depth] if self.feedback[n].topology == DIRECT else acts[n + 1]

    def feedback_apply(self, n: int, u: np.ndarray) -> np.ndarray:
        self._require_feedback(n)
        return self.feedback[n].apply(u)

    def feedback_jvp(self, n: int, v: np.ndarray) -> np.ndarray:
        """Directional derivative of ``G^n`` at its cached input."""
        self._require_feedback(n)
        return self.feedback[n].jvp(self.feedback_source(n), v)

    def _require_feedback(self, n: int) -> None:
        if self.feedback is None:
            raise StateError("network was built without feedback modules")
        if not 1 <= n < self.depth:
            raise DimensionError(f"no feedback module G^{n}; valid layers are 1..{self.depth - 1}")

    # -- parameters ---------------------------------------------------------

    def forward_params(self) -> list[dict[str, np.ndarray]]:
        return [layer.params for layer in self.layers]

    def feedback_weights(self) -> list[Optional[np.ndarray]]:
        if self.feedback is None:
            return []
        return [None if g is None else g.weight for g in self.feedback]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def set_symmetric_feedback(self) -> None:
        """Set every ``w^n`` to the transpose of ``theta^n``.

        Dense feedback gets ``theta^T``; convolutional feedback gets a copy of
        the forward kernel (its transposed convolution is the adjoint).
        """
        self._require_feedback(1)
        for n in range(1, self.depth):
            g, layer = self.feedback[n], self.layers[n]
            if g.topology == DIRECT and n != self.depth - 1:
                raise ConfigError(f"direct feedback G^{n} has no transpose counterpart")
            if isinstance(g, ConvFeedback):
                if g.kernel.weight.shape != layer.kernel.weight.shape:
                    raise ConfigError(f"feedback kernel {g.kernel.shape} != forward kernel {layer.kernel.shape}")
                g.kernel.weight[...] = layer.kernel.weight
            else:
                g.w[...] = layer.weight.T


def build_network(input_shape, arch: list[str], act: str = "elu", topology: Optional[str] = LAYERWISE,
                  seed: int = 0, dtype=np.float64, init: str = "kaiming_uniform") -> Network:
    """Build a network from layer description lines such as ``"FC 512"``.

    ``topology=None`` builds a feedforward-only network (backprop).
    Forward weights and feedback weights draw from independent seeded streams.
    ``init`` is ``"kaiming_uniform"`` or ``"xavier_normal"``; biases are always
    uniform in ``+-1/sqrt(fan_in)``.
    """
    if init not in INITS:
        raise ConfigError(f"unknown initialisation {init!r}; expected {INITS}")
    if topology is not None and topology not in TOPOLOGIES:
        raise ConfigError(f"unknown feedback topology {topology!r}; expected {TOPOLOGIES}")
    specs = parse_architecture(arch)
    fwd_rng = np.random.default_rng([seed, 0])
    fb_rng = np.random.default_rng([seed, 1])
    shape = tuple(input_shape)
    layers: list[FeedforwardModule] = []
    for spec in specs:
        if isinstance(spec, ConvSpec):
            c_in = shape[0]
            fan_in = c_in * spec.kernel * spec.kernel
            w = _init_weight(fwd_rng, (spec.channels, c_in, spec.kernel, spec.kernel), fan_in, dtype, init)
            b = fwd_rng.uniform(-1, 1, spec.channels).astype(dtype) / math.sqrt(fan_in)
            layer = ConvBlock(Kernel4D(w, spec.stride, spec.pad), b, act,
                              (spec.pool_window, spec.pool_stride, spec.pool_pad), shape)
        else:
            fan_in = math.prod(shape)
            w = _init_weight(fwd_rng, (spec.units, fan_in), fan_in, dtype, init)
            b = fwd_rng.uniform(-1, 1, spec.units).astype(dtype) / math.sqrt(fan_in)
            layer = FCLayer(w, b, act, shape, final=spec.final)
        layers.append(layer)
        shape = layer.out_shape
    if topology is None:
        return Network(input_shape, layers, None, None, dtype)

    shapes = [tuple(input_shape)] + [l.out_shape for l in layers]
    n_layers = len(layers)
    feedback: list[Optional[FeedbackModule]] = [None]
    for n in range(1, n_layers):
        layer, target = layers[n], shapes[n]
        if topology == DIRECT:
            source = shapes[n_layers]
            w = _init_weight(fb_rng, (math.prod(target), math.prod(source)), math.prod(source), dtype, init)
            feedback.append(LinearFeedback(w, source, target, DIRECT))
        elif isinstance(layer, ConvBlock):
            source = shapes[n + 1]
            k = layer.kernel.weight.shape[2]
            stride = layer.kernel.stride * layer.pool[1]
            pad = solve_feedback_padding(target, source, k, stride)
            shape_w = (source[0], target[0], k, k)
            w = _init_weight(fb_rng, shape_w, source[0] * k * k, dtype, init)
            feedback.append(ConvFeedback(Kernel4D(w, stride, pad), layer.activation, source, target))
        else:
            source = shapes[n + 1]
            w = _init_weight(fb_rng, (math.prod(target), math.prod(source)), math.prod(source), dtype, init)
            feedback.append(LinearFeedback(w, source, target, LAYERWISE))
    return Network(input_shape, layers, feedback, topology, dtype)
