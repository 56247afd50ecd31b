"""ResNet, Neural ODE and skew-symmetric ODE blocks, and the networks built from them.

Layers hold :class:`Parameter` objects and run inside a :class:`Context`
that decides whether parameters become tape leaves. All layer inputs carry a
leading batch axis; the module-level ``*_forward`` functions also accept a
single unbatched example.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from . import tensor as T
from .functional import ActivationKind, as_activation
from .solvers import SolverConfig, StepTrace, integrate, sequential_euler_integrate
from .tensor import ShapeError, Tape, Tensor

ARCHITECTURES = ("sonet", "soblock", "resnet10", "odenet")


@dataclass
class Parameter:
    name: str
    value: np.ndarray

    @property
    def size(self) -> int:
        return self.value.size


@dataclass
class Context:
    """Per-forward settings: recording tape, train/eval mode, trace sink."""

    tape: Tape | None = None
    training: bool = False
    param_grad: bool = True
    traces: list = field(default_factory=list)

    def p(self, param: Parameter) -> Tensor:
        if self.tape is None:
            return Tensor(param.value)
        return self.tape.param(param, requires_grad=self.param_grad)


# ---------------------------------------------------------------------------
# kernel helpers: a 2-D kernel is a dense matrix, a 4-D kernel a convolution


def apply_kernel(K, x) -> Tensor:
    return F.linear_apply(K, x) if T.as_tensor(K).ndim == 2 else F.conv2d(K, x)


def apply_kernel_negT(K, z) -> Tensor:
    return F.linear_apply_negT(K, z) if T.as_tensor(K).ndim == 2 else F.conv2d_negT(K, z)


# ---------------------------------------------------------------------------
# skew-symmetric block


@dataclass
class SkewOdeBlockParams:
    """One shared kernel drives both branches of the coupled system.

    ``kernel`` is ``(d_out, d_in)`` for dense blocks or ``(C_out, C_in, k, k)``
    for convolutional ones; the ``-W^T`` branch reuses the same buffer.
    """

    kernel: np.ndarray
    gamma: float = 0.0
    t_end: float = 1.0
    activation: ActivationKind = field(default_factory=ActivationKind)
    block_kind: str = "feature"

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.activation = as_activation(self.activation)
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.block_kind not in ("feature", "classification"):
            raise ValueError(f"unknown block kind {self.block_kind!r}")
        if self.kernel.ndim not in (2, 4):
            raise ShapeError("kernel must be a matrix or a 4-D convolution kernel")

    @property
    def eligible(self) -> bool:
        """Conditions for the stability certificate: positive damping, sigma' > 0."""
        return self.gamma > 0 and self.activation.eligible


def skew_field_eval(kernel, x, z, gamma: float, activation) -> tuple[Tensor, Tensor]:
    """``dx = s(-W^T z - g x)``, ``dz = s(W x - g z)`` with one kernel ``W``."""
    act = as_activation(activation)
    dz = F.activation(act, _damped(apply_kernel(kernel, x), gamma, z))
    dx = F.activation(act, _damped(apply_kernel_negT(kernel, z), gamma, x))
    return dx, dz


def _damped(u: Tensor, gamma: float, v) -> Tensor:
    return u - gamma * T.as_tensor(v) if gamma else u


def _split_joint(y: Tensor, nx: int) -> tuple[Tensor, Tensor]:
    return y[:, :nx], y[:, nx:]


def skew_block_integrate(kernel, gamma: float, activation, x0, z0, solver: SolverConfig,
                         t_end: float = 1.0, batched: bool = True):
    """Integrate the joint ``(x, z)`` state from 0 to ``t_end``.

    Returns ``(x(t_end), z(t_end), trace)``. ``euler_sequential`` updates
    ``z`` before ``x`` within each step.
    """
    act = as_activation(activation)
    x0, z0 = T.as_tensor(x0), T.as_tensor(z0)
    if not batched:
        x0, z0 = T.reshape(x0, (1,) + x0.shape), T.reshape(z0, (1,) + z0.shape)

    if solver.method == "euler_sequential":
        def fz(t, x, z):
            return F.activation(act, _damped(apply_kernel(kernel, x), gamma, z))

        def fx(t, x, z):
            return F.activation(act, _damped(apply_kernel_negT(kernel, z), gamma, x))

        x1, z1, tr = sequential_euler_integrate(fz, fx, x0, z0, 0.0, t_end, solver.h,
                                                batched=True)
    else:
        nx = x0.shape[1]

        def f(t, y):
            x, z = _split_joint(y, nx)
            dx, dz = skew_field_eval(kernel, x, z, gamma, act)
            return T.concat([dx, dz], axis=1)

        y1, tr = integrate(f, T.concat([x0, z0], axis=1), 0.0, t_end, solver, batched=True)
        x1, z1 = _split_joint(y1, nx)
    if not batched:
        return T.reshape(x1, x1.shape[1:]), T.reshape(z1, z1.shape[1:]), tr[0]
    return x1, z1, tr


def initial_z(params: SkewOdeBlockParams, x: Tensor) -> np.ndarray:
    """Feature blocks start ``z`` at the input; classification blocks at all ones."""
    if params.block_kind == "feature":
        return x
    return np.ones((x.shape[0], params.kernel.shape[0]))


def ode_block_forward(params: SkewOdeBlockParams, x_k, solver: SolverConfig):
    """Output ``z(t_end)`` of a skew block for one unbatched input."""
    x = T.as_tensor(x_k)
    xb = T.reshape(x, (1,) + x.shape)
    z0 = initial_z(params, xb)
    _, z1, _ = skew_block_integrate(params.kernel, params.gamma, params.activation, xb, z0,
                                    solver, params.t_end)
    return T.reshape(z1, z1.shape[1:])


def resnet_block_forward(W1, W2, x_k, activation="relu") -> Tensor:
    """Residual block with ``z_k = 0`` and unit step: ``x + s(W2 s(W1 x))``."""
    act = as_activation(activation)
    z = F.activation(act, apply_kernel(W1, x_k))
    return T.as_tensor(x_k) + F.activation(act, apply_kernel(W2, z))


def odenet_field(W1, W2, activation):
    act = as_activation(activation)

    def f(t, x):
        return F.activation(act, apply_kernel(W2, F.activation(act, apply_kernel(W1, x))))

    return f


def odenet_block_forward(W1, W2, x_k, solver: SolverConfig, activation="elu",
                         t_end: float = 1.0) -> Tensor:
    """Integrate ``dx/dt = s(W2 s(W1 x))`` from ``x_k`` to ``t_end``."""
    W1a, W2a = T.as_tensor(W1), T.as_tensor(W2)
    x = T.as_tensor(x_k)
    if W1a.ndim == 2 and (W1a.shape[1] != W2a.shape[0] or W1a.shape[0] != W2a.shape[1]):
        raise ShapeError("odenet block needs W2 @ W1 square")
    if W1a.ndim == 4 and W2a.shape[0] != W1a.shape[1]:
        raise ShapeError("odenet block cannot change the number of channels")
    y, _ = integrate(odenet_field(W1, W2, activation), x, 0.0, t_end, solver)
    return y


def channel_copy(x, channels: int) -> Tensor:
    """Tile the channel axis (axis 1) until ``channels`` and truncate."""
    x = T.as_tensor(x)
    c = x.shape[1]
    if channels < c:
        raise ValueError("channel_copy cannot reduce channels")
    return T.take(x, np.arange(channels) % c, axis=1)


def channel_copy_single(x, factor: int) -> Tensor:
    """Unbatched ``C x H x W`` -> ``(C*factor) x H x W``."""
    if factor < 1 or int(factor) != factor:
        raise ValueError("factor must be a positive integer")
    x = T.as_tensor(x)
    return T.take(x, np.arange(x.shape[0] * int(factor)) % x.shape[0], axis=0)


def average_pool(x) -> Tensor:
    return F.average_pool(x)


def predict(model, x) -> np.ndarray:
    """Class index per example, ties toward the lowest index."""
    logits = model.logits(x) if hasattr(model, "logits") else T.as_tensor(model(x))
    return F.predict_logits(logits.data)


# ---------------------------------------------------------------------------
# layers


class Layer:
    name = ""

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        raise NotImplementedError


def _kaiming(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class SkewOdeBlock(Layer):
    def __init__(self, name: str, params: SkewOdeBlockParams, solver: SolverConfig):
        self.name = name
        self.params = params
        self.kernel = Parameter(f"{name}.kernel", params.kernel)
        self.solver = solver

    def parameters(self):
        return [self.kernel]

    def __call__(self, x, ctx):
        p = self.params
        K = ctx.p(self.kernel)
        z0 = initial_z(p, x)
        _, z1, tr = skew_block_integrate(K, p.gamma, p.activation, x, z0, self.solver, p.t_end)
        ctx.traces.append((self.name, tr))
        return z1


class OdeNetBlock(Layer):
    def __init__(self, name, W1, W2, solver: SolverConfig, activation="elu", t_end=1.0):
        self.name = name
        self.W1 = Parameter(f"{name}.W1", np.asarray(W1, dtype=np.float64))
        self.W2 = Parameter(f"{name}.W2", np.asarray(W2, dtype=np.float64))
        self.solver = solver
        self.activation = as_activation(activation)
        self.t_end = t_end

    def parameters(self):
        return [self.W1, self.W2]

    def __call__(self, x, ctx):
        f = odenet_field(ctx.p(self.W1), ctx.p(self.W2), self.activation)
        y, tr = integrate(f, x, 0.0, self.t_end, self.solver, batched=True)
        ctx.traces.append((self.name, tr))
        return y


class ChannelCopy(Layer):
    def __init__(self, name, channels):
        self.name, self.channels = name, channels

    def __call__(self, x, ctx):
        return channel_copy(x, self.channels)


class Conv(Layer):
    def __init__(self, name, kernel, stride=1):
        self.name = name
        self.kernel = Parameter(f"{name}.kernel", kernel)
        self.stride = stride

    def parameters(self):
        return [self.kernel]

    def __call__(self, x, ctx):
        return F.conv2d(ctx.p(self.kernel), x, stride=self.stride)


class BatchNorm(Layer):
    """Per-channel normalization; running statistics use momentum 0.9."""

    def __init__(self, name, channels, momentum=0.9, eps=1e-5):
        self.name = name
        self.weight = Parameter(f"{name}.weight", np.ones(channels))
        self.bias = Parameter(f"{name}.bias", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def parameters(self):
        return [self.weight, self.bias]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def __call__(self, x, ctx):
        w, b = ctx.p(self.weight), ctx.p(self.bias)
        if ctx.training:
            mu, var = F.batch_stats(x.data)
            m = self.momentum
            self.running_mean[:] = m * self.running_mean + (1 - m) * mu
            self.running_var[:] = m * self.running_var + (1 - m) * var
            return F.batch_norm(x, w, b, self.eps)
        return F.batch_norm(x, w, b, self.eps,
                            stats=(self.running_mean.copy(), self.running_var.copy()))


class ReLU(Layer):
    def __init__(self, name="relu"):
        self.name = name

    def __call__(self, x, ctx):
        return F.relu(x)


class GlobalAvgPool(Layer):
    def __init__(self, name="pool"):
        self.name = name

    def __call__(self, x, ctx):
        return F.average_pool(x)


class Dense(Layer):
    def __init__(self, name, W, b):
        self.name = name
        self.W = Parameter(f"{name}.W", W)
        self.b = Parameter(f"{name}.b", b)

    def parameters(self):
        return [self.W, self.b]

    def __call__(self, x, ctx):
        return F.linear_apply(ctx.p(self.W), x) + ctx.p(self.b)


class Sequential(Layer):
    def __init__(self, name, layers):
        self.name, self.layers = name, list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def __call__(self, x, ctx):
        for layer in self.layers:
            x = layer(x, ctx)
        return x


class BasicBlock(Layer):
    """One-layer ResNet basic block: two 3x3 convolutions plus shortcut."""

    def __init__(self, name, c_in, c_out, stride, rng):
        self.name = name
        self.conv1 = Conv(f"{name}.conv1", _kaiming(rng, (c_out, c_in, 3, 3), 9 * c_in), stride)
        self.bn1 = BatchNorm(f"{name}.bn1", c_out)
        self.conv2 = Conv(f"{name}.conv2", _kaiming(rng, (c_out, c_out, 3, 3), 9 * c_out))
        self.bn2 = BatchNorm(f"{name}.bn2", c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Sequential(f"{name}.short", [
                Conv(f"{name}.short.conv", _kaiming(rng, (c_out, c_in, 1, 1), c_in), stride),
                BatchNorm(f"{name}.short.bn", c_out)])

    def _parts(self):
        parts = [self.conv1, self.bn1, self.conv2, self.bn2]
        return parts + ([self.shortcut] if self.shortcut else [])

    def parameters(self):
        return [p for part in self._parts() for p in part.parameters()]

    def buffers(self):
        out = {}
        for part in self._parts():
            out.update(part.buffers())
        return out

    def __call__(self, x, ctx):
        out = F.relu(self.bn1(self.conv1(x, ctx), ctx))
        out = self.bn2(self.conv2(out, ctx), ctx)
        short = self.shortcut(x, ctx) if self.shortcut else x
        return F.relu(out + short)


# ---------------------------------------------------------------------------
# networks


@dataclass
class NetworkSpec:
    architecture: str = "sonet"
    channels: int = 32
    layers: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)
    classes: int = 10
    in_channels: int = 3
    activation: str = "elu"
    gamma: float = 0.0
    t_end: float = 1.0
    widths: tuple[int, ...] | None = None
    kernel_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)
        if self.channels < self.in_channels:
            raise ValueError("channels must be >= in_channels (channel copy only widens)")
        if self.classes < 2 or self.layers < 0:
            raise ValueError("need classes >= 2 and layers >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths) if self.widths else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["solver"] = SolverConfig(**d["solver"])
        if d.get("widths") is not None:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


class Model:
    """Score function input -> logits, plus parameter bookkeeping."""

    def __init__(self, spec: NetworkSpec, body: Sequential):
        self.spec = spec
        self.body = body

    def parameters(self) -> list[Parameter]:
        return self.body.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        return self.body.buffers()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x, ctx: Context | None = None) -> Tensor:
        return self.body(T.as_tensor(x), ctx or Context())

    __call__ = forward

    def logits(self, x) -> Tensor:
        """Eval-mode forward without recording."""
        return self.forward(x, Context())

    def predict(self, x) -> np.ndarray:
        return F.predict_logits(self.logits(x).data)

    def step_traces(self, x) -> list[tuple[str, list[StepTrace]]]:
        ctx = Context()
        self.forward(x, ctx)
        return ctx.traces

    def state(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.parameters()}
        out.update(self.buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.value[...] = state[p.name]
        for name, buf in self.buffers().items():
            buf[...] = state[name]


def _skew_kernel(rng, shape, scale):
    fan_in = int(np.prod(shape[1:]))
    return scale * rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def _stem(spec: NetworkSpec, rng, ch: int) -> list[Layer]:
    solver = spec.solver
    if spec.architecture == "resnet10":
        K = _kaiming(rng, (ch, spec.in_channels, 3, 3), 9 * spec.in_channels)
        return [Conv("stem.conv", K)]
    if spec.architecture == "soblock":
        p = SkewOdeBlockParams(_skew_kernel(rng, (ch, ch, 3, 3), spec.kernel_scale), spec.gamma,
                               spec.t_end, spec.activation, "feature")
        return [ChannelCopy("stem.copy", ch), SkewOdeBlock("stem.ode", p, solver)]
    W1 = _skew_kernel(rng, (ch, ch, 3, 3), spec.kernel_scale)
    W2 = _skew_kernel(rng, (ch, ch, 3, 3), spec.kernel_scale)
    return [ChannelCopy("stem.copy", ch),
            OdeNetBlock("stem.ode", W1, W2, solver, spec.activation, spec.t_end)]


def assemble_network(spec: NetworkSpec) -> Model:
    """Build the forward map for ``spec``.

    ``sonet``: channel copy, ``layers`` feature skew blocks, global average
    pooling and a classification skew block whose ``z`` starts at ones.
    ``resnet10``: conv-BN-ReLU stem, four basic blocks, pooling, dense head.
    ``soblock``/``odenet``: ``resnet10`` with the stem convolution replaced by
    a skew block or a plain Neural ODE block on channel-copied input.
    """
    rng = np.random.default_rng(spec.seed)
    ch = spec.channels
    if spec.architecture == "sonet":
        layers: list[Layer] = [ChannelCopy("copy", ch)]
        for i in range(spec.layers):
            p = SkewOdeBlockParams(_skew_kernel(rng, (ch, ch, 3, 3), spec.kernel_scale),
                                   spec.gamma, spec.t_end, spec.activation, "feature")
            layers.append(SkewOdeBlock(f"ode{i}", p, spec.solver))
        layers.append(GlobalAvgPool())
        pc = SkewOdeBlockParams(_skew_kernel(rng, (spec.classes, ch), spec.kernel_scale),
                                spec.gamma, spec.t_end, spec.activation, "classification")
        layers.append(SkewOdeBlock("classify", pc, spec.solver))
        return Model(spec, Sequential("sonet", layers))

    widths = spec.widths or (ch, 2 * ch, 4 * ch, 8 * ch)
    strides = (1,) + (2,) * (len(widths) - 1)
    layers = _stem(spec, rng, ch) + [BatchNorm("stem.bn", ch), ReLU("stem.relu")]
    c_in = ch
    for i, (w, s) in enumerate(zip(widths, strides)):
        layers.append(BasicBlock(f"block{i}", c_in, w, s, rng))
        c_in = w
    layers.append(GlobalAvgPool())
    W = rng.normal(0.0, 1.0 / math.sqrt(c_in), size=(spec.classes, c_in))
    layers.append(Dense("fc", W, np.zeros(spec.classes)))
    return Model(spec, Sequential(spec.architecture, layers))


# ---------------------------------------------------------------------------
# checkpoints: magic, little-endian u64 header length, JSON header, f64 payload

_MAGIC = b"SONETCK1"


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    tensors, offset, chunks = [], 0, []
    for name, arr in model.state().items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset,
                        "nbytes": a.nbytes})
        offset += a.nbytes
        chunks.append(a.tobytes())
    header = json.dumps({"spec": model.spec.to_dict(), "tensors": tensors,
                         "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    model = assemble_network(NetworkSpec.from_dict(header["spec"]))
    state = {}
    for t in header["tensors"]:
        buf = raw[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        state[t["name"]] = np.frombuffer(buf, dtype="<f8").reshape(t["shape"])
    model.load_state(state)
    return model, header.get("extra", {})
