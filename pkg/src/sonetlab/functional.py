"""Network primitives built on the tape: linear maps, convolutions, activations, losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Op, ShapeError, Tensor, apply, as_tensor, mean

ACTIVATIONS = ("tanh", "elu", "softplus", "relu", "identity")


@dataclass(frozen=True)
class ActivationKind:
    """Elementwise nonlinearity with its derivative.

    ``eligible`` is true when the derivative is strictly positive everywhere,
    which the stability certificate requires.
    """

    tag: str = "elu"
    alpha: float = 1.0  # elu scale
    beta: float = 1.0  # softplus sharpness

    def __post_init__(self):
        if self.tag not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.tag!r}; choose from {ACTIVATIONS}")

    @property
    def eligible(self) -> bool:
        return self.tag != "relu"

    def value(self, x: np.ndarray) -> np.ndarray:
        if self.tag == "tanh":
            return np.tanh(x)
        if self.tag == "elu":
            return np.where(x > 0, x, self.alpha * np.expm1(np.minimum(x, 0.0)))
        if self.tag == "softplus":
            return np.logaddexp(0.0, self.beta * x) / self.beta
        if self.tag == "relu":
            return np.maximum(x, 0.0)
        return x.copy()

    def derivative(self, x: np.ndarray) -> np.ndarray:
        if self.tag == "tanh":
            return 1.0 - np.tanh(x) ** 2
        if self.tag == "elu":
            return np.where(x > 0, 1.0, self.alpha * np.exp(np.minimum(x, 0.0)))
        if self.tag == "softplus":
            return 0.5 * (1.0 + np.tanh(0.5 * self.beta * x))
        if self.tag == "relu":
            return (x > 0).astype(np.float64)
        return np.ones_like(x)


def as_activation(kind) -> ActivationKind:
    return kind if isinstance(kind, ActivationKind) else ActivationKind(kind)


class _Activation(Op):
    name = "activation"

    def forward(self, x, kind):
        return kind.value(x), None

    def backward(self, g, saved, xs, out, needs, kind):
        return (g * kind.derivative(xs[0]),)


def activation(kind, x) -> Tensor:
    return apply("activation", x, kind=as_activation(kind))


def relu(x) -> Tensor:
    return activation("relu", x)


# ---------------------------------------------------------------------------
# dense maps; x carries any number of leading batch axes


class _Linear(Op):
    name = "linear"

    def forward(self, W, x):
        if W.ndim != 2 or x.shape[-1] != W.shape[1]:
            raise ShapeError(f"linear: W {W.shape} does not conform with x {x.shape}")
        return x @ W.T, None

    def backward(self, g, saved, xs, out, needs):
        W, x = xs
        gW = None
        if needs[0]:
            gW = g.reshape(-1, W.shape[0]).T @ x.reshape(-1, W.shape[1])
        return gW, (g @ W if needs[1] else None)


class _LinearNegT(Op):
    name = "linear_negT"

    def forward(self, W, z):
        if W.ndim != 2 or z.shape[-1] != W.shape[0]:
            raise ShapeError(f"linear_negT: W {W.shape} does not conform with z {z.shape}")
        return -(z @ W), None

    def backward(self, g, saved, xs, out, needs):
        W, z = xs
        gW = None
        if needs[0]:
            gW = -(z.reshape(-1, W.shape[0]).T @ g.reshape(-1, W.shape[1]))
        return gW, (-(g @ W.T) if needs[1] else None)


def linear_apply(W, x) -> Tensor:
    """``W @ x`` applied along the last axis of ``x``."""
    return apply("linear", W, x)


def linear_apply_negT(W, z) -> Tensor:
    """``-W.T @ z`` using the same kernel buffer as :func:`linear_apply`."""
    return apply("linear_negT", W, z)


# ---------------------------------------------------------------------------
# convolution (cross-correlation, zero padding)


def _batched(x):
    return (x[None], True) if x.ndim == 3 else (x, False)


def _conv_forward(x, K, stride, pad):
    """Shift-and-accumulate correlation in channel-major layout.

    Returns the output and the padded channel-major input kept for the
    kernel gradient.
    """
    B, C, H, W = x.shape
    O, Ci, k, k2 = K.shape
    if Ci != C or k != k2:
        raise ShapeError(f"conv2d: kernel {K.shape} does not conform with input {x.shape}")
    xt = np.zeros((C, B, H + 2 * pad, W + 2 * pad))
    xt[:, :, pad:pad + H, pad:pad + W] = x.transpose(1, 0, 2, 3)
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, B, Ho, Wo))
    for i in range(k):
        for j in range(k):
            win = xt[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
            out += np.tensordot(K[:, :, i, j], win, axes=(1, 0))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), xt


def _conv_input_grad(g, K, x_shape, stride, pad):
    """Adjoint of the convolution with respect to its input."""
    B, C, H, W = x_shape
    k = K.shape[2]
    Ho, Wo = g.shape[2], g.shape[3]
    gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
    dxt = np.zeros((C, B, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxt[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += \
                np.tensordot(K[:, :, i, j].T, gt, axes=(1, 0))
    return np.ascontiguousarray(dxt[:, :, pad:pad + H, pad:pad + W].transpose(1, 0, 2, 3))


def _conv_kernel_grad(g, xt, K_shape, stride):
    O, C, k, _ = K_shape
    Ho, Wo = g.shape[2], g.shape[3]
    gt = g.transpose(1, 0, 2, 3)
    gK = np.empty(K_shape)
    for i in range(k):
        for j in range(k):
            win = xt[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
            gK[:, :, i, j] = np.tensordot(gt, win, axes=([1, 2, 3], [1, 2, 3]))
    return gK


def _check_conv(K, stride, pad):
    if K.shape[2] % 2 == 0:
        raise ShapeError("conv2d: kernel size must be odd")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")


class _Conv2d(Op):
    name = "conv2d"

    def forward(self, K, x, stride, pad):
        _check_conv(K, stride, pad)
        xb, single = _batched(x)
        out, xt = _conv_forward(xb, K, stride, pad)
        return (out[0] if single else out), xt

    def backward(self, g, xt, xs, out, needs, stride, pad):
        K, x = xs
        xb, single = _batched(x)
        gb = g[None] if single else g
        gK = _conv_kernel_grad(gb, xt, K.shape, stride) if needs[0] else None
        gx = None
        if needs[1]:
            gx = _conv_input_grad(gb, K, xb.shape, stride, pad)
            gx = gx[0] if single else gx
        return gK, gx


class _Conv2dNegT(Op):
    """``-conv2d^T``: same kernel, negated adjoint (stride 1, size preserving)."""

    name = "conv2d_negT"

    def forward(self, K, z, stride, pad):
        _check_conv(K, stride, pad)
        if stride != 1 or 2 * pad != K.shape[2] - 1:
            raise ShapeError("conv2d_negT requires stride 1 and size-preserving padding")
        zb, single = _batched(z)
        if zb.shape[1] != K.shape[0]:
            raise ShapeError(f"conv2d_negT: kernel {K.shape} does not conform with {z.shape}")
        B, _, H, W = zb.shape
        out = -_conv_input_grad(zb, K, (B, K.shape[1], H, W), 1, pad)
        return (out[0] if single else out), None

    def backward(self, g, saved, xs, out, needs, stride, pad):
        K, z = xs
        zb, single = _batched(z)
        gb = g[None] if single else g
        gK = gz = None
        if needs[0]:
            # d<g, -T(K) z>/dK = -(kernel grad of conv2d(K, g) against z)
            B, C, H, W = gb.shape
            gt = np.zeros((C, B, H + 2 * pad, W + 2 * pad))
            gt[:, :, pad:pad + H, pad:pad + W] = gb.transpose(1, 0, 2, 3)
            gK = -_conv_kernel_grad(zb, gt, K.shape, 1)
        if needs[1]:
            gz, _ = _conv_forward(gb, K, 1, pad)
            gz = -(gz[0] if single else gz)
        return gK, gz


def conv2d(K, x, stride: int = 1, pad: int | None = None) -> Tensor:
    """Cross-correlation of ``x`` ([B,]C,H,W) with kernel ``K`` (O,C,k,k)."""
    K = as_tensor(K)
    if pad is None:
        pad = K.shape[2] // 2
    return apply("conv2d", K, x, stride=int(stride), pad=int(pad))


def conv2d_negT(K, z, stride: int = 1, pad: int | None = None) -> Tensor:
    """Negated adjoint of :func:`conv2d`, sharing its kernel."""
    K = as_tensor(K)
    if pad is None:
        pad = K.shape[2] // 2
    return apply("conv2d_negT", K, z, stride=int(stride), pad=int(pad))


# ---------------------------------------------------------------------------
# pooling and normalization


def average_pool(x) -> Tensor:
    """Global spatial mean: (..., C, H, W) -> (..., C)."""
    return mean(x, axis=(-2, -1))


class _AvgPool2d(Op):
    name = "avg_pool2d"

    def forward(self, x, k):
        B, C, H, W = x.shape
        if H % k or W % k:
            raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {k}")
        return x.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5)), None

    def backward(self, g, saved, xs, out, needs, k):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (g,)


def avg_pool2d(x, k: int) -> Tensor:
    return apply("avg_pool2d", x, k=int(k))


class _BatchNorm(Op):
    """Per-channel normalization over all axes but axis 1.

    With ``stats`` given the normalization uses those frozen (mean, var);
    otherwise batch statistics are used and differentiated through.
    """

    name = "batch_norm"

    def forward(self, x, weight, bias, eps, stats=None):
        axes = tuple(i for i in range(x.ndim) if i != 1)
        shape = [1] * x.ndim
        shape[1] = x.shape[1]
        if stats is None:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mu, var = stats
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
        out = xhat * weight.reshape(shape) + bias.reshape(shape)
        return out, (xhat, inv, mu, var)

    def backward(self, g, saved, xs, out, needs, eps, stats=None):
        x, weight, _ = xs
        xhat, inv, _, _ = saved
        axes = tuple(i for i in range(x.ndim) if i != 1)
        shape = [1] * x.ndim
        shape[1] = x.shape[1]
        gw = (g * xhat).sum(axis=axes) if needs[1] else None
        gb = g.sum(axis=axes) if needs[2] else None
        gx = None
        if needs[0]:
            gxhat = g * weight.reshape(shape)
            if stats is not None:
                gx = gxhat * inv.reshape(shape)
            else:
                m1 = gxhat.mean(axis=axes).reshape(shape)
                m2 = (gxhat * xhat).mean(axis=axes).reshape(shape)
                gx = (gxhat - m1 - xhat * m2) * inv.reshape(shape)
        return gx, gw, gb


def batch_norm(x, weight, bias, eps: float = 1e-5, stats=None) -> Tensor:
    return apply("batch_norm", x, weight, bias, eps=float(eps), stats=stats)


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = tuple(i for i in range(x.ndim) if i != 1)
    return x.mean(axis=axes), x.var(axis=axes)


# ---------------------------------------------------------------------------
# losses on logits (..., C); labels are integer arrays of shape (...)


def _labels(labels, logits: np.ndarray) -> np.ndarray:
    y = np.asarray(labels, dtype=np.intp)
    C = logits.shape[-1]
    if y.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {y.shape} do not match logits {logits.shape}")
    if np.any(y < 0) or np.any(y >= C):
        raise ValueError(f"label out of range [0, {C})")
    return y


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


class _CrossEntropy(Op):
    name = "cross_entropy"

    def forward(self, z, labels):
        lsm = log_softmax(z)
        return -np.take_along_axis(lsm, labels[..., None], axis=-1)[..., 0], lsm

    def backward(self, g, lsm, xs, out, needs, labels):
        p = np.exp(lsm)
        np.put_along_axis(p, labels[..., None],
                          np.take_along_axis(p, labels[..., None], axis=-1) - 1.0, axis=-1)
        return (p * g[..., None],)


def cross_entropy_logits(logits, labels) -> Tensor:
    """``-log softmax(logits)[label]`` per example, max-shift stabilized."""
    logits = as_tensor(logits)
    if logits.shape[-1] < 2:
        raise ShapeError("cross_entropy_logits needs at least two classes")
    return apply("cross_entropy", logits, labels=_labels(labels, logits.data))


class _KL(Op):
    name = "kl"

    def forward(self, za, zn):
        lq, lp = log_softmax(za), log_softmax(zn)
        p = np.exp(lp)
        kl = (p * (lp - lq)).sum(axis=-1)
        return np.maximum(kl, 0.0), (lq, lp, kl)

    def backward(self, g, saved, xs, out, needs):
        lq, lp, kl = saved
        p, q = np.exp(lp), np.exp(lq)
        ge = g[..., None]
        ga = (q - p) * ge if needs[0] else None
        gn = p * (lp - lq - kl[..., None]) * ge if needs[1] else None
        return ga, gn


def kl_consistency(logits_adv, logits_nat) -> Tensor:
    """``KL(softmax(nat) || softmax(adv))`` per example."""
    a, n = as_tensor(logits_adv), as_tensor(logits_nat)
    if a.shape != n.shape:
        raise ShapeError(f"kl_consistency: {a.shape} vs {n.shape}")
    return apply("kl", a, n)


def _runner_up(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    masked = z.copy()
    np.put_along_axis(masked, labels[..., None], -np.inf, axis=-1)
    return masked.argmax(axis=-1)


class _CWMargin(Op):
    name = "cw_margin"

    def forward(self, z, labels):
        other = _runner_up(z, labels)
        true = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
        best = np.take_along_axis(z, other[..., None], axis=-1)[..., 0]
        return true - best, other

    def backward(self, g, other, xs, out, needs, labels):
        gz = np.zeros_like(xs[0])
        np.put_along_axis(gz, labels[..., None], g[..., None], axis=-1)
        np.put_along_axis(gz, other[..., None], -g[..., None], axis=-1)
        return (gz,)


def cw_margin(logits, labels) -> Tensor:
    """True-class logit minus best other logit; negative iff misclassified."""
    logits = as_tensor(logits)
    if logits.shape[-1] < 2:
        raise ShapeError("cw_margin needs at least two classes")
    return apply("cw_margin", logits, labels=_labels(labels, logits.data))


def predict_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax with ties resolved to the lowest index."""
    return np.asarray(logits).argmax(axis=-1)
