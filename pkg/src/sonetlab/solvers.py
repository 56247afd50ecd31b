"""Differentiable ODE integrators: Euler, RK4 and Dormand-Prince 5(4).

Every integrator works on :class:`~sonetlab.tensor.Tensor` states, so a solve
recorded on a tape can be differentiated by unrolling. For the adaptive
solver the accepted step sizes enter the tape as constants unless
``SolverConfig.step_gradients`` asks for the controller to be recorded.

With ``batched=True`` the leading axis of the state indexes independent
trajectories: each one gets its own error norm, step size and trace, and the
result for one example never depends on the rest of the batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction as Fr
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

VectorField = Callable[[np.ndarray, Tensor], Tensor]

METHODS = ("euler", "rk4", "dopri5", "euler_sequential")


class DivergedError(RuntimeError):
    """Integration produced a non-finite state or could not make progress."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    h: float = 1.0
    tol: float = 0.1
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0
    max_steps: int = 10000
    # differentiate through the step-size controller instead of freezing steps
    step_gradients: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver {self.method!r}; choose from {METHODS}")
        if self.method == "dopri5" and not self.tol > 0:
            raise ValueError("dopri5 needs tol > 0")
        if self.method != "dopri5" and not self.h > 0:
            raise ValueError("fixed-step solvers need h > 0")

    @property
    def label(self) -> str:
        if self.method == "dopri5":
            return f"dopri5(tol={self.tol:g}{', diff-steps' if self.step_gradients else ''})"
        return f"{self.method}(h={self.h:g})"


@dataclass
class StepTrace:
    accepted_times: list[float] = field(default_factory=list)
    rejected_count: int = 0
    rhs_evaluations: int = 0
    probe_evaluations: int = 0
    method: str = ""
    tol: float | None = None

    @property
    def accepted_steps(self) -> int:
        return max(len(self.accepted_times) - 1, 0)

    def to_json(self, **extra) -> str:
        row = {"tol": self.tol, "accepted_times": self.accepted_times,
               "rejected": self.rejected_count}
        row.update(extra)
        return json.dumps(row)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# helpers


def _check_span(t0: float, t1: float) -> None:
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")


def _as_batch(y0, batched: bool) -> Tensor:
    y0 = T.as_tensor(y0)
    return y0 if batched else T.reshape(y0, (1,) + y0.shape)


def _prepare(f, y0, batched: bool):
    """Batch the state and wrap ``f`` so it always sees its natural shape.

    Batched fields receive ``t`` as an array with one entry per trajectory;
    unbatched fields receive a float.
    """
    y = _as_batch(y0, batched)
    if batched:
        return y, f
    shape = y.shape[1:]

    def fb(t, yb):
        return T.reshape(f(float(t[0]), T.reshape(yb, shape)), (1,) + shape)

    return y, fb


def _unbatch(y: Tensor, batched: bool) -> Tensor:
    return y if batched else T.reshape(y, y.shape[1:])


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - 1))


def _finite(y: Tensor) -> bool:
    return bool(np.isfinite(y.data).all())


def _fixed_grid(t0: float, t1: float, h: float) -> list[float]:
    n = max(1, math.ceil((t1 - t0) / h - 1e-12))
    ts = [t0 + i * h for i in range(n)] + [t1]
    return ts


def _traces(n: int, method: str, t0: float, tol=None) -> list[StepTrace]:
    return [StepTrace([float(t0)], method=method, tol=tol) for _ in range(n)]


def _result(y: Tensor, traces: list[StepTrace], batched: bool):
    return _unbatch(y, batched), (traces if batched else traces[0])


# ---------------------------------------------------------------------------
# fixed step


def euler_integrate(f: VectorField, y0, t0: float, t1: float, h: float,
                    batched: bool = False):
    """Explicit Euler with ``ceil((t1-t0)/h)`` steps, last one truncated."""
    _check_span(t0, t1)
    y, f = _prepare(f, y0, batched)
    B = y.shape[0]
    traces = _traces(B, "euler", t0)
    grid = _fixed_grid(t0, t1, h)
    for ta, tb in zip(grid[:-1], grid[1:]):
        y = y + (tb - ta) * f(np.full(B, ta), y)
        for tr in traces:
            tr.accepted_times.append(tb)
            tr.rhs_evaluations += 1
        if not _finite(y):
            raise DivergedError(f"euler diverged at t={tb}", traces)
    return _result(y, traces, batched)


def rk4_integrate(f: VectorField, y0, t0: float, t1: float, h: float,
                  batched: bool = False):
    """Classical four-stage Runge-Kutta on a fixed grid."""
    _check_span(t0, t1)
    y, f = _prepare(f, y0, batched)
    B = y.shape[0]
    traces = _traces(B, "rk4", t0)
    grid = _fixed_grid(t0, t1, h)
    for ta, tb in zip(grid[:-1], grid[1:]):
        dt = tb - ta
        k1 = f(np.full(B, ta), y)
        k2 = f(np.full(B, ta + dt / 2), y + (dt / 2) * k1)
        k3 = f(np.full(B, ta + dt / 2), y + (dt / 2) * k2)
        k4 = f(np.full(B, tb), y + dt * k3)
        y = y + (dt / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for tr in traces:
            tr.accepted_times.append(tb)
            tr.rhs_evaluations += 4
        if not _finite(y):
            raise DivergedError(f"rk4 diverged at t={tb}", traces)
    return _result(y, traces, batched)


def sequential_euler_integrate(fz, fx, x0, z0, t0: float, t1: float, h: float,
                               batched: bool = False):
    """Gauss-Seidel Euler for a two-part state.

    Each step updates ``z`` first and feeds the new ``z`` into the ``x``
    update: ``z += h*fz(t, x, z)``, then ``x += h*fx(t, x, z_new)``.
    Returns ``(x1, z1, trace)``.
    """
    _check_span(t0, t1)
    x, z = _as_batch(x0, batched), _as_batch(z0, batched)
    B = x.shape[0]
    if not batched:
        fz0, fx0, xs, zs = fz, fx, x.shape[1:], z.shape[1:]

        def fz(t, xb, zb):
            return T.reshape(fz0(float(t[0]), T.reshape(xb, xs), T.reshape(zb, zs)), (1,) + zs)

        def fx(t, xb, zb):
            return T.reshape(fx0(float(t[0]), T.reshape(xb, xs), T.reshape(zb, zs)), (1,) + xs)

    traces = _traces(B, "euler_sequential", t0)
    grid = _fixed_grid(t0, t1, h)
    for ta, tb in zip(grid[:-1], grid[1:]):
        dt = tb - ta
        tt = np.full(B, ta)
        z = z + dt * fz(tt, x, z)
        x = x + dt * fx(tt, x, z)
        for tr in traces:
            tr.accepted_times.append(tb)
            tr.rhs_evaluations += 2
        if not (_finite(x) and _finite(z)):
            raise DivergedError(f"euler_sequential diverged at t={tb}", traces)
    tr = traces if batched else traces[0]
    return _unbatch(x, batched), _unbatch(z, batched), tr


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = [Fr(0), Fr(1, 5), Fr(3, 10), Fr(4, 5), Fr(8, 9), Fr(1), Fr(1)]
_A = [
    [],
    [Fr(1, 5)],
    [Fr(3, 40), Fr(9, 40)],
    [Fr(44, 45), Fr(-56, 15), Fr(32, 9)],
    [Fr(19372, 6561), Fr(-25360, 2187), Fr(64448, 6561), Fr(-212, 729)],
    [Fr(9017, 3168), Fr(-355, 33), Fr(46732, 5247), Fr(49, 176), Fr(-5103, 18656)],
    [Fr(35, 384), Fr(0), Fr(500, 1113), Fr(125, 192), Fr(-2187, 6784), Fr(11, 84)],
]
_B5 = [Fr(35, 384), Fr(0), Fr(500, 1113), Fr(125, 192), Fr(-2187, 6784), Fr(11, 84), Fr(0)]
_B4 = [Fr(5179, 57600), Fr(0), Fr(7571, 16695), Fr(393, 640), Fr(-92097, 339200),
       Fr(187, 2100), Fr(1, 40)]

DOPRI_C = [float(c) for c in _C]
DOPRI_A = [[float(a) for a in row] for row in _A]
DOPRI_B = [float(b) for b in _B5]
DOPRI_E = [float(b - bs) for b, bs in zip(_B5, _B4)]


def error_norm(err, y_old, y_new, tol: float, batched: bool = False):
    """Mixed-tolerance RMS norm with ``rtol = atol = tol``.

    Returns a float, or one value per example when ``batched``.
    """
    err, y_old, y_new = (np.asarray(getattr(a, "data", a), dtype=np.float64)
                         for a in (err, y_old, y_new))
    if not (err.shape == y_old.shape == y_new.shape):
        raise T.ShapeError("error_norm operands must share a shape")
    scale = tol + tol * np.maximum(np.abs(y_old), np.abs(y_new))
    r = (err / scale) ** 2
    if batched:
        return np.sqrt(r.reshape(r.shape[0], -1).mean(axis=1))
    return float(np.sqrt(r.mean())) if r.size else 0.0


def propose_next_step(h, err_norm_value, order: int = 5, safety: float = 0.9,
                      min_factor: float = 0.2, max_factor: float = 10.0):
    """``h * clamp(safety * err**(-1/order), min_factor, max_factor)``."""
    err = np.asarray(err_norm_value, dtype=np.float64)
    with np.errstate(divide="ignore"):
        factor = np.where(err > 0, safety * np.power(np.maximum(err, 1e-300), -1.0 / order),
                          max_factor)
    factor = np.clip(factor, min_factor, max_factor)
    out = np.asarray(h) * factor
    return float(out) if out.ndim == 0 else out


def initial_step_heuristic(f: VectorField, y0, t0: float, tol: float, t1: float | None = None,
                           order: int = 5, batched: bool = False, f0=None):
    """Two-trial starting step (Hairer, Norsett and Wanner, II.4).

    ``f0`` may pass a precomputed ``f(t0, y0)``. A zero field falls back to
    a tenth of the span. Returns ``(h0, probe_evaluations)``.
    """
    y = np.asarray(getattr(y0, "data", y0), dtype=np.float64)
    if not batched:
        y = y[None]
        f0 = None if f0 is None else np.asarray(getattr(f0, "data", f0))[None]
        f = _prepare(f, y0, False)[1]
    B = y.shape[0]
    span = (t1 - t0) if t1 is not None else np.inf
    if f0 is None:
        f0 = f(np.full(B, float(t0)), T.Tensor(y))
    f0 = np.asarray(getattr(f0, "data", f0), dtype=np.float64).reshape(y.shape)
    scale = tol + tol * np.abs(y)

    def rms(v):
        return np.sqrt((v.reshape(B, -1) ** 2).mean(axis=1))

    d0, d1 = rms(y / scale), rms(f0 / scale)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    y1 = y + _bcast(h0, y.ndim) * f0
    f1 = f(t0 + h0, T.Tensor(y1))
    f1 = np.asarray(getattr(f1, "data", f1), dtype=np.float64).reshape(y.shape)
    d2 = rms((f1 - f0) / scale) / h0
    dmax = np.maximum(d1, d2)
    h1 = np.where(dmax <= 1e-15, np.maximum(1e-6, h0 * 1e-3),
                  np.power(0.01 / np.maximum(dmax, 1e-300), 1.0 / order))
    h = np.minimum(100 * h0, h1)
    if t1 is not None:
        h = np.where(d1 == 0.0, span / 10, np.minimum(h, span))
    return (h if batched else float(h[0])), 1


def _rms_t(v: Tensor, B: int) -> Tensor:
    return T.sqrt(T.mean(T.reshape(v * v, (B, -1)), axis=1))


def _safe(mask: np.ndarray, v: Tensor, fill: float = 1.0) -> Tensor:
    """``v`` with masked-out entries replaced, so their gradients stay finite."""
    return T.where(mask, v, fill)


def _initial_step_t(f, y: Tensor, f0: Tensor, t0: float, tol: float, t1: float,
                    order: int = 5) -> Tensor:
    """Tape-recorded twin of :func:`initial_step_heuristic` (batched)."""
    B, nd = y.shape[0], y.ndim
    scale = tol + tol * T.absolute(y)
    d0, d1 = _rms_t(y / scale, B), _rms_t(f0 / scale, B)
    small = (d0.data < 1e-5) | (d1.data < 1e-5)
    h0 = T.where(small, 1e-6, 0.01 * d0 / _safe(~small, d1))
    y1 = y + T.reshape(h0, (B,) + (1,) * (nd - 1)) * f0
    f1 = f(t0 + h0.data, y1)
    d2 = _rms_t((f1 - f0) / scale, B) / h0
    dmax = T.maximum(d1, d2)
    tiny = dmax.data <= 1e-15
    h1 = T.where(tiny, T.maximum(1e-6, h0 * 1e-3),
                 T.power(0.01 / _safe(~tiny, dmax), 1.0 / order))
    h = T.minimum(100.0 * h0, h1)
    span = t1 - t0
    return T.where(d1.data == 0.0, span / 10, T.minimum(h, span))


def _error_norm_t(err: Tensor, y_old: Tensor, y_new: Tensor, tol: float) -> Tensor:
    B = err.shape[0]
    scale = tol + tol * T.maximum(T.absolute(y_old), T.absolute(y_new))
    r = err / scale
    ms = T.mean(T.reshape(r * r, (B, -1)), axis=1)
    pos = ms.data > 0
    return T.where(pos, T.sqrt(_safe(pos, ms)), 0.0)


def _propose_t(dt: Tensor, enorm: Tensor, cfg: SolverConfig, order: int = 5) -> Tensor:
    pos = enorm.data > 0
    factor = cfg.safety * T.power(_safe(pos, enorm), -1.0 / order)
    factor = T.minimum(T.maximum(factor, cfg.min_factor), cfg.max_factor)
    return dt * T.where(pos, factor, cfg.max_factor)


def dopri5_integrate(f: VectorField, y0, t0: float, t1: float, tol: float,
                     batched: bool = False, config: SolverConfig | None = None,
                     h0=None):
    """Adaptive Dormand-Prince 5(4) with FSAL and per-trajectory control.

    A step is accepted when its error norm is at most 1; the 5th-order
    solution is propagated and the last step is clipped to land on ``t1``.
    Step sizes are constants of the recorded computation unless
    ``config.step_gradients`` is set, in which case the starting-step
    heuristic, error norm and controller are recorded too and gradients
    flow through the chosen step sizes. Accept/reject decisions are
    discrete either way.
    """
    _check_span(t0, t1)
    if not tol > 0:
        raise ValueError("tol must be positive")
    cfg = config or SolverConfig("dopri5", tol=tol)
    y, f = _prepare(f, y0, batched)
    B, nd = y.shape[0], y.ndim
    traces = _traces(B, "dopri5", t0, tol)

    t = np.full(B, float(t0))
    k1 = f(t.copy(), y)
    # parameters captured by f put k1 on the tape even when y0 is constant
    diff = cfg.step_gradients and (y.tape is not None or k1.tape is not None)
    for tr in traces:
        tr.rhs_evaluations += 1
    if h0 is not None:
        h = np.broadcast_to(np.asarray(h0, dtype=np.float64), (B,)).copy()
        ht = T.Tensor(h)
    elif diff:
        ht = _initial_step_t(f, y, k1, t0, tol, t1)
        h = ht.data
        for tr in traces:
            tr.probe_evaluations += 1
    else:
        h, probes = initial_step_heuristic(f, y.data, t0, tol, t1, batched=True, f0=k1.data)
        h = np.asarray(h, dtype=np.float64)
        for tr in traces:
            tr.probe_evaluations += probes
    tt = T.Tensor(t.copy())  # recorded time, only used when diff

    h_floor = 1e-12 * (t1 - t0)
    done = np.zeros(B, dtype=bool)
    attempts = 0
    while not done.all():
        attempts += 1
        if attempts > cfg.max_steps:
            raise DivergedError(f"dopri5 exceeded max_steps={cfg.max_steps}", traces)
        active = ~done
        if np.any(h[active] < h_floor):
            raise DivergedError("dopri5 step size underflow", traces)
        last = active & (t + h * (1 + 1e-10) >= t1)
        if diff:
            dt_t = T.where(active, T.where(last, t1 - tt, ht), 0.0)
            dt = dt_t.data
            dtb = T.reshape(dt_t, (B,) + (1,) * (nd - 1))
        else:
            dt = np.where(active, np.where(last, t1 - t, h), 0.0)
            dtb = _bcast(dt, nd)

        ks = [k1]
        for s in range(1, 7):
            incr = None
            for a, k in zip(DOPRI_A[s], ks):
                if a:
                    term = a * k
                    incr = term if incr is None else incr + term
            ys = y + dtb * incr
            ks.append(f(t + DOPRI_C[s] * dt, ys))
        y5 = ys  # row 7 of A equals the 5th-order weights
        if diff:
            err_t = sum(e * k for e, k in zip(DOPRI_E, ks) if e) * dtb
            enorm_t = _error_norm_t(err_t, y, y5, tol)
            enorm = enorm_t.data
        else:
            err = sum(e * k.data for e, k in zip(DOPRI_E, ks) if e) * dtb
            enorm = error_norm(err, y.data, y5.data, tol, batched=True)
        enorm = np.where(np.isfinite(enorm), enorm, np.inf)
        accept = active & (enorm <= 1.0)

        if accept.any():
            y = T.where(_bcast(accept, nd), y5, y) if not accept.all() else y5
            k1 = T.where(_bcast(accept, nd), ks[6], k1) if not accept.all() else ks[6]
        t = np.where(accept, np.where(last, t1, t + dt), t)
        for i in np.flatnonzero(active):
            tr = traces[i]
            tr.rhs_evaluations += 6
            if accept[i]:
                tr.accepted_times.append(float(t[i]))
            else:
                tr.rejected_count += 1
        if diff:
            tt = T.where(accept, T.where(last, t1, tt + dt_t), tt)
            fin = np.isfinite(enorm_t.data)
            ht = T.where(active & fin, _propose_t(_safe(active, dt_t), _safe(fin, enorm_t), cfg),
                         T.where(active, dt_t * cfg.min_factor, ht))
            h = ht.data
        else:
            h = np.where(active, propose_next_step(np.where(active, dt, 1.0), enorm, 5,
                                                   cfg.safety, cfg.min_factor, cfg.max_factor),
                         h)
        done = done | (accept & last)
        if not _finite(y):
            raise DivergedError("dopri5 produced a non-finite state", traces)
    return _result(y, traces, batched)


def integrate(f: VectorField, y0, t0: float, t1: float, config: SolverConfig,
              batched: bool = False):
    """Dispatch on ``config.method``; returns ``(y1, trace)``."""
    if config.method == "euler":
        return euler_integrate(f, y0, t0, t1, config.h, batched)
    if config.method == "rk4":
        return rk4_integrate(f, y0, t0, t1, config.h, batched)
    if config.method == "dopri5":
        return dopri5_integrate(f, y0, t0, t1, config.tol, batched, config)
    raise ValueError("euler_sequential needs a split field; use sequential_euler_integrate")
