"""Stability checks for the skew-symmetric block.

The joint state is ordered ``(x, z)``. For a kernel ``W`` (m x n) the
linear generator is ``A = [[0, -W^T], [W, 0]]`` and the Jacobian of the
damped field is ``J = D (A - gamma I)`` with ``D`` the diagonal of activation
slopes at the current pre-activations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .blocks import SkewOdeBlockParams, skew_block_integrate
from .functional import as_activation
from .solvers import SolverConfig

MAX_DIM = 4096


class MatrixTooLarge(ValueError):
    pass


@dataclass
class BlockMatrix:
    A: np.ndarray
    n: int  # size of x
    m: int  # size of z

    @property
    def W(self) -> np.ndarray:
        return self.A[self.n:, :self.n]


def kernel_matrix(W, input_shape=None) -> np.ndarray:
    """Dense matrix of ``x -> W x``; a conv kernel is materialized on ``input_shape``."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 2:
        return W
    if W.ndim != 4 or input_shape is None:
        raise ValueError("conv kernels need input_shape (c, h, w) to be materialized")
    c, h, w = input_shape
    n = c * h * w
    out_n = W.shape[0] * h * w
    if n + out_n > MAX_DIM:
        raise MatrixTooLarge(f"block matrix of size {n + out_n} exceeds {MAX_DIM}")
    basis = np.eye(n).reshape(n, c, h, w)
    return F.conv2d(W, basis).data.reshape(n, -1).T


def build_block_matrix(W, input_shape=None) -> BlockMatrix:
    """``[[0, -W^T], [W, 0]]`` assembled by placement, so ``A + A^T`` is exactly zero."""
    M = kernel_matrix(W, input_shape)
    m, n = M.shape
    if m + n > MAX_DIM:
        raise MatrixTooLarge(f"block matrix of size {m + n} exceeds {MAX_DIM}")
    A = np.zeros((n + m, n + m))
    A[:n, n:] = -M.T
    A[n:, :n] = M
    return BlockMatrix(A, n, m)


def pre_activations(W, x, z, gamma: float) -> np.ndarray:
    """Stacked ``(-W^T z - g x, W x - g z)`` for a dense kernel."""
    W = np.asarray(W, dtype=np.float64)
    x, z = np.asarray(x, dtype=np.float64), np.asarray(z, dtype=np.float64)
    return np.concatenate([-W.T @ z - gamma * x, W @ x - gamma * z])


def jacobian_parts(params: SkewOdeBlockParams, x, z):
    """``(J, D, A)`` at the state ``(x, z)`` for a dense-kernel block."""
    act = as_activation(params.activation)
    blk = build_block_matrix(params.kernel)
    d = act.derivative(pre_activations(params.kernel, x, z, params.gamma))
    J = d[:, None] * (blk.A - params.gamma * np.eye(len(d)))
    return J, d, blk.A


def block_jacobian(params: SkewOdeBlockParams, x, z) -> np.ndarray:
    return jacobian_parts(params, x, z)[0]


def jacobi_eigenvalues(M, tol: float = 1e-10, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.

    Sweeps until the off-diagonal Frobenius norm falls below ``tol``.
    """
    a = np.array(M, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("need a square matrix")
    if not np.allclose(a, a.T, atol=1e-12, rtol=0):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = len(a)

    def off(a):
        return float(np.linalg.norm(a - np.diag(np.diag(a))))

    for _ in range(max_sweeps):
        if off(a) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
    else:
        raise RuntimeError(f"Jacobi did not converge in {max_sweeps} sweeps")
    return np.sort(np.diag(a))


@dataclass
class SpectralCertificate:
    gamma: float
    min_sigma_prime: float
    abscissa_bound: float
    max_symmetric_eigenvalue: float
    verdict: str  # stable, marginal, unstable or ineligible

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def spectral_abscissa_bound(J, D, gamma: float) -> SpectralCertificate:
    """Certify ``Re lambda(J) <= -gamma * min(D)``.

    ``J = D (A - g I)`` is similar to ``S = D^{1/2} (A - g I) D^{1/2}``, whose
    symmetric part is ``-g D`` because ``A`` is skew. The symmetric part is
    recomputed from ``J`` and diagonalized by Jacobi as an independent check.
    """
    d = np.asarray(D, dtype=np.float64)
    if d.ndim == 2:
        d = np.diag(d)
    if np.any(d <= 0):
        return SpectralCertificate(gamma, float(d.min()), math.nan, math.nan, "ineligible")
    bound = -gamma * float(d.min())
    sq = np.sqrt(d)
    S = sq[:, None] * (np.asarray(J) / d[:, None]) * sq[None, :]
    top = float(jacobi_eigenvalues(0.5 * (S + S.T))[-1])
    verdict = "stable" if bound < 0 else ("marginal" if bound == 0 else "unstable")
    return SpectralCertificate(gamma, float(d.min()), bound, top, verdict)


def certify(params: SkewOdeBlockParams, x, z) -> SpectralCertificate:
    J, d, _ = jacobian_parts(params, x, z)
    if not params.activation.eligible:
        cert = spectral_abscissa_bound(J, d, params.gamma)
        cert.verdict = "ineligible"
        return cert
    return spectral_abscissa_bound(J, d, params.gamma)


def _linear_flow(W, x0, z0, t: float, tol: float):
    solver = SolverConfig("dopri5", tol=tol)
    x1, z1, _ = skew_block_integrate(np.asarray(W, dtype=np.float64), 0.0, "identity",
                                     np.atleast_2d(x0), np.atleast_2d(z0), solver, t)
    return x1.data, z1.data


def transition_matrix(W, t: float = 1.0, tol: float = 1e-9) -> np.ndarray:
    """Columns are the linear flow of each canonical basis vector of ``(x, z)``."""
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    E = np.eye(n + m)
    x1, z1 = _linear_flow(W, E[:, :n], E[:, n:], t, tol)
    return np.concatenate([x1, z1], axis=1).T


def transition_orthogonality_check(W, t: float = 1.0, tol: float = 1e-9) -> float:
    """``max |Phi^T Phi - I|`` for the undamped linear block."""
    Phi = transition_matrix(W, t, tol)
    return float(np.abs(Phi.T @ Phi - np.eye(len(Phi))).max())


def linear_state_norms(W, x0, z0, times, tol: float = 1e-9) -> list[dict]:
    """``||x(t)||`` and ``||(x(t), z(t))||`` of the undamped linear block at each time."""
    rows = []
    for t in times:
        x1, z1 = _linear_flow(W, x0, z0, float(t), tol)
        rows.append({"t": float(t), "x_norm": float(np.linalg.norm(x1)),
                     "joint_norm": float(math.hypot(np.linalg.norm(x1), np.linalg.norm(z1)))})
    return rows


def lyapunov_probe(params: SkewOdeBlockParams, x0, radii, horizons, samples: int = 64,
                   solver: SolverConfig | None = None, seed: int = 0) -> list[dict]:
    """Max output deviation over random perturbations of norm ``radius``.

    ``x0`` is a single unbatched input; the output is ``z(t0)`` of the block.
    The same unit directions are reused for every radius and horizon.
    """
    solver = solver or SolverConfig("dopri5", tol=1e-6)
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((samples,) + x0.shape)
    u /= np.sqrt((u.reshape(samples, -1) ** 2).sum(axis=1)).reshape((samples,) + (1,) * x0.ndim)
    rows = []
    for t0 in horizons:
        for eps in radii:
            # base point rides in the same batch so eps=0 is exactly zero
            out = _block_output(params, np.concatenate([x0[None], x0[None] + eps * u]),
                                solver, t0)
            dev = np.sqrt(((out[1:] - out[:1]) ** 2).reshape(samples, -1).sum(axis=1))
            rows.append({"radius": float(eps), "horizon": float(t0),
                         "max_deviation": float(dev.max())})
    return rows


def _block_output(params, xb, solver, t_end):
    z0 = xb if params.block_kind == "feature" else np.ones((len(xb), params.kernel.shape[0]))
    _, z1, _ = skew_block_integrate(params.kernel, params.gamma, params.activation, xb, z0,
                                    solver, t_end)
    return z1.data
