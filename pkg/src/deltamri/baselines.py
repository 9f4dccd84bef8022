"""Comparison reconstructions: zero-filled inverse DFT and temporal CS-MRI.

Temporal CS-MRI solves::

    min_x ||d2 - S F x||^2 + lam1 ||diag(w) (x1_hat - x)||_1 + lam2 ||Psi x||_1

with ``Psi`` the orthonormal Daubechies-4 transform, by ADMM with the two
splittings ``z1 = x`` and ``z2 = Psi x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import dft_forward, dft_inverse
from .kspace import KSpaceMeasurement, zero_fill
from .warp import RigidParams, warp_apply
from .wavelets import check_levels, dwt_forward, dwt_inverse

LAMBDA1_SCALE = 5.85e-9
LAMBDA2_SCALE = 3.63e-10
SUPPORT_EPS = 1e-6


class TcsError(RuntimeError):
    pass


def z_idft(m: KSpaceMeasurement) -> np.ndarray:
    """Magnitude of the inverse DFT of zero-filled k-space."""
    return np.abs(dft_inverse(zero_fill(m)))


def soft_threshold(z, tau):
    """Complex soft-thresholding ``z * max(0, 1 - tau / |z|)``.

    ``tau`` may be a scalar or an array broadcastable against ``z``.
    """
    z = np.asarray(z)
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0):
        raise ValueError("threshold must be nonnegative")
    mag = np.abs(z)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        scale = np.where(mag > tau, 1.0 - tau / np.where(mag > 0, mag, 1.0), 0.0)
    return z * scale


def default_tcs_lambdas(m: KSpaceMeasurement) -> tuple[float, float]:
    e = m.energy()
    return LAMBDA1_SCALE * e, LAMBDA2_SCALE * e


def support_weights(v_true, invert: bool = True, eps: float = SUPPORT_EPS) -> np.ndarray:
    """Binary weights from the support of a displacement field.

    A voxel is in the support when ``|v(voxel)| > eps``. With ``invert`` the
    complement is returned, i.e. similarity to the reference is enforced
    only where nothing moved.
    """
    v = np.asarray(v_true, dtype=np.float64)
    support = np.linalg.norm(v, axis=-1) > eps
    return (~support if invert else support).astype(np.float64)


def align_reference(x1_hat, p: RigidParams) -> np.ndarray:
    """Rigidly warp a complex reference (real and imaginary parts separately)."""
    x1_hat = np.asarray(x1_hat)
    if p.is_zero():
        return x1_hat.astype(np.complex128)
    return warp_apply(x1_hat.real, p) + 1j * warp_apply(x1_hat.imag, p)


@dataclass
class TcsProblem:
    x1_hat: np.ndarray
    measurement: KSpaceMeasurement
    w: np.ndarray
    lambda1: float
    lambda2: float
    wavelet_levels: int = 3

    def __post_init__(self):
        self.x1_hat = np.asarray(self.x1_hat, dtype=np.complex128)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.x1_hat.shape != self.measurement.shape or self.w.shape != self.x1_hat.shape:
            raise ValueError("reference, weights and measurement shapes disagree")
        if self.lambda1 < 0 or self.lambda2 < 0 or np.any(self.w < 0):
            raise ValueError("weights and lambdas must be nonnegative")
        check_levels(self.x1_hat.shape, self.wavelet_levels)

    def objective(self, x) -> float:
        res = dft_forward(x).ravel()[self.measurement.mask.indices] - self.measurement.values
        val = float(np.vdot(res, res).real)
        val += self.lambda1 * float(np.sum(self.w * np.abs(self.x1_hat - x)))
        val += self.lambda2 * float(np.sum(np.abs(dwt_forward(x, self.wavelet_levels))))
        return val


@dataclass
class TcsResult:
    x: np.ndarray
    objective: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    rho: float = 1.0
    # scaled duals, kept for optimality checks
    u1: np.ndarray | None = None
    u2: np.ndarray | None = None
    z1: np.ndarray | None = None
    z2: np.ndarray | None = None


def tcs_solve(problem: TcsProblem, max_iters: int = 300, tol: float = 1e-5,
              rho: float = 1.0, adaptive_rho: bool = True, x0=None) -> TcsResult:
    """Two-split ADMM for the temporal CS-MRI objective.

    The x-update is exact in k-space: the normal operator
    ``2 S^T S + 2 rho I`` is diagonal there because ``Psi`` is orthonormal.
    Stops when the primal and dual residuals drop below ``tol`` relative to
    the iterate and dual scales. With ``adaptive_rho`` the penalty is
    rebalanced when one residual exceeds the other tenfold.
    """
    lv = problem.wavelet_levels
    m = problem.measurement
    idx = m.mask.indices
    sampled = m.mask.selected
    d_full = zero_fill(m)
    x = dft_inverse(d_full) if x0 is None else np.asarray(x0, dtype=np.complex128).copy()
    z1 = x.copy()
    z2 = dwt_forward(x, lv)
    u1 = np.zeros_like(x)
    u2 = np.zeros_like(z2)
    thr1 = problem.lambda1 * problem.w
    result = TcsResult(x, [problem.objective(x)])
    for k in range(1, max_iters + 1):
        rhs = dft_forward(z1 - u1 + dwt_inverse(z2 - u2, lv))
        X = np.where(sampled, (2.0 * d_full + rho * rhs) / (2.0 + 2.0 * rho), rhs / 2.0)
        x = dft_inverse(X)
        px = dwt_forward(x, lv)
        z1_old, z2_old = z1, z2
        z1 = problem.x1_hat + soft_threshold(x + u1 - problem.x1_hat, thr1 / rho)
        z2 = soft_threshold(px + u2, problem.lambda2 / rho)
        u1 = u1 + x - z1
        u2 = u2 + px - z2
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u1)) and np.all(np.isfinite(u2))):
            raise TcsError(f"non-finite ADMM iterate at iteration {k}")
        r_pri = np.sqrt(_sq(x - z1) + _sq(px - z2))
        r_dual = rho * np.sqrt(_sq(z1 - z1_old + dwt_inverse(z2 - z2_old, lv)))
        eps_pri = tol * max(np.sqrt(2.0 * _sq(x)), np.sqrt(_sq(z1) + _sq(z2)), 1e-300)
        eps_dual = tol * max(rho * np.sqrt(_sq(u1 + dwt_inverse(u2, lv))), 1e-300)
        result.objective.append(problem.objective(x))
        result.iterations = k
        if r_pri <= eps_pri and r_dual <= eps_dual:
            result.converged = True
            break
        if adaptive_rho:
            if r_pri > 10 * r_dual:
                rho *= 2.0
                u1, u2 = u1 / 2.0, u2 / 2.0
            elif r_dual > 10 * r_pri:
                rho /= 2.0
                u1, u2 = u1 * 2.0, u2 * 2.0
    result.x = x
    result.rho = rho
    result.u1, result.u2, result.z1, result.z2 = u1, u2, z1, z2
    return result


def _sq(a) -> float:
    return float(np.vdot(a, a).real)
