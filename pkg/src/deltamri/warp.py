"""Rigid + deformable image warping with exact adjoints and Jacobians.

The warp is a backward (pull) map. For an output voxel ``y``::

    W(r, theta, t, v)(y) = r(s(y)),   s(y) = R(theta)^T (y + v(y) - c - t) + c

i.e. ``r`` sampled at ``rho^-1(y + v(y))`` with ``rho(x) = R (x - c) + c + t``
and ``c`` the grid center. ``R = Rz(theta_3) Ry(theta_2) Rx(theta_1)`` in 3D,
where x, y, z are array axes 0, 1, 2; in 2D a single angle rotates the
(axis 0, axis 1) plane. Samples use multilinear interpolation and the image
is zero outside the grid, so ``W`` is linear in ``r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _interp
from .core import grid_center, grid_coordinates

THETA_BOUND = 0.3
T_BOUND = 20.0


class InversionError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3g} voxel)")
        self.residual = residual


def n_angles(rank: int) -> int:
    return 1 if rank == 2 else 3


@dataclass(frozen=True)
class RigidParams:
    """Rotation angles (radians) and translation (voxels) with box bounds.

    ``lower``/``upper`` are bounds on the packed vector ``[theta..., t...]``.
    """

    theta: np.ndarray
    t: np.ndarray
    lower: np.ndarray = field(default=None, repr=False)
    upper: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=np.float64)).copy()
        t = np.atleast_1d(np.asarray(self.t, dtype=np.float64)).copy()
        rank = t.size
        if rank not in (2, 3) or theta.size != n_angles(rank):
            raise ValueError(
                f"need {n_angles(rank) if rank in (2, 3) else '1 or 3'} angles "
                f"and 2 or 3 translations, got {theta.size} and {t.size}"
            )
        lo, hi = default_bounds(rank)
        lower = lo if self.lower is None else np.asarray(self.lower, dtype=np.float64).copy()
        upper = hi if self.upper is None else np.asarray(self.upper, dtype=np.float64).copy()
        if lower.shape != lo.shape or upper.shape != hi.shape or np.any(lower > upper):
            raise ValueError("invalid rigid bounds")
        for name, val in (("theta", theta), ("t", t), ("lower", lower), ("upper", upper)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def zeros(cls, rank: int, lower=None, upper=None) -> "RigidParams":
        return cls(np.zeros(n_angles(rank)), np.zeros(rank), lower, upper)

    @classmethod
    def from_vector(cls, vec, rank: int, lower=None, upper=None) -> "RigidParams":
        vec = np.asarray(vec, dtype=np.float64)
        k = n_angles(rank)
        return cls(vec[:k], vec[k:], lower, upper)

    @property
    def rank(self) -> int:
        return self.t.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.t])

    def within_bounds(self) -> bool:
        x = self.as_vector()
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def clipped(self) -> "RigidParams":
        x = np.clip(self.as_vector(), self.lower, self.upper)
        return RigidParams.from_vector(x, self.rank, self.lower, self.upper)

    def is_zero(self) -> bool:
        return not np.any(self.theta) and not np.any(self.t)

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "t": self.t.tolist(),
                "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidParams":
        return cls(d["theta"], d["t"], d.get("lower"), d.get("upper"))


def default_bounds(rank: int) -> tuple[np.ndarray, np.ndarray]:
    k = n_angles(rank)
    hi = np.concatenate([np.full(k, THETA_BOUND), np.full(rank, T_BOUND)])
    return -hi, hi


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def rotation_matrix(theta) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    if theta.size == 1:
        c, s = np.cos(theta[0]), np.sin(theta[0])
        return np.array([[c, -s], [s, c]])
    return _rz(theta[2]) @ _ry(theta[1]) @ _rx(theta[0])


def rotation_derivatives(theta) -> list[np.ndarray]:
    """dR/dtheta_k for each angle."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    if theta.size == 1:
        c, s = np.cos(theta[0]), np.sin(theta[0])
        return [np.array([[-s, -c], [c, -s]])]
    x, y, z = theta
    return [
        _rz(z) @ _ry(y) @ _drx(x),
        _rz(z) @ _dry(y) @ _rx(x),
        _drz(z) @ _ry(y) @ _rx(x),
    ]


def _check(r, p: RigidParams, v):
    r = np.asarray(r)
    if r.ndim not in (2, 3):
        raise ValueError(f"image must be 2D or 3D, got shape {r.shape}")
    if p.rank != r.ndim:
        raise ValueError(f"rigid parameters are {p.rank}D but image is {r.ndim}D")
    if v is not None:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != r.shape + (r.ndim,):
            raise ValueError(f"field shape {v.shape} does not match image {r.shape}")
    return r, v


def _offsets(shape, p: RigidParams, v):
    """Points y + v(y) - c - t, flattened to (N, rank)."""
    rank = len(shape)
    y = grid_coordinates(shape).reshape(-1, rank)
    if v is not None:
        y = y + v.reshape(-1, rank)
    return y - grid_center(shape) - p.t


def sample_points(shape, p: RigidParams, v=None) -> np.ndarray:
    """Pull coordinates s(y) for every output voxel, shape (N, rank)."""
    q = _offsets(shape, p, v)
    R = rotation_matrix(p.theta)
    # row form of R^T q
    return q @ R + grid_center(shape)


def warp_apply(r, p: RigidParams, v=None) -> np.ndarray:
    r, v = _check(r, p, v)
    vals, _ = _interp.sample(r, sample_points(r.shape, p, v))
    return vals.reshape(r.shape)


def warp_adjoint(g, p: RigidParams, v=None) -> np.ndarray:
    """Adjoint of ``r -> warp_apply(r, p, v)`` at fixed (p, v)."""
    g, v = _check(g, p, v)
    return _interp.splat(g, sample_points(g.shape, p, v), g.shape)


def _weighted_gradient(r, p, v, g):
    r, v = _check(r, p, v)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != r.shape:
        raise ValueError(f"cotangent shape {g.shape} does not match image {r.shape}")
    q = _offsets(r.shape, p, v)
    R = rotation_matrix(p.theta)
    _, grad = _interp.sample(r, q @ R + grid_center(r.shape), want_grad=True)
    return grad * g.reshape(-1, 1), q, R


def warp_jacobian_v(r, p: RigidParams, v, g) -> np.ndarray:
    """Gradient of ``<warp_apply(r, p, v), g>`` with respect to ``v``."""
    gu, _, R = _weighted_gradient(r, p, v, g)
    r = np.asarray(r)
    # ds/dv = R^T, so the pullback is R (g grad r); row form uses R^T
    return (gu @ R.T).reshape(r.shape + (r.ndim,))


def warp_jacobian_rigid(r, p: RigidParams, v, g) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``<warp_apply(r, p, v), g>`` with respect to (theta, t)."""
    gu, q, R = _weighted_gradient(r, p, v, g)
    grad_t = -(gu.sum(axis=0) @ R.T)
    grad_theta = np.array([np.sum(gu * (q @ dR)) for dR in rotation_derivatives(p.theta)])
    return grad_theta, grad_t


def _field_at(v, pts):
    """Multilinear sample of every field component, clamped at the borders."""
    rank = v.shape[-1]
    coords = pts.T
    return np.stack(
        [ndimage.map_coordinates(v[..., a], coords, order=1, mode="nearest")
         for a in range(rank)], axis=-1)


def _pull_displacement(shape, p: RigidParams, v, pts):
    """s(z) - z for arbitrary points z."""
    q = pts
    if v is not None:
        q = q + _field_at(v, pts)
    R = rotation_matrix(p.theta)
    c = grid_center(shape)
    return (q - c - p.t) @ R + c - pts


def invert_map(p: RigidParams, v=None, iters: int = 20, shape=None, tol: float = 0.1):
    """Invert the pull map of :func:`warp_apply` by fixed-point iteration.

    Returns ``(u, residual)`` with ``u`` of shape ``(*dims, rank)`` such that
    ``s(x + u(x)) ~= x`` on the grid, where ``s`` is the pull map of the warp.
    Pulling an image through ``u`` therefore undoes ``warp_apply``:
    ``warp_apply(pull(f, u), p, v) ~= f``. ``residual`` is
    ``max_x |s(x + u(x)) - x|`` in voxels; a residual above ``tol`` raises
    :class:`InversionError` (the field folds, or ``iters`` is too small).
    """
    if v is not None:
        v = np.asarray(v, dtype=np.float64)
        shape = v.shape[:-1]
    if shape is None:
        raise ValueError("shape is required when v is None")
    shape = tuple(shape)
    rank = len(shape)
    if p.rank != rank:
        raise ValueError(f"rigid parameters are {p.rank}D but grid is {rank}D")
    x = grid_coordinates(shape).reshape(-1, rank)
    u = np.zeros_like(x)
    if p.is_zero() and (v is None or not np.any(v)):
        return u.reshape(shape + (rank,)), 0.0
    history = []
    for _ in range(iters):
        u_next = -_pull_displacement(shape, p, v, x + u)
        res = float(np.max(np.linalg.norm(u_next - u, axis=1)))
        u = u_next
        if not np.isfinite(res):
            raise InversionError("inverse map iteration produced non-finite values", res)
        history.append(res)
        if len(history) >= 4 and res > 1e-12 and all(
                history[-k] > history[-k - 1] for k in (1, 2, 3)):
            raise InversionError("inverse map iteration diverges", res)
        if res == 0.0:
            break
    residual = float(np.max(np.linalg.norm(u + _pull_displacement(shape, p, v, x + u), axis=1)))
    if len(history) > 1 and residual > history[0]:
        raise InversionError("inverse map iteration diverges", residual)
    if residual > tol:
        raise InversionError(
            f"inverse map did not converge (residual {residual:.3g} voxel)", residual)
    return u.reshape(shape + (rank,)), residual


def pull(f, u) -> np.ndarray:
    """Resample ``f`` at ``x + u(x)`` (pure displacement warp, zero outside)."""
    f = np.asarray(f, dtype=np.float64)
    return warp_apply(f, RigidParams.zeros(f.ndim), u)
