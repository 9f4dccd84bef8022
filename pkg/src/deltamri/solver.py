"""Joint rigid + deformation estimation from sub-sampled k-space.

The estimator minimizes::

    || d2 - S F (W(r1_hat, theta, t, v) * exp(i phi2_hat)) ||^2 + lam * R(v)

with ``R(v)`` the squared norm of the forward-difference gradient of ``v``.
The rigid block (theta, t) is solved with bounded L-BFGS-B, the deformation
block with a nonmonotone Barzilai-Borwein gradient method; blocks are swept
cyclically (once by default).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .core import dft_forward, dft_inverse
from .kspace import KSpaceMeasurement, estimate_phase, zero_fill
from .warp import (RigidParams, default_bounds, warp_apply,
                   warp_jacobian_rigid, warp_jacobian_v)

log = logging.getLogger(__name__)

LAMBDA_SCALE = 5e-5
BB_ITERS = 2000
RIGID_MAXITER = 200
NONMONOTONE_WINDOW = 10


class SolverError(RuntimeError):
    pass


def default_lambda(measurement: KSpaceMeasurement) -> float:
    """Regularization weight ``5e-5 * ||d2||^2``."""
    return LAMBDA_SCALE * measurement.energy()


def regularizer(v, squared: bool = True, eps: float = 1e-3):
    """Smoothness penalty on a displacement field and its gradient.

    ``v`` has shape ``(*dims, C)``. The squared form sums the squared forward
    differences of every component along every spatial axis (zero difference
    past the last index). With ``squared=False`` the smoothed norm
    ``sqrt(sum + eps**2)`` is returned instead.
    """
    v = np.asarray(v, dtype=np.float64)
    total = 0.0
    grad = np.zeros_like(v)
    for axis in range(v.ndim - 1):
        diff = np.diff(v, axis=axis)
        total += float(np.sum(diff * diff))
        lo = [slice(None)] * v.ndim
        hi = [slice(None)] * v.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        grad[tuple(lo)] -= 2.0 * diff
        grad[tuple(hi)] += 2.0 * diff
    if squared:
        return total, grad
    norm = np.sqrt(total + eps * eps)
    return float(norm), grad / (2.0 * norm)


@dataclass
class DeltaProblem:
    r1_hat: np.ndarray
    phi2_hat: np.ndarray
    measurement: KSpaceMeasurement
    lam: float
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    squared_reg: bool = True
    reg_eps: float = 1e-3

    def __post_init__(self):
        self.r1_hat = np.asarray(self.r1_hat, dtype=np.float64)
        self.phi2_hat = np.asarray(self.phi2_hat, dtype=np.float64)
        if self.r1_hat.shape != self.phi2_hat.shape or self.r1_hat.shape != self.measurement.shape:
            raise ValueError("reference, phase and measurement shapes disagree")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        lo, hi = default_bounds(self.rank)
        self.lower = lo if self.lower is None else np.asarray(self.lower, dtype=np.float64)
        self.upper = hi if self.upper is None else np.asarray(self.upper, dtype=np.float64)

    @classmethod
    def from_measurement(cls, r1_hat, measurement: KSpaceMeasurement, lam=None, **kw):
        """Build a problem with the zero-filled phase estimate and default lambda."""
        lam = default_lambda(measurement) if lam is None else lam
        return cls(r1_hat, estimate_phase(measurement), measurement, lam, **kw)

    @property
    def rank(self) -> int:
        return self.r1_hat.ndim

    @property
    def shape(self):
        return self.r1_hat.shape

    @cached_property
    def phase_factor(self) -> np.ndarray:
        return np.exp(1j * self.phi2_hat)

    def zero_params(self) -> RigidParams:
        return RigidParams.zeros(self.rank, self.lower, self.upper)

    def reg(self, v):
        return regularizer(v, self.squared_reg, self.reg_eps)


def _data_residual(problem: DeltaProblem, p: RigidParams, v):
    model = warp_apply(problem.r1_hat, p, v) * problem.phase_factor
    pred = dft_forward(model).ravel()[problem.measurement.mask.indices]
    return pred - problem.measurement.values


def _data_cost(res) -> float:
    return float(np.vdot(res, res).real)


def cost_eval(problem: DeltaProblem, p: RigidParams, v) -> float:
    res = _data_residual(problem, p, v)
    cost = _data_cost(res)
    if problem.lam:
        cost += problem.lam * problem.reg(v)[0]
    return cost


def _image_cotangent(problem: DeltaProblem, res) -> np.ndarray:
    """d(data cost)/d(warped magnitude image)."""
    back = dft_inverse(zero_fill(KSpaceMeasurement(problem.measurement.mask, res)))
    return 2.0 * np.real(np.conj(problem.phase_factor) * back)


def cost_and_grad(problem: DeltaProblem, p: RigidParams, v, want_rigid=True, want_field=True):
    """Cost together with the requested gradient blocks.

    Returns ``(cost, grad_p, grad_v)``; skipped blocks are ``None``.
    ``grad_p`` is the packed ``[d/dtheta..., d/dt...]`` vector.
    """
    v = np.asarray(v, dtype=np.float64)
    res = _data_residual(problem, p, v)
    cost = _data_cost(res)
    g = _image_cotangent(problem, res)
    grad_p = grad_v = None
    if want_rigid:
        gth, gt = warp_jacobian_rigid(problem.r1_hat, p, v, g)
        grad_p = np.concatenate([gth, gt])
    if want_field:
        grad_v = warp_jacobian_v(problem.r1_hat, p, v, g)
    if problem.lam:
        rv, rg = problem.reg(v)
        cost += problem.lam * rv
        if want_field:
            grad_v = grad_v + problem.lam * rg
    return cost, grad_p, grad_v


def cost_grad(problem: DeltaProblem, p: RigidParams, v):
    """Gradient of :func:`cost_eval` as ``(grad_p, grad_v)``."""
    _, gp, gv = cost_and_grad(problem, p, v)
    return gp, gv


@dataclass
class BBResult:
    x: np.ndarray
    trace: list = field(default_factory=list)
    iterations: int = 0
    message: str = ""


def bb_minimize(f_and_grad: Callable, x0, max_iters: int = BB_ITERS,
                step_guard: float | None = None, gtol: float = 1e-12,
                window: int = NONMONOTONE_WINDOW, gamma: float = 1e-4,
                max_backtracks: int = 40) -> BBResult:
    """Barzilai-Borwein gradient descent with a nonmonotone line search.

    Step sizes alternate between the long (``s.s / s.y``) and short
    (``s.y / y.y``) BB formulas. A trial step is accepted when the cost is
    below the maximum of the last ``window`` accepted costs minus an Armijo
    term; otherwise the step is halved. ``step_guard`` caps the largest
    per-component change of a single step. The first step length comes from
    the same backtracking probe started at ``1 / max|g|``.

    Stops after ``max_iters`` steps, when ``||g|| <= gtol * max(1, ||g0||)``,
    or when backtracking fails.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    f, g = f_and_grad(x)
    _check_finite(f, g)
    trace = [(0, float(f))]
    g0 = np.linalg.norm(g)
    result = BBResult(x, trace)
    if g0 == 0.0:
        result.message = "zero gradient at start"
        return result
    tol = gtol * max(1.0, g0)
    recent = [float(f)]
    alpha = 1.0 / np.max(np.abs(g))
    for k in range(1, max_iters + 1):
        gmax = np.max(np.abs(g))
        step = alpha
        if step_guard is not None and step * gmax > step_guard:
            step = step_guard / gmax
        fref = max(recent)
        gg = float(np.vdot(g, g))
        for _ in range(max_backtracks):
            x_new = x - step * g
            f_new, g_new = f_and_grad(x_new)
            _check_finite(f_new, g_new)
            if f_new <= fref - gamma * step * gg:
                break
            step *= 0.5
        else:
            result.message = "line search failed"
            break
        s = x_new - x
        y = g_new - g
        sy = float(np.vdot(s, y))
        x, f, g = x_new, f_new, g_new
        trace.append((k, float(f)))
        recent.append(float(f))
        if len(recent) > window:
            recent.pop(0)
        result.iterations = k
        if np.linalg.norm(g) <= tol:
            result.message = "gradient tolerance reached"
            break
        if sy > 0:
            alpha = float(np.vdot(s, s)) / sy if k % 2 else sy / float(np.vdot(y, y))
        else:
            alpha = step
        alpha = min(max(alpha, 1e-30), 1e30)
    else:
        result.message = "iteration limit"
    result.x = x
    return result


def _check_finite(f, g=None):
    if not np.isfinite(f) or (g is not None and not np.all(np.isfinite(g))):
        raise SolverError("non-finite cost or gradient")


@dataclass
class RigidResult:
    x: np.ndarray
    trace: list
    iterations: int
    message: str


def rigid_minimize(f_and_grad: Callable, x0, lower, upper,
                   maxiter: int = RIGID_MAXITER, memory: int = 10,
                   pgtol_rel: float = 1e-5, restarts: int = 3) -> RigidResult:
    """Box-constrained L-BFGS-B on a small parameter vector.

    Stops at scipy's default relative-reduction criterion, when the projected
    gradient falls below ``pgtol_rel * max(1, |f|)``, or after ``maxiter``
    iterations in total. scipy fixes its tolerance from the starting cost, so
    the run is warm-restarted (at most ``restarts`` times) while the
    projected gradient at the returned point still exceeds the tolerance
    evaluated at the final cost.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    x = np.clip(np.asarray(x0, dtype=np.float64), lower, upper)
    trace = []

    def fun(z):
        f, g = f_and_grad(z)
        _check_finite(f, g)
        return f, g

    f, g = fun(x)
    trace.append((0, float(f)))
    state = {"k": 0}

    def callback(intermediate_result):
        state["k"] += 1
        trace.append((state["k"], float(intermediate_result.fun)))

    message = "no iterations"
    for _ in range(restarts + 1):
        if _projected_gradient(x, g, lower, upper) <= pgtol_rel * max(1.0, abs(f)):
            message = message if state["k"] else "projected gradient below tolerance"
            break
        left = maxiter - state["k"]
        if left <= 0:
            break
        res = minimize(fun, x, jac=True, method="L-BFGS-B", bounds=list(zip(lower, upper)),
                       callback=callback,
                       options={"maxiter": left, "maxcor": memory,
                                "gtol": pgtol_rel * max(1.0, abs(f))})
        message = str(res.message)
        if not res.fun < f:
            break
        x = np.clip(res.x, lower, upper)
        f, g = fun(x)
    return RigidResult(x, trace, state["k"], message)


def _projected_gradient(x, g, lower, upper) -> float:
    """Max-norm of the projected gradient step, as L-BFGS-B measures it."""
    return float(np.max(np.abs(np.clip(x - g, lower, upper) - x)))


@dataclass
class DeltaSolution:
    v_hat: np.ndarray
    p_hat: RigidParams
    r2_hat: np.ndarray
    cost_trace: list
    blocks: list

    def to_dict(self) -> dict:
        return {"rigid": self.p_hat.to_dict(), "cost_trace": self.cost_trace,
                "blocks": self.blocks}


def solve_delta(problem: DeltaProblem, cycles: int = 1, bb_iters: int = BB_ITERS,
                step_guard: float | None = 1.0, p0: RigidParams | None = None,
                v0=None) -> DeltaSolution:
    """Cyclic block coordinate descent: rigid block, then deformation block."""
    rank = problem.rank
    p = problem.zero_params() if p0 is None else p0
    v = np.zeros(problem.shape + (rank,)) if v0 is None else np.array(v0, dtype=np.float64)
    trace = []
    blocks = []
    it = 0
    for cycle in range(cycles):

        def rigid_fg(x, v=v):
            q = RigidParams.from_vector(x, rank, problem.lower, problem.upper)
            c, gp, _ = cost_and_grad(problem, q, v, want_field=False)
            return c, gp

        before = cost_eval(problem, p, v)
        rr = rigid_minimize(rigid_fg, p.as_vector(), problem.lower, problem.upper)
        p_new = RigidParams.from_vector(rr.x, rank, problem.lower, problem.upper)
        after = cost_eval(problem, p_new, v)
        if after > before:
            # L-BFGS-B returned a worse point than it started from; keep p
            p_new, after = p, before
        p = p_new
        trace.extend((it + k, c) for k, c in rr.trace)
        it += len(rr.trace)
        blocks.append({"cycle": cycle, "block": "rigid", "before": before, "after": after,
                       "iterations": rr.iterations, "message": rr.message})
        log.info("cycle %d rigid block: %.6g -> %.6g (%s)", cycle, before, after, rr.message)

        def field_fg(x, p=p):
            c, _, gv = cost_and_grad(problem, p, x, want_rigid=False)
            return c, gv

        bb = bb_minimize(field_fg, v, max_iters=bb_iters, step_guard=step_guard)
        v = bb.x
        after_v = bb.trace[-1][1]
        trace.extend((it + k, c) for k, c in bb.trace)
        it += len(bb.trace)
        blocks.append({"cycle": cycle, "block": "dvf", "before": after, "after": after_v,
                       "iterations": bb.iterations, "message": bb.message})
        log.info("cycle %d dvf block: %.6g -> %.6g (%d iterations, %s)",
                 cycle, after, after_v, bb.iterations, bb.message)
    r2_hat = warp_apply(problem.r1_hat, p, v)
    return DeltaSolution(v, p, r2_hat, trace, blocks)
