"""Simulation protocol: phantom, ground-truth scenario, error metric, sweep."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import baselines
from .core import dft_inverse, from_polar, grid_center, grid_coordinates, grid_shape
from .kspace import complex_noise, estimate_phase, make_gaussian_mask, simulate_measurement
from .solver import BB_ITERS, DeltaProblem, default_lambda, solve_delta
from .warp import RigidParams, invert_map, pull, warp_apply

log = logging.getLogger(__name__)

REFERENCE_SHAPE = (256, 192, 128)
DEFAULT_THETA_DEG = (2.9, 4.0, 5.7)
DEFAULT_T = (-6.0, -5.0, -4.5)
DESK_SHAPE = (64, 48, 32)
QUICK_SHAPE = (128, 128)
RESIDUAL_TOL = 1e-2
DEFAULT_EDGE = 2.5
METHODS = ("delta", "tcs", "zidft")


class ScenarioError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass
class Phantom:
    """Continuous piecewise-smooth phantom evaluated in voxel coordinates.

    Ellipsoids are given in normalized coordinates ``(x - c) / (dims / 2)``
    as ``(center, semi_axes, intensity)``; intensities add up. Edges fall
    off smoothly over ``edge`` voxels inside each ellipsoid, so the image is
    exactly zero outside the first (outer) ellipsoid.
    """

    shape: tuple
    ellipsoids: list
    modulation: np.ndarray
    phase_coeffs: np.ndarray
    edge: float = DEFAULT_EDGE

    def _normalized(self, pts):
        half = np.asarray(self.shape, dtype=np.float64) / 2
        return (pts - grid_center(self.shape)) / half

    def magnitude(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        u = self._normalized(pts)
        half = np.asarray(self.shape, dtype=np.float64) / 2
        out = np.zeros(pts.shape[0])
        for center, axes, value in self.ellipsoids:
            axes = np.asarray(axes)
            rho = np.sqrt(np.sum(((u - center) / axes) ** 2, axis=1))
            width = self.edge / np.min(axes * half)
            out += value * _smoothstep((1.0 - rho) / width)
        outer = out > 0
        mod = 1.0 + self._poly(u, self.modulation)
        out = np.where(outer, np.clip(out * mod, 0.0, 1.0), 0.0)
        return out

    def phase(self, pts) -> np.ndarray:
        u = self._normalized(np.asarray(pts, dtype=np.float64))
        return self._poly(u, self.phase_coeffs)

    @staticmethod
    def _poly(u, coeffs):
        # linear + pairwise quadratic terms, coefficient layout from _basis
        return _basis(u) @ coeffs

    def render(self):
        pts = grid_coordinates(self.shape).reshape(-1, len(self.shape))
        r = self.magnitude(pts).reshape(self.shape)
        phi = self.phase(pts).reshape(self.shape)
        return r, phi


def _basis(u):
    rank = u.shape[1]
    cols = [u[:, a] for a in range(rank)]
    for a in range(rank):
        for b in range(a, rank):
            cols.append(u[:, a] * u[:, b])
    return np.stack(cols, axis=1)


def build_phantom(shape, seed: int = 0, edge: float = DEFAULT_EDGE) -> Phantom:
    shape = grid_shape(shape)
    rank = len(shape)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))

    def e(center, axes, value):
        return (np.array(center[:rank], dtype=np.float64),
                np.array(axes[:rank], dtype=np.float64), value)

    ellipsoids = [
        e((0.0, 0.0, 0.0), (0.86, 0.84, 0.80), 0.30),     # outer shell
        e((0.0, 0.02, 0.0), (0.74, 0.72, 0.68), 0.35),    # parenchyma
        e((-0.22, 0.05, 0.05), (0.16, 0.30, 0.24), -0.40),  # ventricle
        e((0.22, 0.05, 0.05), (0.16, 0.30, 0.24), -0.40),   # ventricle
        e((0.0, -0.38, -0.10), (0.30, 0.14, 0.20), 0.25),   # bright nucleus
        e((0.0, 0.45, 0.20), (0.42, 0.10, 0.14), -0.20),   # dark band
        e((0.35, -0.20, -0.30), (0.10, 0.12, 0.10), 0.20),
        e((-0.35, -0.20, 0.30), (0.10, 0.12, 0.10), 0.20),
    ]
    # lesions: small bright blobs at seed-dependent positions in the interior
    lesions = []
    while len(lesions) < 3:
        c = rng.uniform(-0.5, 0.5, size=rank)
        if all(np.linalg.norm(c - l) > 0.3 for l in lesions) and np.linalg.norm(c) < 0.55:
            lesions.append(c)
    for c in lesions:
        ellipsoids.append((c, np.full(rank, 0.10), 0.30))
    nb = _basis(np.zeros((1, rank))).shape[1]
    modulation = rng.uniform(-0.05, 0.05, size=nb)
    phase_coeffs = rng.uniform(-1.0, 1.0, size=nb)
    # scale the phase so its range over the grid is within [-pi/2, pi/2]
    pts = grid_coordinates(shape).reshape(-1, rank)
    u = (pts - grid_center(shape)) / (np.asarray(shape) / 2)
    peak = np.max(np.abs(_basis(u) @ phase_coeffs))
    phase_coeffs = phase_coeffs * (np.pi / 2) / peak
    return Phantom(shape, ellipsoids, modulation, phase_coeffs, edge)


def make_phantom(shape, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude in [0, 1] and smooth phase in [-pi/2, pi/2]."""
    return build_phantom(shape, seed).render()


@dataclass
class DvfSpec:
    """Smooth local displacement: a Gaussian bump along a fixed direction.

    ``radius_frac`` times the smallest grid dimension is the Gaussian width;
    the bump is tapered to exactly zero beyond three widths. ``center`` is in
    voxels (default: first lesion of the phantom). ``peak`` is the maximum
    displacement length in voxels.
    """

    kind: str = "bump"
    peak: float = 3.0
    radius_frac: float = 1 / 8
    center: tuple | None = None
    direction: tuple | None = None

    def to_dict(self):
        return asdict(self)


def bump_profile(d, sigma):
    taper = np.clip(1.0 - (d / (3.0 * sigma)) ** 2, 0.0, None) ** 2
    return np.exp(-0.5 * (d / sigma) ** 2) * taper


def make_dvf(shape, spec: DvfSpec, default_center=None) -> np.ndarray:
    shape = grid_shape(shape)
    rank = len(shape)
    if spec.kind == "zero" or spec.peak == 0:
        return np.zeros(shape + (rank,))
    if spec.kind != "bump":
        raise ValueError(f"unknown dvf kind {spec.kind!r}")
    sigma = spec.radius_frac * min(shape)
    center = np.asarray(spec.center if spec.center is not None else
                        (default_center if default_center is not None else grid_center(shape)),
                        dtype=np.float64)
    direction = np.ones(rank) if spec.direction is None else np.asarray(spec.direction, float)
    direction = direction / np.linalg.norm(direction)
    x = grid_coordinates(shape)
    d = np.linalg.norm(x - center, axis=-1)
    return spec.peak * bump_profile(d, sigma)[..., None] * direction


def default_rigid(shape) -> RigidParams:
    """Default rigid motion, translations scaled to the grid size."""
    shape = grid_shape(shape)
    rank = len(shape)
    scale = np.asarray(shape, dtype=np.float64) / np.asarray(REFERENCE_SHAPE[:rank])
    t = np.asarray(DEFAULT_T[:rank]) * scale
    theta = np.deg2rad(DEFAULT_THETA_DEG if rank == 3 else DEFAULT_THETA_DEG[2:])
    return RigidParams(theta, t)


@dataclass
class Scenario:
    r2: np.ndarray
    phi2: np.ndarray
    p_true: RigidParams
    v_true: np.ndarray
    r1: np.ndarray
    r1_hat: np.ndarray
    x1_hat: np.ndarray
    seed: int
    noise_frac: float
    foreground_threshold: float
    residual: float = 0.0
    noise_std: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.r2.shape

    @property
    def x2(self) -> np.ndarray:
        return from_polar(self.r2, self.phi2)

    def config_hash(self) -> str:
        return config_hash(self.config)


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def foreground_mean(r, threshold: float) -> float:
    fg = r > threshold * r.max()
    return float(r[fg].mean()) if fg.any() else 0.0


def make_scenario(shape=DESK_SHAPE, seed: int = 0, theta=None, t=None,
                  dvf_spec: DvfSpec | None = None, noise_frac: float = 0.04,
                  foreground_threshold: float = 0.1, edge: float = DEFAULT_EDGE,
                  inverse_iters: int = 20, refine_iters: int = 4) -> Scenario:
    """Ground-truth pair (r1, r2) with ``W(r1, theta, t, v) ~= r2``.

    ``theta`` (radians) and ``t`` (voxels) default to :func:`default_rigid`
    with ``t`` scaled to the grid. ``r1`` is the analytic phantom evaluated
    at the inverse of the warp's pull map, followed by ``refine_iters``
    corrections ``r1 <- max(0, r1 + pull(r2 - W(r1), u))`` that compensate
    part of the smoothing of the warp's linear interpolation.
    """
    shape = grid_shape(shape)
    rank = len(shape)
    dvf_spec = DvfSpec() if dvf_spec is None else dvf_spec
    default = default_rigid(shape)
    p = RigidParams(default.theta if theta is None else theta,
                    default.t if t is None else t)
    if not p.within_bounds():
        raise ScenarioError("rigid parameters outside the warp bounds")
    phantom = build_phantom(shape, seed, edge)
    r2, phi2 = phantom.render()
    lesion = phantom.ellipsoids[-3][0] * (np.asarray(shape) / 2) + grid_center(shape)
    v = make_dvf(shape, dvf_spec, lesion)

    u, inv_res = invert_map(p, v, iters=inverse_iters, shape=shape)
    pts = grid_coordinates(shape).reshape(-1, rank) + u.reshape(-1, rank)
    r1 = phantom.magnitude(pts).reshape(shape)
    for _ in range(refine_iters):
        r1 = np.maximum(0.0, r1 + pull(r2 - warp_apply(r1, p, v), u))
    residual = relative_residual(warp_apply(r1, p, v), r2)
    if residual > RESIDUAL_TOL:
        raise ScenarioError(
            f"construction residual {residual:.3g} exceeds {RESIDUAL_TOL}", residual)

    x1 = r1 * np.exp(1j * phi2)
    std = noise_frac * foreground_mean(r1, foreground_threshold)
    if noise_frac > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4015E]))
        x1_hat = x1 + complex_noise(shape, std, rng)
        r1_hat = np.abs(x1_hat)
    else:
        x1_hat = x1
        r1_hat = r1.copy()
    cfg = {
        "shape": list(shape), "seed": seed, "theta": p.theta.tolist(), "t": p.t.tolist(),
        "dvf": dvf_spec.to_dict(), "noise_frac": noise_frac,
        "foreground_threshold": foreground_threshold, "edge": edge,
        "inverse_iters": inverse_iters, "refine_iters": refine_iters,
    }
    log.info("scenario %s: residual %.3g, inverse map residual %.3g voxel",
             shape, residual, inv_res)
    return Scenario(r2, phi2, p, v, r1, r1_hat, x1_hat, seed, noise_frac,
                    foreground_threshold, residual, std, cfg)


def relative_residual(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def build_inverse_reference(r2, p: RigidParams, v, iters: int = 20) -> np.ndarray:
    """Discrete inverse warp: resample ``r2`` through the inverted pull map."""
    u, _ = invert_map(p, v, iters=iters, shape=np.shape(r2))
    return pull(r2, u)


def reference_from_full_kspace(d_full) -> np.ndarray:
    """Reference magnitude from fully sampled k-space."""
    return np.abs(dft_inverse(d_full))


def normalized_error(r2_hat, r2, r1_hat) -> float:
    """``||r2_hat - r2|| / ||r1_hat - r2||``."""
    r2_hat, r2, r1_hat = (np.asarray(a, dtype=np.float64) for a in (r2_hat, r2, r1_hat))
    if not r2_hat.shape == r2.shape == r1_hat.shape:
        raise ValueError("shape mismatch")
    den = np.linalg.norm(r1_hat - r2)
    if den == 0:
        raise ZeroDivisionError("reference equals the target; the error is undefined")
    return float(np.linalg.norm(r2_hat - r2) / den)


@dataclass
class ReconConfig:
    bb_iters: int = BB_ITERS
    cycles: int = 1
    step_guard: float = 1.0
    lambda_scale: float = 1.0
    tcs_iters: int = 300
    tcs_tol: float = 1e-5
    tcs_rho: float = 1.0
    tcs_adaptive_rho: bool = True
    tcs_lambda_scale: float = 1.0
    wavelet_levels: int = 3
    invert_w: bool = True
    cube_frac: float = 1 / 32
    sigma_frac: float = 1 / 2
    measurement_noise: float = 0.0

    def to_dict(self):
        return asdict(self)


def measure(scenario: Scenario, pct: float, seed: int, cfg: ReconConfig):
    mask = make_gaussian_mask(scenario.shape, pct, cfg.cube_frac, cfg.sigma_frac, seed)
    return simulate_measurement(scenario.x2, mask, cfg.measurement_noise * scenario.noise_std,
                                seed)


def reconstruct_delta(scenario: Scenario, measurement, cfg: ReconConfig):
    lam = cfg.lambda_scale * default_lambda(measurement)
    problem = DeltaProblem(scenario.r1_hat, estimate_phase(measurement), measurement, lam)
    sol = solve_delta(problem, cycles=cfg.cycles, bb_iters=cfg.bb_iters,
                      step_guard=cfg.step_guard)
    return sol


def reconstruct_tcs(scenario: Scenario, measurement, p_align: RigidParams, cfg: ReconConfig):
    lam1, lam2 = baselines.default_tcs_lambdas(measurement)
    w = baselines.support_weights(scenario.v_true, invert=cfg.invert_w)
    x1_aligned = baselines.align_reference(scenario.x1_hat, p_align)
    problem = baselines.TcsProblem(x1_aligned, measurement, w,
                                   cfg.tcs_lambda_scale * lam1, cfg.tcs_lambda_scale * lam2,
                                   cfg.wavelet_levels)
    return baselines.tcs_solve(problem, cfg.tcs_iters, cfg.tcs_tol, cfg.tcs_rho,
                               cfg.tcs_adaptive_rho)


@dataclass
class SweepRow:
    method: str
    pct: float
    seed: int
    epsilon: float
    wall_time_s: float
    config_hash: str
    error: str | None = None


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def sorted(self) -> "SweepResult":
        order = {m: i for i, m in enumerate(METHODS)}
        return SweepResult(sorted(self.rows, key=lambda r: (order.get(r.method, 99), r.pct, r.seed)))

    def medians(self) -> dict:
        """``{method: {pct: median epsilon}}`` over successful rows."""
        out: dict = {}
        for row in self.rows:
            if row.error is None:
                out.setdefault(row.method, {}).setdefault(row.pct, []).append(row.epsilon)
        return {m: {p: float(np.median(v)) for p, v in sorted(d.items())} for m, d in out.items()}

    def to_csv(self, path=None) -> str:
        lines = ["method,pct,seed,epsilon,wall_time_s,config_hash"]
        failures = []
        for r in self.rows:
            eps = "nan" if r.error else repr(float(r.epsilon))
            lines.append(f"{r.method},{r.pct:g},{r.seed},{eps},{r.wall_time_s:.3f},{r.config_hash}")
            if r.error:
                failures.append(f"# failed: method={r.method} pct={r.pct:g} seed={r.seed}: {r.error}")
        text = "\n".join(lines + failures) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _row_hash(scenario: Scenario, method, pct, seed, cfg: ReconConfig) -> str:
    return config_hash({"scenario": scenario.config, "method": method, "pct": float(pct),
                        "seed": int(seed), "recon": cfg.to_dict()})


def run_point(scenario: Scenario, pct: float, seed: int, methods, cfg: ReconConfig) -> list:
    """All requested methods for one (pct, seed) sampling pattern."""
    rows = []
    try:
        m = measure(scenario, pct, seed, cfg)
    except Exception as exc:  # recorded, sweep continues
        return [SweepRow(meth, pct, seed, float("nan"), 0.0,
                         _row_hash(scenario, meth, pct, seed, cfg), str(exc)) for meth in methods]

    def record(method, fn):
        t0 = time.perf_counter()
        try:
            r2_hat, extra = fn()
            eps = normalized_error(r2_hat, scenario.r2, scenario.r1_hat)
            err = None
        except Exception as exc:
            extra, eps, err = None, float("nan"), f"{type(exc).__name__}: {exc}"
        rows.append(SweepRow(method, pct, seed, eps, time.perf_counter() - t0,
                             _row_hash(scenario, method, pct, seed, cfg), err))
        return extra

    sol = None
    if "delta" in methods or "tcs" in methods:
        def run_delta():
            s = reconstruct_delta(scenario, m, cfg)
            return s.r2_hat, s
        if "delta" in methods:
            sol = record("delta", run_delta)
        else:
            try:
                sol = reconstruct_delta(scenario, m, cfg)
            except Exception as exc:
                log.warning("delta run for tcs alignment failed: %s", exc)
    if "tcs" in methods:
        def run_tcs():
            if sol is None:
                raise RuntimeError("no rigid estimate available for pre-alignment")
            res = reconstruct_tcs(scenario, m, sol.p_hat, cfg)
            return np.abs(res.x), res
        record("tcs", run_tcs)
    if "zidft" in methods:
        record("zidft", lambda: (baselines.z_idft(m), None))
    return rows


def _run_point_star(args):
    return run_point(*args)


def run_sweep(scenario: Scenario, pct_list, methods=METHODS, seeds=(1, 2, 3),
              cfg: ReconConfig | None = None, jobs: int = 1) -> SweepResult:
    cfg = ReconConfig() if cfg is None else cfg
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    tasks = [(scenario, float(p), int(s), methods, cfg) for p in pct_list for s in seeds]
    rows = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for part in pool.map(_run_point_star, tasks):
                rows.extend(part)
    else:
        for task in tasks:
            rows.extend(run_point(*task))
            log.info("pct %g seed %d done", task[1], task[2])
    return SweepResult(rows).sorted()
