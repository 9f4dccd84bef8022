"""Cartesian k-space sub-sampling, measurement simulation and phase estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import dft_forward, dft_inverse, grid_shape, to_polar

DEFAULT_CUBE_FRAC = 1 / 32
DEFAULT_SIGMA_FRAC = 1 / 2

_MAX_DRAW_ROUNDS = 200


@dataclass(frozen=True)
class SamplingMask:
    """Boolean k-space selection in standard (unshifted) DFT index order."""

    selected: np.ndarray
    seed: int | None = None
    target_pct: float | None = None

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=bool).copy()
        grid_shape(sel.shape)
        if not sel.any():
            raise ValueError("a sampling mask must select at least one point")
        sel.setflags(write=False)
        object.__setattr__(self, "selected", sel)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.selected.shape

    @property
    def n(self) -> int:
        return int(np.count_nonzero(self.selected))

    @property
    def indices(self) -> np.ndarray:
        """Selected linear indices in ascending order."""
        return np.flatnonzero(self.selected)

    @classmethod
    def full(cls, shape) -> "SamplingMask":
        return cls(np.ones(grid_shape(shape), dtype=bool), None, 100.0)


@dataclass(frozen=True)
class KSpaceMeasurement:
    mask: SamplingMask
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.complex128).ravel().copy()
        if vals.size != self.mask.n:
            raise ValueError(f"{vals.size} values for a mask selecting {self.mask.n}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("measurement contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self):
        return self.mask.shape

    def energy(self) -> float:
        """Squared 2-norm of the measured values."""
        return float(np.vdot(self.values, self.values).real)


def central_cube(shape, cube_frac: float = DEFAULT_CUBE_FRAC) -> np.ndarray:
    """Boolean volume (centered k-space order) holding the central cube."""
    cube = np.zeros(shape, dtype=bool)
    sl = []
    for n in shape:
        side = min(n, max(2, int(round(cube_frac * n))))
        start = n // 2 - side // 2
        sl.append(slice(start, start + side))
    cube[tuple(sl)] = True
    return cube


def make_gaussian_mask(shape, pct: float, cube_frac: float = DEFAULT_CUBE_FRAC,
                       sigma_frac: float = DEFAULT_SIGMA_FRAC, seed: int = 0) -> SamplingMask:
    """Central cube plus Gaussian-distributed random k-space points.

    Points are drawn independently per axis from a normal distribution
    centered at the k-space center with standard deviation
    ``sigma_frac * dim / 2``, rounded, rejected when out of range and
    deduplicated, until exactly ``round(pct / 100 * N)`` points are selected.
    """
    shape = grid_shape(shape)
    if not 0 < pct <= 100:
        raise ValueError(f"pct must lie in (0, 100], got {pct}")
    total = int(np.prod(shape))
    target = int(round(pct / 100 * total))
    if pct == 100 or target >= total:
        return SamplingMask(np.ones(shape, dtype=bool), seed, float(pct))
    cube = central_cube(shape, cube_frac)
    if target < cube.sum():
        raise ValueError(
            f"{pct}% selects {target} points, fewer than the {int(cube.sum())}-point central cube"
        )

    rng = np.random.default_rng(seed)
    chosen = cube.ravel().copy()
    count = int(chosen.sum())
    center = np.array([n // 2 for n in shape], dtype=np.float64)
    sigma = sigma_frac * np.array(shape, dtype=np.float64) / 2
    dims = np.array(shape)
    strides = np.array([int(np.prod(shape[a + 1:])) for a in range(len(shape))])
    for _ in range(_MAX_DRAW_ROUNDS):
        if count >= target:
            break
        batch = max(1024, 2 * (target - count))
        k = np.rint(rng.normal(center, sigma, size=(batch, len(shape)))).astype(np.int64)
        k = k[np.all((k >= 0) & (k < dims), axis=1)]
        lin = k @ strides
        # first occurrence of each new index, in draw order
        _, first = np.unique(lin, return_index=True)
        lin = lin[np.sort(first)]
        lin = lin[~chosen[lin]][: target - count]
        chosen[lin] = True
        count += lin.size
    if count < target:
        # far corners are rarely hit; fill by decreasing Gaussian density
        idx = np.indices(shape).reshape(len(shape), -1).T
        logp = -0.5 * np.sum(((idx - center) / sigma) ** 2, axis=1)
        order = np.lexsort((np.arange(total), -logp))
        rest = order[~chosen[order]][: target - count]
        chosen[rest] = True
    centered = chosen.reshape(shape)
    return SamplingMask(np.fft.ifftshift(centered), seed, float(pct))


def _check_shape(d, mask: SamplingMask):
    d = np.asarray(d)
    if d.shape != mask.shape:
        raise ValueError(f"data shape {d.shape} does not match mask {mask.shape}")
    return d


def subsample(d, mask: SamplingMask) -> KSpaceMeasurement:
    d = _check_shape(d, mask)
    return KSpaceMeasurement(mask, d.ravel()[mask.indices])


def zero_fill(m: KSpaceMeasurement) -> np.ndarray:
    """Adjoint of :func:`subsample`."""
    out = np.zeros(m.mask.shape, dtype=np.complex128)
    out.ravel()[m.mask.indices] = m.values
    return out


def complex_noise(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Circular complex Gaussian noise with total standard deviation ``std``."""
    s = std / np.sqrt(2.0)
    return rng.normal(0.0, s, size=shape) + 1j * rng.normal(0.0, s, size=shape)


def simulate_measurement(x, mask: SamplingMask, noise_std: float = 0.0,
                         seed: int | None = 0) -> KSpaceMeasurement:
    """``S F x`` plus circular complex Gaussian noise."""
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    m = subsample(dft_forward(_check_shape(x, mask)), mask)
    if noise_std == 0:
        return m
    rng = np.random.default_rng(seed)
    return KSpaceMeasurement(mask, m.values + complex_noise(m.values.shape, noise_std, rng))


def estimate_phase(m: KSpaceMeasurement) -> np.ndarray:
    """Phase of the zero-filled inverse DFT, in (-pi, pi]."""
    return to_polar(dft_inverse(zero_fill(m)))[1]
