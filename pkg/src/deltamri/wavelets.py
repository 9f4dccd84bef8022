"""Orthonormal Daubechies-4 wavelet transform with periodic boundaries.

Separable multi-level decomposition in the usual nested layout: at each
level the low-pass corner of the coefficient array is transformed along
every axis, leaving approximation coefficients in the first half and detail
coefficients in the second half of that axis.
"""

from __future__ import annotations

import numpy as np

_S3 = np.sqrt(3.0)
DB4_LOW = np.array([1 + _S3, 3 + _S3, 3 - _S3, 1 - _S3]) / (4 * np.sqrt(2.0))
DB4_HIGH = np.array([DB4_LOW[3], -DB4_LOW[2], DB4_LOW[1], -DB4_LOW[0]])


def check_levels(shape, levels: int):
    if levels < 0:
        raise ValueError("levels must be nonnegative")
    for n in shape:
        if n % (2 ** levels):
            raise ValueError(f"axis length {n} is not divisible by 2**{levels}")


def max_levels(shape) -> int:
    lv = 0
    while all(n % (2 ** (lv + 1)) == 0 and n // 2 ** (lv + 1) >= 1 for n in shape):
        lv += 1
    return lv


def _analysis(x, axis):
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    k = np.arange(n // 2)
    approx = sum(DB4_LOW[m] * x[(2 * k + m) % n] for m in range(4))
    detail = sum(DB4_HIGH[m] * x[(2 * k + m) % n] for m in range(4))
    return np.moveaxis(np.concatenate([approx, detail]), 0, axis)


def _synthesis(c, axis):
    c = np.moveaxis(c, axis, 0)
    n = c.shape[0]
    half = n // 2
    approx, detail = c[:half], c[half:]
    k = np.arange(half)
    out = np.zeros_like(c)
    for m in range(4):
        # indices (2k + m) mod n are distinct for fixed m
        out[(2 * k + m) % n] += DB4_LOW[m] * approx + DB4_HIGH[m] * detail
    return np.moveaxis(out, 0, axis)


def dwt_forward(x, levels: int = 3) -> np.ndarray:
    x = np.asarray(x)
    check_levels(x.shape, levels)
    out = np.array(x, dtype=np.result_type(x.dtype, np.float64), copy=True)
    for lv in range(levels):
        region = tuple(slice(0, n >> lv) for n in out.shape)
        block = out[region]
        for axis in range(out.ndim):
            block = _analysis(block, axis)
        out[region] = block
    return out


def dwt_inverse(c, levels: int = 3) -> np.ndarray:
    c = np.asarray(c)
    check_levels(c.shape, levels)
    out = np.array(c, dtype=np.result_type(c.dtype, np.float64), copy=True)
    for lv in reversed(range(levels)):
        region = tuple(slice(0, n >> lv) for n in out.shape)
        block = out[region]
        for axis in reversed(range(out.ndim)):
            block = _synthesis(block, axis)
        out[region] = block
    return out


def detail_mask(shape, levels: int) -> np.ndarray:
    """True at detail coefficients, False at the coarsest approximation."""
    mask = np.ones(shape, dtype=bool)
    mask[tuple(slice(0, n >> levels) for n in shape)] = False
    return mask
