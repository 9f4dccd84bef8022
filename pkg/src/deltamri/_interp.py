"""Multilinear sampling kernels with zero extension outside the grid.

``sample*`` returns interpolated values and, optionally, the spatial
gradient of the interpolant at each sample point (the one-sided cell
derivative, piecewise constant per cell). ``splat*`` is the exact adjoint of
the value map. Splatting runs serially so results do not depend on thread
scheduling.
"""

import math
import os

import numpy as np
import numba
from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is too old; avoid the fallback warning
    numba.config.THREADING_LAYER = "workqueue"


@njit(cache=True, inline="always")
def _at2(img, i, j):
    if i < 0 or j < 0 or i >= img.shape[0] or j >= img.shape[1]:
        return 0.0
    return img[i, j]


@njit(cache=True, inline="always")
def _at3(img, i, j, k):
    if (i < 0 or j < 0 or k < 0 or i >= img.shape[0] or j >= img.shape[1]
            or k >= img.shape[2]):
        return 0.0
    return img[i, j, k]


@njit(parallel=True, cache=True)
def sample2d(img, pts, want_grad):
    n = pts.shape[0]
    val = np.empty(n)
    grad = np.zeros((n if want_grad else 0, 2))
    for p in prange(n):
        fi = math.floor(pts[p, 0])
        fj = math.floor(pts[p, 1])
        a = pts[p, 0] - fi
        b = pts[p, 1] - fj
        i = int(fi)
        j = int(fj)
        c00 = _at2(img, i, j)
        c10 = _at2(img, i + 1, j)
        c01 = _at2(img, i, j + 1)
        c11 = _at2(img, i + 1, j + 1)
        val[p] = ((1.0 - a) * (1.0 - b) * c00 + a * (1.0 - b) * c10
                  + (1.0 - a) * b * c01 + a * b * c11)
        if want_grad:
            grad[p, 0] = (1.0 - b) * (c10 - c00) + b * (c11 - c01)
            grad[p, 1] = (1.0 - a) * (c01 - c00) + a * (c11 - c10)
    return val, grad


@njit(parallel=True, cache=True)
def sample3d(img, pts, want_grad):
    n = pts.shape[0]
    val = np.empty(n)
    grad = np.zeros((n if want_grad else 0, 3))
    for p in prange(n):
        fi = math.floor(pts[p, 0])
        fj = math.floor(pts[p, 1])
        fk = math.floor(pts[p, 2])
        a = pts[p, 0] - fi
        b = pts[p, 1] - fj
        c = pts[p, 2] - fk
        i = int(fi)
        j = int(fj)
        k = int(fk)
        c000 = _at3(img, i, j, k)
        c100 = _at3(img, i + 1, j, k)
        c010 = _at3(img, i, j + 1, k)
        c110 = _at3(img, i + 1, j + 1, k)
        c001 = _at3(img, i, j, k + 1)
        c101 = _at3(img, i + 1, j, k + 1)
        c011 = _at3(img, i, j + 1, k + 1)
        c111 = _at3(img, i + 1, j + 1, k + 1)
        ua = 1.0 - a
        ub = 1.0 - b
        uc = 1.0 - c
        val[p] = (ua * ub * uc * c000 + a * ub * uc * c100
                  + ua * b * uc * c010 + a * b * uc * c110
                  + ua * ub * c * c001 + a * ub * c * c101
                  + ua * b * c * c011 + a * b * c * c111)
        if want_grad:
            grad[p, 0] = (ub * uc * (c100 - c000) + b * uc * (c110 - c010)
                          + ub * c * (c101 - c001) + b * c * (c111 - c011))
            grad[p, 1] = (ua * uc * (c010 - c000) + a * uc * (c110 - c100)
                          + ua * c * (c011 - c001) + a * c * (c111 - c101))
            grad[p, 2] = (ua * ub * (c001 - c000) + a * ub * (c101 - c100)
                          + ua * b * (c011 - c010) + a * b * (c111 - c110))
    return val, grad


@njit(cache=True)
def splat2d(vals, pts, shape0, shape1):
    out = np.zeros((shape0, shape1))
    for p in range(pts.shape[0]):
        g = vals[p]
        if g == 0.0:
            continue
        fi = math.floor(pts[p, 0])
        fj = math.floor(pts[p, 1])
        a = pts[p, 0] - fi
        b = pts[p, 1] - fj
        i = int(fi)
        j = int(fj)
        for di in range(2):
            ii = i + di
            if ii < 0 or ii >= shape0:
                continue
            wa = a if di else 1.0 - a
            for dj in range(2):
                jj = j + dj
                if jj < 0 or jj >= shape1:
                    continue
                wb = b if dj else 1.0 - b
                out[ii, jj] += g * wa * wb
    return out


@njit(cache=True)
def splat3d(vals, pts, shape0, shape1, shape2):
    out = np.zeros((shape0, shape1, shape2))
    for p in range(pts.shape[0]):
        g = vals[p]
        if g == 0.0:
            continue
        fi = math.floor(pts[p, 0])
        fj = math.floor(pts[p, 1])
        fk = math.floor(pts[p, 2])
        a = pts[p, 0] - fi
        b = pts[p, 1] - fj
        c = pts[p, 2] - fk
        i = int(fi)
        j = int(fj)
        k = int(fk)
        for di in range(2):
            ii = i + di
            if ii < 0 or ii >= shape0:
                continue
            wa = a if di else 1.0 - a
            for dj in range(2):
                jj = j + dj
                if jj < 0 or jj >= shape1:
                    continue
                wb = b if dj else 1.0 - b
                for dk in range(2):
                    kk = k + dk
                    if kk < 0 or kk >= shape2:
                        continue
                    wc = c if dk else 1.0 - c
                    out[ii, jj, kk] += g * wa * wb * wc
    return out


def sample(img: np.ndarray, pts: np.ndarray, want_grad: bool = False):
    """Sample ``img`` at ``pts`` (shape ``(n, rank)``, voxel units)."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if img.ndim == 2:
        return sample2d(img, pts, want_grad)
    return sample3d(img, pts, want_grad)


def splat(vals: np.ndarray, pts: np.ndarray, shape) -> np.ndarray:
    vals = np.ascontiguousarray(vals, dtype=np.float64).ravel()
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if len(shape) == 2:
        return splat2d(vals, pts, shape[0], shape[1])
    return splat3d(vals, pts, shape[0], shape[1], shape[2])
