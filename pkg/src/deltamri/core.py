"""Grid geometry, unitary DFT and polar decomposition.

Volumes are plain numpy arrays in C order (last axis fastest). Complex
images and k-space data are complex arrays, magnitude/phase images are real
arrays, and a deformation field is a real array of shape ``(*dims, rank)``
holding one displacement vector per voxel.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "grid_shape",
    "check_finite",
    "check_magnitude",
    "check_phase",
    "dft_forward",
    "dft_inverse",
    "to_polar",
    "from_polar",
    "grid_center",
    "grid_coordinates",
]


def grid_shape(dims) -> tuple[int, ...]:
    """Validate a 2D or 3D grid shape and return it as a tuple of ints."""
    shape = tuple(int(d) for d in dims)
    if len(shape) not in (2, 3):
        raise ValueError(f"grid must be 2D or 3D, got rank {len(shape)}")
    if any(d < 2 for d in shape):
        raise ValueError(f"every grid dimension must be >= 2, got {shape}")
    if int(np.prod(shape, dtype=np.int64)) > np.iinfo(np.intp).max:
        raise ValueError("grid too large for the platform index range")
    return shape


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_magnitude(r: np.ndarray, name: str = "magnitude") -> np.ndarray:
    r = check_finite(np.asarray(r), name)
    if np.iscomplexobj(r):
        raise TypeError(f"{name} must be real")
    if np.any(r < 0):
        raise ValueError(f"{name} must be nonnegative")
    return r


def check_phase(phi: np.ndarray, name: str = "phase") -> np.ndarray:
    phi = check_finite(np.asarray(phi), name)
    if np.any(phi <= -np.pi) or np.any(phi > np.pi):
        raise ValueError(f"{name} must lie in (-pi, pi]")
    return phi


def dft_forward(x: np.ndarray) -> np.ndarray:
    """Unitary multi-dimensional DFT over all axes."""
    return np.fft.fftn(np.asarray(x, dtype=np.complex128), norm="ortho")


def dft_inverse(d: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft_forward` (also its adjoint)."""
    return np.fft.ifftn(np.asarray(d, dtype=np.complex128), norm="ortho")


def _wrap_phase(phi: np.ndarray) -> np.ndarray:
    # np.angle returns [-pi, pi]; fold -pi onto pi
    return np.where(phi <= -np.pi, np.pi, phi)


def to_polar(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a complex volume into magnitude and phase in (-pi, pi].

    The phase of an exact zero is defined as 0.
    """
    x = np.asarray(x)
    r = np.abs(x)
    phi = np.angle(x)
    phi = _wrap_phase(phi)
    phi = np.where(r == 0, 0.0, phi)
    return r, phi


def from_polar(r: np.ndarray, phi: np.ndarray) -> np.ndarray:
    r = check_magnitude(r)
    phi = np.asarray(phi, dtype=np.float64)
    if r.shape != phi.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {phi.shape}")
    return r * np.exp(1j * phi)


def grid_center(shape) -> np.ndarray:
    """Geometric grid center ``(dims - 1) / 2`` in voxel units."""
    return (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0


def grid_coordinates(shape) -> np.ndarray:
    """Voxel index coordinates of every grid point, shape ``(*dims, rank)``."""
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
