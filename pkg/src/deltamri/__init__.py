"""Longitudinal MRI change estimation from a reference magnitude image and
sub-sampled k-space of a follow-up scan."""

from .baselines import TcsProblem, tcs_solve, z_idft
from .container import read, write
from .core import dft_forward, dft_inverse, from_polar, to_polar
from .kspace import KSpaceMeasurement, SamplingMask, make_gaussian_mask, simulate_measurement
from .simharness import Scenario, make_scenario, normalized_error, run_sweep
from .solver import DeltaProblem, DeltaSolution, solve_delta
from .warp import RigidParams, invert_map, warp_adjoint, warp_apply

__version__ = "0.1.0"

__all__ = [
    "DeltaProblem", "DeltaSolution", "KSpaceMeasurement", "RigidParams", "SamplingMask",
    "Scenario", "TcsProblem", "dft_forward", "dft_inverse", "from_polar", "invert_map",
    "make_gaussian_mask", "make_scenario", "normalized_error", "read", "run_sweep",
    "simulate_measurement", "solve_delta", "tcs_solve", "to_polar", "warp_adjoint",
    "warp_apply", "write", "z_idft",
]
