"""Voxel homogenization of particle composites with a 3D-CNN surrogate.

The package covers the full loop: pack random particle geometries into a
periodic cell, rasterize them to voxel grids, homogenize each grid with a
periodic finite-element solve, train a small convolutional network on the
resulting engineering constants, and push uncertain inputs through either
model.  Everything is deterministic under a fixed seed.
"""

from .errors import (
    DegenerateRange,
    EmptySplit,
    IndexOutOfRange,
    InvalidConfig,
    PackingStalled,
    ShapeMismatch,
    SingularMatrix,
    SolverDiverged,
    TooFewSamples,
    VoxhomogError,
    ZeroLabel,
)
from .homog import (
    DEFAULT_INCLUSION,
    DEFAULT_MATRIX,
    DEFAULT_PHASES,
    EffectiveProperties,
    HomogenizationResult,
    IsotropicPhase,
    extract_engineering_constants,
    homogenize,
    isotropic_stiffness,
    lame_constants,
    solve_load_case,
    unit_strain_cases,
    voigt_reuss_bounds,
)
from .microgeom import (
    DEFAULT_DECAY,
    Ellipsoid,
    RveGeometry,
    SampleSchedule,
    Sphere,
    analytic_vf,
    generate_rve,
    sample_schedule,
)
from .rng import derive_seed, splitmix64
from .voxel import PhaseGrid, load_grid, save_grid, voxelize

__version__ = "0.1.0"
