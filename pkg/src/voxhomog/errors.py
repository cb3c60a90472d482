"""Exception hierarchy.

Everything raised on purpose derives from VoxhomogError so callers (and the
CLI) can separate "bad input" from "bug".  Validation problems raise
InvalidConfig; the remaining classes mark specific runtime failures.
"""

from __future__ import annotations


class VoxhomogError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfig(VoxhomogError):
    """A parameter or configuration value violates a documented precondition."""


class PackingStalled(VoxhomogError):
    """Sequential insertion could not place another particle.

    Raised only once the radius interval has already been shrunk to its lower
    bound and a full attempt budget was exhausted there.
    """

    def __init__(self, message: str, placed: int, achieved_vf: float, target_vf: float):
        super().__init__(message)
        self.placed = placed
        self.achieved_vf = achieved_vf
        self.target_vf = target_vf


class SolverDiverged(VoxhomogError):
    """The iterative solver hit its iteration cap before reaching tolerance."""


class SingularMatrix(VoxhomogError):
    """A matrix that must be invertible (numerically) is not."""


class ShapeMismatch(VoxhomogError):
    """Array or architecture shapes are inconsistent."""


class DegenerateRange(VoxhomogError):
    """A min/max range needed for scaling has zero width."""


class EmptySplit(VoxhomogError):
    """A dataset split that must be non-empty contains no samples."""


class ZeroLabel(VoxhomogError):
    """A relative error was requested against a zero reference value."""


class TooFewSamples(VoxhomogError):
    """A statistic needs more samples than were provided."""


class IndexOutOfRange(VoxhomogError):
    """A layer, axis or slice index does not exist in the given context."""
