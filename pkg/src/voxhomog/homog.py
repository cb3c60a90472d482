"""Periodic voxel finite-element homogenization of two-phase elasticity.

Each voxel is one trilinear 8-node brick; opposite faces of the cell share
nodes, so the mesh has exactly n**3 unknown nodes and rigid translation is
the only nullspace.  The displacement splits into an affine part driven by
a prescribed macroscopic strain and a periodic fluctuation; the fluctuation
solves K u = b with b assembled from the phase-contrast part of the load,
which makes b identically zero on single-phase grids.

Voigt convention throughout: order (xx, yy, zz, yz, zx, xy) with
engineering shear strains, so an isotropic material has C44 = mu.  Stresses
and moduli are in the units of the phase moduli (GPa for the defaults);
lengths are in the units of the grid spacing (mm).

Solver: conjugate gradients on all requested load cases at once, Jacobi
preconditioned, with the per-component mean of every preconditioned vector
removed to pin the translation nullspace.  The element stiffness is
evaluated once per phase (2x2x2 Gauss); the global operator is applied
matrix-free by gathering corner displacements slab by slab, multiplying by
the cached 24x24 blocks, and scattering back with periodic wrap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, SingularMatrix, SolverDiverged
from .voxel import PhaseGrid

# Node a of an element sits at offset (a & 1, a >> 1 & 1, a >> 2 & 1); its
# three displacement components occupy rows 3a..3a+2 of element vectors.
_OFFSETS = tuple((a & 1, (a >> 1) & 1, (a >> 2) & 1) for a in range(8))
_GAUSS = 1.0 / np.sqrt(3.0)

# Floats per gathered slab buffer; bounds transient memory at large n.
_SLAB_FLOATS = 6_000_000

DEFAULT_TOL = 1e-8


@dataclass(frozen=True)
class IsotropicPhase:
    """Linear-elastic isotropic constituent (modulus in GPa)."""

    young_modulus: float
    poisson_ratio: float

    def __post_init__(self):
        if self.young_modulus <= 0.0:
            raise InvalidConfig(f"Young's modulus must be positive, got {self.young_modulus}")
        if not (-1.0 < self.poisson_ratio < 0.5):
            raise InvalidConfig(f"Poisson's ratio must lie in (-1, 0.5), got {self.poisson_ratio}")


# Aluminium-like matrix and a much stiffer ceramic particle phase.
DEFAULT_MATRIX = IsotropicPhase(young_modulus=68.9, poisson_ratio=0.33)
DEFAULT_INCLUSION = IsotropicPhase(young_modulus=379.2, poisson_ratio=0.21)
DEFAULT_PHASES = (DEFAULT_MATRIX, DEFAULT_INCLUSION)


def lame_constants(phase: IsotropicPhase) -> tuple[float, float]:
    e, nu = phase.young_modulus, phase.poisson_ratio
    lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = e / (2.0 * (1.0 + nu))
    return lam, mu


def isotropic_stiffness(phase: IsotropicPhase) -> np.ndarray:
    """6x6 Voigt stiffness; C44 = mu because shear strains are engineering."""
    lam, mu = lame_constants(phase)
    c = np.zeros((6, 6))
    c[:3, :3] = lam
    c[np.arange(3), np.arange(3)] = lam + 2.0 * mu
    c[np.arange(3, 6), np.arange(3, 6)] = mu
    return c


def _shape_gradients(xi: float, eta: float, zeta: float, h: float) -> np.ndarray:
    g = np.empty((8, 3))
    for a, (dx, dy, dz) in enumerate(_OFFSETS):
        sx, sy, sz = 2 * dx - 1, 2 * dy - 1, 2 * dz - 1
        g[a, 0] = (2.0 / h) * (sx / 8.0) * (1.0 + sy * eta) * (1.0 + sz * zeta)
        g[a, 1] = (2.0 / h) * (sy / 8.0) * (1.0 + sx * xi) * (1.0 + sz * zeta)
        g[a, 2] = (2.0 / h) * (sz / 8.0) * (1.0 + sx * xi) * (1.0 + sy * eta)
    return g


def _b_matrix(g: np.ndarray) -> np.ndarray:
    b = np.zeros((6, 24))
    for a in range(8):
        dnx, dny, dnz = g[a]
        c = 3 * a
        b[0, c] = dnx
        b[1, c + 1] = dny
        b[2, c + 2] = dnz
        b[3, c + 1] = dnz
        b[3, c + 2] = dny
        b[4, c] = dnz
        b[4, c + 2] = dnx
        b[5, c] = dny
        b[5, c + 1] = dnx
    return b


def centroid_strain_operator(h: float) -> np.ndarray:
    """6x24 map from corner displacements to the element-average strain.

    For trilinear bricks the strain-displacement matrix at the centroid
    equals its volume average, so this single evaluation is exact.
    """
    return _b_matrix(_shape_gradients(0.0, 0.0, 0.0, h))


def element_stiffness(stiffness: np.ndarray, h: float) -> np.ndarray:
    """24x24 stiffness of one cubic brick with edge h (full 2x2x2 Gauss)."""
    k = np.zeros((24, 24))
    w = (h / 2.0) ** 3
    for gx in (-_GAUSS, _GAUSS):
        for gy in (-_GAUSS, _GAUSS):
            for gz in (-_GAUSS, _GAUSS):
                b = _b_matrix(_shape_gradients(gx, gy, gz, h))
                k += b.T @ stiffness @ b * w
    return k


def unit_strain_cases() -> np.ndarray:
    """The six canonical macroscopic strains, one per row (Voigt order)."""
    return np.eye(6)


@dataclass(frozen=True)
class HomogenizationResult:
    """Symmetrized effective stiffness plus solver diagnostics."""

    matrix: np.ndarray  # (6, 6), symmetrized
    asymmetry: float  # max |C - C^T| / max |C| before symmetrization
    iterations: tuple[int, ...]  # CG iterations until each case converged
    volume_fraction: float
    mean_fluctuation: np.ndarray  # (6, cases) volume-average fluctuation strain


class _PeriodicSolver:
    """Matrix-free periodic operator for one grid and phase pair."""

    def __init__(self, grid: PhaseGrid, phases: tuple[IsotropicPhase, IsotropicPhase]):
        matrix_phase, inclusion_phase = phases
        n = grid.n
        h = grid.spacing
        self.n = n
        self.size = n**3

        c0 = isotropic_stiffness(matrix_phase)
        c1 = isotropic_stiffness(inclusion_phase)
        k0 = element_stiffness(c0, h)
        k1 = element_stiffness(c1, h)
        bc = centroid_strain_operator(h)
        l0 = h**3 * bc.T @ c0
        l1 = h**3 * bc.T @ c1
        self.bc = bc

        # Reference phase = majority; only the minority set needs the
        # contrast correction, and single-phase grids get b = 0 exactly.
        mask1 = grid.values.astype(bool)
        if 2 * int(mask1.sum()) <= self.size:
            self.c_ref, self.dc = c0, c1 - c0
            self.k_ref, self.dk = k0, k1 - k0
            self.dl = l1 - l0
            minority = mask1
        else:
            self.c_ref, self.dc = c1, c0 - c1
            self.k_ref, self.dk = k1, k0 - k1
            self.dl = l0 - l1
            minority = ~mask1
        self.minority_flat = minority.reshape(-1)
        self.minority_field = minority.astype(np.float64).reshape(-1)

        self.slab = max(1, _SLAB_FLOATS // (24 * 6 * n * n))
        # Elements are flat in C order of (x, y, z); a z-slab is a strided
        # subset of every (x, y) column.  Cache its indices and the minority
        # positions inside it.
        self._slab_cache = []
        base = np.arange(n * n) * n
        for z0 in range(0, n, self.slab):
            z1 = min(z0 + self.slab, n)
            idx = (base[:, None] + np.arange(z0, z1)[None, :]).reshape(-1)
            sel = np.flatnonzero(self.minority_flat[idx])
            self._slab_cache.append((z0, z1, idx, sel))
        self.diag = self._build_diag(np.diag(self.k_ref).copy(), np.diag(self.dk).copy())

    # -- padded-field helpers -------------------------------------------------

    def _pad(self, u: np.ndarray, out: np.ndarray) -> np.ndarray:
        # u: (C, 3, n, n, n) -> periodic ghost layer on the high faces.
        n = self.n
        out[:, :, :n, :n, :n] = u
        out[:, :, n, :n, :n] = u[:, :, 0]
        out[:, :, :, n, :n] = out[:, :, :, 0, :n]
        out[:, :, :, :, n] = out[:, :, :, :, 0]
        return out

    def _fold(self, pad: np.ndarray) -> np.ndarray:
        n = self.n
        pad[:, :, 0] += pad[:, :, n]
        pad[:, :, :, 0] += pad[:, :, :, n]
        pad[:, :, :, :, 0] += pad[:, :, :, :, n]
        return pad[:, :, :n, :n, :n]

    def _gather(self, up: np.ndarray, z0: int, z1: int) -> np.ndarray:
        # Returns e with e[3a+c, case, :] = displacement component c of
        # corner a for all elements in the z-slab [z0, z1).
        n = self.n
        cases = up.shape[0]
        ns = n * n * (z1 - z0)
        e = np.empty((24, cases, ns))
        for a, (dx, dy, dz) in enumerate(_OFFSETS):
            blk = up[:, :, dx : dx + n, dy : dy + n, dz + z0 : dz + z1]
            e[3 * a : 3 * a + 3] = blk.transpose(1, 0, 2, 3, 4).reshape(3, cases, ns)
        return e

    def _scatter(self, f: np.ndarray, z0: int, z1: int, pad: np.ndarray) -> None:
        n = self.n
        cases = pad.shape[0]
        zs = z1 - z0
        for a, (dx, dy, dz) in enumerate(_OFFSETS):
            blk = f[3 * a : 3 * a + 3].reshape(3, cases, n, n, zs)
            pad[:, :, dx : dx + n, dy : dy + n, dz + z0 : dz + z1] += blk.transpose(
                1, 0, 2, 3, 4
            )

    def _build_diag(self, kd_ref: np.ndarray, dkd: np.ndarray) -> np.ndarray:
        n = self.n
        mask = self.minority_field.reshape(n, n, n)
        pad = np.zeros((1, 3, n + 1, n + 1, n + 1))
        for a, (dx, dy, dz) in enumerate(_OFFSETS):
            base = kd_ref[3 * a : 3 * a + 3][:, None, None, None]
            corr = dkd[3 * a : 3 * a + 3][:, None, None, None] * mask[None]
            pad[0, :, dx : dx + n, dy : dy + n, dz : dz + n] += base + corr
        diag = self._fold(pad)[0]
        if not np.all(diag > 0.0):
            raise SingularMatrix("assembled Jacobi diagonal is not strictly positive")
        return diag.reshape(1, 3, -1)

    # -- operator, load, projection ------------------------------------------

    def _apply(self, u_flat: np.ndarray, up: np.ndarray, opad: np.ndarray) -> np.ndarray:
        cases = u_flat.shape[0]
        n = self.n
        self._pad(u_flat.reshape(cases, 3, n, n, n), up)
        opad[:] = 0.0
        for z0, z1, _, sel in self._slab_cache:
            ns = n * n * (z1 - z0)
            e = self._gather(up, z0, z1)
            f = (self.k_ref @ e.reshape(24, cases * ns)).reshape(24, cases, ns)
            if sel.size:
                esub = e[:, :, sel].reshape(24, cases * sel.size)
                f[:, :, sel] += (self.dk @ esub).reshape(24, cases, sel.size)
            self._scatter(f, z0, z1, opad)
        return self._fold(opad).reshape(cases, -1).copy()

    def load_vector(self, macro: np.ndarray) -> np.ndarray:
        """Assemble b for each macroscopic strain row of ``macro``."""
        cases = macro.shape[0]
        n = self.n
        dlm = self.dl @ macro.T  # (24, cases)
        pad = np.zeros((cases, 3, n + 1, n + 1, n + 1))
        for z0, z1, idx, _ in self._slab_cache:
            maskf = self.minority_field[idx]
            f = dlm[:, :, None] * maskf[None, None, :]
            self._scatter(f, z0, z1, pad)
        b = -self._fold(pad).reshape(cases, -1)
        self._project(b)
        return b

    @staticmethod
    def _project(v_flat: np.ndarray) -> None:
        # Remove the per-component mean: pins rigid translation.
        v3 = v_flat.reshape(v_flat.shape[0], 3, -1)
        v3 -= v3.mean(axis=2, keepdims=True)

    def _precondition(self, r_flat: np.ndarray) -> np.ndarray:
        z = (r_flat.reshape(r_flat.shape[0], 3, -1) / self.diag).reshape(r_flat.shape)
        self._project(z)
        return z

    # -- block PCG ------------------------------------------------------------

    def solve(self, macro: np.ndarray, tol: float, max_iters: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (fluctuation displacements (cases, 3*n**3), iteration counts)."""
        cases = macro.shape[0]
        n = self.n
        b = self.load_vector(macro)
        bnorm = np.linalg.norm(b, axis=1)
        run = bnorm > 0.0  # single-phase loads are solved by u = 0 exactly

        x = np.zeros_like(b)
        iters = np.zeros(cases, dtype=int)
        if not run.any():
            return x, iters

        up = np.empty((cases, 3, n + 1, n + 1, n + 1))
        opad = np.empty_like(up)

        r = b.copy()
        z = self._precondition(r)
        p = z.copy()
        rz = np.einsum("ck,ck->c", r, z)
        rnorm = bnorm.copy()
        limit = tol * bnorm
        recorded = ~run

        for it in range(1, max_iters + 1):
            q = self._apply(p, up, opad)
            self._project(q)
            pq = np.einsum("ck,ck->c", p, q)
            alpha = np.divide(rz, pq, out=np.zeros(cases), where=run & (pq > 0.0))
            x += alpha[:, None] * p
            r -= alpha[:, None] * q
            rnorm = np.linalg.norm(r, axis=1)

            done_now = run & ~recorded & (rnorm <= limit)
            iters[done_now] = it
            recorded |= done_now
            if np.all(rnorm[run] <= limit[run]):
                return x, iters

            z = self._precondition(r)
            rz_new = np.einsum("ck,ck->c", r, z)
            beta = np.divide(rz_new, rz, out=np.zeros(cases), where=run & (rz > 0.0))
            p = z + beta[:, None] * p
            rz = rz_new

        worst = float(np.max(rnorm[run] / bnorm[run]))
        raise SolverDiverged(
            f"block CG hit the {max_iters}-iteration cap with relative residual {worst:.3e} "
            f"(tol {tol:.1e}, n={n})"
        )

    # -- post-processing ------------------------------------------------------

    def element_stress(
        self, u_flat: np.ndarray, macro: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-element stresses (6, cases, n**3), their mean, and the mean
        fluctuation strain."""
        cases = macro.shape[0]
        n = self.n
        up = np.empty((cases, 3, n + 1, n + 1, n + 1))
        self._pad(u_flat.reshape(cases, 3, n, n, n), up)

        sigma = np.empty((6, cases, self.size))
        fluct_sum = np.zeros((6, cases))
        for z0, z1, idx, sel in self._slab_cache:
            ns = n * n * (z1 - z0)
            e = self._gather(up, z0, z1)
            eps = (self.bc @ e.reshape(24, cases * ns)).reshape(6, cases, ns)
            fluct_sum += eps.sum(axis=2)
            total = eps + macro.T[:, :, None]
            s = (self.c_ref @ total.reshape(6, cases * ns)).reshape(6, cases, ns)
            if sel.size:
                tsub = total[:, :, sel].reshape(6, cases * sel.size)
                s[:, :, sel] += (self.dc @ tsub).reshape(6, cases, sel.size)
            sigma[:, :, idx] = s
        return sigma, sigma.mean(axis=2), fluct_sum / self.size


def _check_solver_args(tol: float, max_iters, n: int) -> int:
    if not (1e-12 < tol < 1e-2):
        raise InvalidConfig(f"tol must lie in (1e-12, 1e-2), got {tol}")
    if max_iters is None:
        max_iters = 10 * n**3
    if max_iters < 1:
        raise InvalidConfig(f"max_iters must be >= 1, got {max_iters}")
    return max_iters


def homogenize(
    grid: PhaseGrid,
    phases: tuple[IsotropicPhase, IsotropicPhase] = DEFAULT_PHASES,
    tol: float = DEFAULT_TOL,
    max_iters: int | None = None,
) -> HomogenizationResult:
    """Effective 6x6 stiffness from six canonical unit-strain solves.

    Column m of the result is the volume-average stress under unit
    macroscopic strain m.  The raw matrix is symmetrized; its relative
    asymmetry (discretization + solver tolerance) is reported back.
    """
    max_iters = _check_solver_args(tol, max_iters, grid.n)
    solver = _PeriodicSolver(grid, phases)
    macro = unit_strain_cases()
    u, iters = solver.solve(macro, tol, max_iters)
    _, mean_stress, mean_fluct = solver.element_stress(u, macro)
    c_raw = mean_stress  # (6 stress components, 6 cases) = columns of C
    scale = float(np.max(np.abs(c_raw)))
    asymmetry = float(np.max(np.abs(c_raw - c_raw.T)) / scale)
    return HomogenizationResult(
        matrix=0.5 * (c_raw + c_raw.T),
        asymmetry=asymmetry,
        iterations=tuple(int(k) for k in iters),
        volume_fraction=grid.volume_fraction(),
        mean_fluctuation=mean_fluct,
    )


def solve_load_case(
    grid: PhaseGrid,
    phases: tuple[IsotropicPhase, IsotropicPhase] = DEFAULT_PHASES,
    macro_strain: np.ndarray | int = 0,
    tol: float = DEFAULT_TOL,
    max_iters: int | None = None,
) -> np.ndarray:
    """Per-voxel stress field (6, n, n, n) for one macroscopic strain.

    ``macro_strain`` is either an index 0..5 picking a canonical unit
    strain, or an arbitrary 6-vector in Voigt order.  Stresses are element
    averages (one element per voxel).
    """
    max_iters = _check_solver_args(tol, max_iters, grid.n)
    if isinstance(macro_strain, (int, np.integer)):
        if not 0 <= macro_strain < 6:
            raise InvalidConfig(f"canonical case index must be 0..5, got {macro_strain}")
        macro = unit_strain_cases()[[macro_strain]]
    else:
        macro = np.asarray(macro_strain, dtype=float).reshape(1, 6)
    solver = _PeriodicSolver(grid, phases)
    u, _ = solver.solve(macro, tol, max_iters)
    sigma, _, _ = solver.element_stress(u, macro)
    n = grid.n
    return sigma[:, 0, :].reshape(6, n, n, n)


# -- engineering constants ----------------------------------------------------


@dataclass(frozen=True)
class EffectiveProperties:
    """The twelve orthotropic engineering constants, moduli in GPa."""

    E11: float
    E22: float
    E33: float
    G23: float
    G13: float
    G12: float
    nu21: float
    nu31: float
    nu12: float
    nu32: float
    nu13: float
    nu23: float

    COMPONENTS = (
        "E11", "E22", "E33", "G23", "G13", "G12",
        "nu21", "nu31", "nu12", "nu32", "nu13", "nu23",
    )

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in self.COMPONENTS])

    @classmethod
    def from_array(cls, values) -> "EffectiveProperties":
        values = np.asarray(values, dtype=float)
        if values.shape != (12,):
            raise InvalidConfig(f"expected 12 values, got shape {values.shape}")
        return cls(**{name: float(v) for name, v in zip(cls.COMPONENTS, values)})


def extract_engineering_constants(matrix: np.ndarray) -> EffectiveProperties:
    """Engineering constants from a symmetric 6x6 Voigt stiffness.

    The matrix is treated as orthotropic: the 3x3 normal block is inverted
    on its own and the shear block is taken as diagonal, so any small
    normal-shear coupling (a random microstructure is only statistically
    orthotropic) is zeroed rather than folded into the constants.  Moduli
    come from the compliance diagonal, Poisson's ratios from its normal
    off-diagonals (nu21 = -S12 * E22 and cyclic); compliance symmetry ties
    the pairs together: nu21 / E22 = nu12 / E11 and cyclic.
    """
    c = np.asarray(matrix, dtype=float)
    if c.shape != (6, 6):
        raise InvalidConfig(f"expected a 6x6 matrix, got shape {c.shape}")
    normal = c[:3, :3]
    shear = np.diag(c)[3:]
    if np.linalg.cond(normal) > 1e12:
        raise SingularMatrix("normal stiffness block is numerically singular")
    if np.any(shear <= 0.0):
        raise SingularMatrix(f"shear diagonal must be positive, got {shear}")
    s = np.linalg.inv(normal)
    e11, e22, e33 = 1.0 / s[0, 0], 1.0 / s[1, 1], 1.0 / s[2, 2]
    return EffectiveProperties(
        E11=e11,
        E22=e22,
        E33=e33,
        G23=shear[0],
        G13=shear[1],
        G12=shear[2],
        nu21=-s[0, 1] * e22,
        nu31=-s[0, 2] * e33,
        nu12=-s[1, 0] * e11,
        nu32=-s[1, 2] * e33,
        nu13=-s[2, 0] * e11,
        nu23=-s[2, 1] * e22,
    )


def voigt_reuss_bounds(
    phases: tuple[IsotropicPhase, IsotropicPhase], volume_fraction: float
) -> tuple[float, float]:
    """(Reuss, Voigt) bounds on the effective Young's modulus."""
    if not (0.0 <= volume_fraction <= 1.0):
        raise InvalidConfig(f"volume fraction must lie in [0, 1], got {volume_fraction}")
    matrix_phase, inclusion_phase = phases
    em, ei = matrix_phase.young_modulus, inclusion_phase.young_modulus
    vf = volume_fraction
    voigt = (1.0 - vf) * em + vf * ei
    reuss = 1.0 / ((1.0 - vf) / em + vf / ei)
    return reuss, voigt
