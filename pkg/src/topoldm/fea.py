"""Plane-stress finite element analysis on a regular grid of unit square elements.

Grid conventions used throughout the package:

* Element ``(i, j)`` sits in raster row ``i`` (top row is 0) and column ``j``;
  its flat index is ``e = i * nx + j`` so fields reshape to ``(ny, nx)``.
* Node ``(r, c)`` with ``0 <= r <= ny``, ``0 <= c <= nx`` has flat index
  ``n = r * (nx + 1) + c`` and degrees of freedom ``2n`` (x) and ``2n + 1`` (y).
* Physical coordinates are ``x = c`` and ``y = ny - r``, i.e. +y points up
  the raster.  Load components and displacements use this frame.
* Element dofs are ordered lower-left, lower-right, upper-right, upper-left.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DensityDomainError, SingularSystemError, SolverError

RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class MaterialModel:
    e0: float = 1.0
    e_min: float = 1e-3
    nu: float = 0.3
    p: float = 3.0

    def __post_init__(self):
        if not 0 < self.e_min < self.e0:
            raise ValueError(f"need 0 < e_min < e0, got e_min={self.e_min}, e0={self.e0}")
        if not 0 <= self.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in [0, 0.5), got {self.nu}")
        if self.p < 1:
            raise ValueError(f"penalization exponent must be >= 1, got {self.p}")

    def constitutive(self) -> np.ndarray:
        """Plane-stress D matrix for unit modulus."""
        nu = self.nu
        return np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, (1.0 - nu) / 2.0]]) / (1.0 - nu**2)


def element_stiffness(material: MaterialModel | None = None) -> np.ndarray:
    """Closed-form 8x8 stiffness of a unit square bilinear element with E = 1."""
    nu = (material or MaterialModel()).nu
    k = np.array([
        1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
        -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8,
    ])
    idx = np.array([
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ])
    return k[idx] / (1.0 - nu**2)


# strain-displacement matrix evaluated at the element center
_B_CENTER = np.array([
    [-0.5, 0.0, 0.5, 0.0, 0.5, 0.0, -0.5, 0.0],
    [0.0, -0.5, 0.0, -0.5, 0.0, 0.5, 0.0, 0.5],
    [-0.5, -0.5, -0.5, 0.5, 0.5, 0.5, 0.5, -0.5],
])


def penalized_modulus(x, material: MaterialModel | None = None):
    """SIMP modulus ``E_min + x**p (E0 - E_min)``; accepts scalars or arrays."""
    m = material or MaterialModel()
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DensityDomainError("densities must lie in [0, 1]")
    out = m.e_min + arr**m.p * (m.e0 - m.e_min)
    return float(out) if out.ndim == 0 else out


def node_index(r, c, nx):
    return r * (nx + 1) + c


def element_nodes(nx: int, ny: int) -> np.ndarray:
    """(nx*ny, 4) node indices per element in LL, LR, UR, UL order."""
    i, j = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    i, j = i.ravel(), j.ravel()
    return np.stack([
        node_index(i + 1, j, nx), node_index(i + 1, j + 1, nx),
        node_index(i, j + 1, nx), node_index(i, j, nx),
    ], axis=1)


def element_dofs(nx: int, ny: int) -> np.ndarray:
    nodes = element_nodes(nx, ny)
    return np.stack([2 * nodes, 2 * nodes + 1], axis=2).reshape(-1, 8)


def node_coordinates(nx: int, ny: int) -> np.ndarray:
    """(n_nodes, 2) physical (x, y) coordinates."""
    r, c = np.meshgrid(np.arange(ny + 1), np.arange(nx + 1), indexing="ij")
    return np.stack([c.ravel(), (ny - r).ravel()], axis=1).astype(float)


def boundary_nodes(nx: int, ny: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(ny + 1), np.arange(nx + 1), indexing="ij")
    mask = (r == 0) | (r == ny) | (c == 0) | (c == nx)
    return np.flatnonzero(mask.ravel())


@dataclass
class FeaProblem:
    nx: int
    ny: int
    fixed_dofs: np.ndarray
    load: np.ndarray
    densities: np.ndarray

    def __post_init__(self):
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        self.load = np.asarray(self.load, dtype=float)
        self.densities = np.asarray(self.densities, dtype=float)
        ndof = self.ndof
        if self.fixed_dofs.size == 0:
            raise ValueError("at least one dof must be constrained")
        if self.fixed_dofs[0] < 0 or self.fixed_dofs[-1] >= ndof:
            raise ValueError("fixed dof index out of range")
        if self.load.shape != (ndof,):
            raise ValueError(f"load vector must have shape ({ndof},), got {self.load.shape}")
        if self.densities.shape != (self.ny, self.nx):
            raise ValueError(f"densities must have shape ({self.ny}, {self.nx}), got {self.densities.shape}")
        loaded_nodes = np.unique(np.flatnonzero(self.load) // 2)
        if not np.isin(loaded_nodes, boundary_nodes(self.nx, self.ny)).all():
            raise ValueError("loads may only be applied at boundary nodes")

    @property
    def ndof(self) -> int:
        return 2 * (self.nx + 1) * (self.ny + 1)

    def with_densities(self, densities) -> "FeaProblem":
        return FeaProblem(self.nx, self.ny, self.fixed_dofs, self.load, densities)


@dataclass
class FeaSolution:
    u: np.ndarray
    compliance: float
    von_mises: np.ndarray = field(repr=False)
    sed: np.ndarray = field(repr=False)


def check_constraints(nx: int, ny: int, fixed_dofs) -> None:
    """Raise SingularSystemError unless the constraints remove all rigid-body modes."""
    xy = node_coordinates(nx, ny)
    n = xy.shape[0]
    modes = np.zeros((2 * n, 3))
    modes[0::2, 0] = 1.0
    modes[1::2, 1] = 1.0
    modes[0::2, 2] = -xy[:, 1]
    modes[1::2, 2] = xy[:, 0]
    restricted = modes[np.asarray(fixed_dofs, dtype=np.int64)]
    rank = np.linalg.matrix_rank(restricted) if restricted.size else 0
    if rank < 3:
        raise SingularSystemError(
            f"constraints leave {3 - rank} rigid-body mode(s) free; stiffness matrix is singular"
        )


class StiffnessSystem:
    """Precomputed sparsity pattern for repeated solves on a fixed mesh and constraint set."""

    def __init__(self, nx, ny, fixed_dofs, material: MaterialModel | None = None):
        self.nx, self.ny = nx, ny
        self.material = material or MaterialModel()
        self.ke = element_stiffness(self.material)
        self.edofs = element_dofs(nx, ny)
        self.ndof = 2 * (nx + 1) * (ny + 1)
        self.fixed = np.unique(np.asarray(fixed_dofs, dtype=np.int64))
        check_constraints(nx, ny, self.fixed)
        self.free = np.setdiff1d(np.arange(self.ndof), self.fixed)
        reduced = -np.ones(self.ndof, dtype=np.int64)
        reduced[self.free] = np.arange(self.free.size)
        rows = np.repeat(self.edofs, 8, axis=1).ravel()
        cols = np.tile(self.edofs, (1, 8)).ravel()
        keep = (reduced[rows] >= 0) & (reduced[cols] >= 0)
        self._keep = keep
        self._rows = reduced[rows[keep]]
        self._cols = reduced[cols[keep]]
        # upper-band storage slots for the symmetric reduced matrix
        n = self.free.size
        upper = self._cols >= self._rows
        self._upper = upper
        self.bandwidth = int((self._cols - self._rows)[upper].max()) if n else 0
        self._band_slot = (self.bandwidth + self._rows[upper] - self._cols[upper]) * n + self._cols[upper]

    def reduced_matrix(self, moduli: np.ndarray) -> sp.csc_matrix:
        vals = (moduli.ravel()[:, None] * self.ke.ravel()[None, :]).ravel()[self._keep]
        n = self.free.size
        return sp.csc_matrix((vals, (self._rows, self._cols)), shape=(n, n))

    def full_matrix(self, moduli: np.ndarray) -> sp.csr_matrix:
        rows = np.repeat(self.edofs, 8, axis=1).ravel()
        cols = np.tile(self.edofs, (1, 8)).ravel()
        vals = (moduli.ravel()[:, None] * self.ke.ravel()[None, :]).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.ndof, self.ndof))

    def solve(self, moduli: np.ndarray, load: np.ndarray) -> np.ndarray:
        u = np.zeros(self.ndof)
        f_free = load[self.free]
        f_norm = np.linalg.norm(f_free)
        if f_norm == 0.0:
            return u
        n = self.free.size
        vals = (moduli.ravel()[:, None] * self.ke.ravel()[None, :]).ravel()[self._keep]
        band = np.bincount(self._band_slot, weights=vals[self._upper], minlength=(self.bandwidth + 1) * n)
        try:
            chol = sla.cholesky_banded(band.reshape(self.bandwidth + 1, n), lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"stiffness matrix is not positive definite: {exc}") from exc
        u_free = sla.cho_solve_banded((chol, False), f_free, check_finite=False)
        if not np.all(np.isfinite(u_free)):
            raise SingularSystemError("direct factorization produced non-finite displacements")
        u[self.free] = u_free
        residual = np.linalg.norm(self.apply(moduli, u)[self.free] - f_free) / f_norm
        if residual > RESIDUAL_TOL:
            raise SolverError(f"linear solve residual {residual:.3e} exceeds {RESIDUAL_TOL:g}", residual)
        return u

    def apply(self, moduli: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Matrix-free product ``K u`` on the full dof vector."""
        ue = u[self.edofs]
        contrib = moduli.ravel()[:, None] * (ue @ self.ke)
        return np.bincount(self.edofs.ravel(), weights=contrib.ravel(), minlength=self.ndof)

    def element_energy(self, u: np.ndarray) -> np.ndarray:
        """``u_e^T k_e u_e`` per element for unit modulus, shape (ny, nx)."""
        ue = u[self.edofs]
        return np.einsum("ei,ij,ej->e", ue, self.ke, ue).reshape(self.ny, self.nx)


def assemble_and_solve(problem: FeaProblem, material: MaterialModel | None = None) -> FeaSolution:
    material = material or MaterialModel()
    system = StiffnessSystem(problem.nx, problem.ny, problem.fixed_dofs, material)
    moduli = penalized_modulus(problem.densities, material)
    u = system.solve(moduli, problem.load)
    compliance = float(problem.load @ u)
    vm, sed = derive_fields(problem, u, material)
    return FeaSolution(u=u, compliance=compliance, von_mises=vm, sed=sed)


def center_strains(nx: int, ny: int, u: np.ndarray) -> np.ndarray:
    """(ny, nx, 3) engineering strains (eps_x, eps_y, gamma_xy) at element centers."""
    ue = u[element_dofs(nx, ny)]
    return (ue @ _B_CENTER.T).reshape(ny, nx, 3)


def stress_invariants(strain: np.ndarray, modulus, material: MaterialModel):
    """Von Mises stress and strain energy density from strains (..., 3)."""
    sigma = np.asarray(modulus)[..., None] * (strain @ material.constitutive().T)
    sx, sy, txy = sigma[..., 0], sigma[..., 1], sigma[..., 2]
    vm = np.sqrt(np.maximum(sx**2 + sy**2 - sx * sy + 3.0 * txy**2, 0.0))
    sed = 0.5 * np.sum(strain * sigma, axis=-1)
    return vm, sed


def derive_fields(problem: FeaProblem, u: np.ndarray, material: MaterialModel | None = None):
    """Element-center von Mises stress and strain energy density fields."""
    material = material or MaterialModel()
    strain = center_strains(problem.nx, problem.ny, u)
    moduli = penalized_modulus(problem.densities, material)
    return stress_invariants(strain, moduli, material)


def element_strain_energy(problem: FeaProblem, u: np.ndarray, material: MaterialModel | None = None):
    """Exactly integrated element strain energy ``0.5 E_e u_e^T k_0 u_e``."""
    material = material or MaterialModel()
    ke = element_stiffness(material)
    ue = u[element_dofs(problem.nx, problem.ny)]
    energy = 0.5 * np.einsum("ei,ij,ej->e", ue, ke, ue).reshape(problem.ny, problem.nx)
    return penalized_modulus(problem.densities, material) * energy
