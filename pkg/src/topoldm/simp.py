"""SIMP compliance minimization with a density filter and optimality-criteria updates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceError
from .fea import FeaProblem, MaterialModel, StiffnessSystem, penalized_modulus


@dataclass(frozen=True)
class FilterKernel:
    """Linear density filter ``x_tilde = H x / Hs`` with cone weights."""

    nx: int
    ny: int
    r_min: float
    H: sp.csr_matrix = field(repr=False)
    hs: np.ndarray = field(repr=False)

    def neighborhood(self, e: int):
        row = self.H.getrow(e)
        return row.indices.copy(), row.data.copy()

    @property
    def is_identity(self) -> bool:
        return self.H.nnz == self.nx * self.ny


def build_filter(nx: int, ny: int, r_min: float = 2.0) -> FilterKernel:
    """Cone weights ``max(0, r_min - d)`` on Euclidean centroid distance d."""
    if r_min <= 0:
        raise ValueError(f"filter radius must be positive, got {r_min}")
    reach = max(int(math.ceil(r_min)) - 1, 0)
    ii, jj = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    rows, cols, vals = [], [], []
    for di in range(-reach, reach + 1):
        for dj in range(-reach, reach + 1):
            w = r_min - math.hypot(di, dj)
            if w <= 0:
                continue
            ni, nj = ii + di, jj + dj
            ok = (ni >= 0) & (ni < ny) & (nj >= 0) & (nj < nx)
            rows.append((ii * nx + jj)[ok])
            cols.append((ni * nx + nj)[ok])
            vals.append(np.full(ok.sum(), w))
    n = nx * ny
    H = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    H.sort_indices()
    hs = np.asarray(H.sum(axis=1)).ravel()
    return FilterKernel(nx, ny, r_min, H, hs)


def apply_filter(kernel: FilterKernel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = (kernel.H @ x.ravel() / kernel.hs).reshape(x.shape)
    # weighted means of [0, 1] values; clip only strips round-off
    return np.clip(out, 0.0, 1.0)


def filter_chain_rule(kernel: FilterKernel, grad_physical: np.ndarray) -> np.ndarray:
    """Map a gradient w.r.t. filtered densities back to the design densities."""
    g = np.asarray(grad_physical, dtype=float)
    return (kernel.H.T @ (g.ravel() / kernel.hs)).reshape(g.shape)


def compliance_sensitivity(problem: FeaProblem, u: np.ndarray, material: MaterialModel | None = None,
                           system: StiffnessSystem | None = None) -> np.ndarray:
    """dc/dx_e for the densities stored on ``problem`` (the physical densities)."""
    material = material or MaterialModel()
    system = system or StiffnessSystem(problem.nx, problem.ny, problem.fixed_dofs, material)
    x = problem.densities
    return -material.p * x ** (material.p - 1) * (material.e0 - material.e_min) * system.element_energy(u)


@dataclass(frozen=True)
class OptimizerConfig:
    volfrac: float = 0.5
    max_iters: int = 200
    move_limit: float = 0.2
    tol: float = 0.01
    r_min: float = 2.0
    damping: float = 0.5
    vol_tol: float = 1e-4

    def __post_init__(self):
        if not 0 < self.move_limit <= 1:
            raise ValueError(f"move_limit must lie in (0, 1], got {self.move_limit}")
        if self.tol <= 0:
            raise ValueError("convergence tolerance must be positive")
        if not 0 < self.volfrac <= 1:
            raise ValueError(f"volume fraction must lie in (0, 1], got {self.volfrac}")


def update_densities(x: np.ndarray, sensitivities: np.ndarray, f: float, config: OptimizerConfig,
                     kernel: FilterKernel | None = None, volume_sensitivity: np.ndarray | None = None):
    """One optimality-criteria step with bisection on the Lagrange multiplier.

    ``sensitivities`` are w.r.t. the design densities ``x``.  The multiplier is
    bisected until the *filtered* volume fraction matches ``f``.
    """
    x = np.asarray(x, dtype=float)
    dc = np.minimum(np.asarray(sensitivities, dtype=float), 0.0)
    if volume_sensitivity is None:
        volume_sensitivity = np.ones_like(x) if kernel is None else filter_chain_rule(kernel, np.ones_like(x))
    lo = np.maximum(0.0, x - config.move_limit)
    hi = np.minimum(1.0, x + config.move_limit)
    ratio = -dc / volume_sensitivity

    def candidate(lam):
        return np.clip(x * (ratio / lam) ** config.damping, lo, hi)

    def volume(xn):
        return float((xn if kernel is None else apply_filter(kernel, xn)).mean())

    l1, l2 = 0.0, 1e9
    while volume(candidate(l2)) > f and l2 < 1e300:
        l2 *= 1e3
    xn = candidate(l2)
    for _ in range(200):
        lmid = 0.5 * (l1 + l2)
        xn = candidate(lmid) if lmid > 0 else hi
        vol = volume(xn)
        if abs(vol - f) < 1e-9 or (l2 - l1) <= 1e-15 * (l1 + l2):
            break
        if vol > f:
            l1 = lmid
        else:
            l2 = lmid
    vol = volume(xn)
    if abs(vol - f) > config.vol_tol:
        raise ConvergenceError(f"OC bisection ended at volume {vol:.6f}, target {f:.6f}")
    return xn


@dataclass
class OptimizationResult:
    design: np.ndarray
    physical: np.ndarray
    compliance: float
    history: list
    volumes: list
    iterations: int
    converged: bool


def optimize(problem: FeaProblem, material: MaterialModel | None = None,
             config: OptimizerConfig | None = None, callback=None) -> OptimizationResult:
    """Minimize compliance of ``problem`` starting from a uniform field at the target volume."""
    material = material or MaterialModel()
    config = config or OptimizerConfig()
    nx, ny, f = problem.nx, problem.ny, config.volfrac
    system = StiffnessSystem(nx, ny, problem.fixed_dofs, material)
    kernel = build_filter(nx, ny, config.r_min)
    dv = filter_chain_rule(kernel, np.ones((ny, nx)))

    x = np.full((ny, nx), f)
    x_phys = apply_filter(kernel, x)
    history, volumes = [], []
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        u = system.solve(penalized_modulus(x_phys, material), problem.load)
        c = float(problem.load @ u)
        history.append(c)
        volumes.append(float(x_phys.mean()))
        dc = compliance_sensitivity(problem.with_densities(x_phys), u, material, system)
        x_new = update_densities(x, filter_chain_rule(kernel, dc), f, config, kernel, dv)
        change = float(np.abs(x_new - x).max())
        x, x_phys = x_new, apply_filter(kernel, x_new)
        if callback is not None:
            callback(it, c, change)
        if change < config.tol:
            converged = True
            break
    else:
        it = config.max_iters

    u = system.solve(penalized_modulus(x_phys, material), problem.load)
    c_final = float(problem.load @ u)
    history.append(c_final)
    volumes.append(float(x_phys.mean()))
    return OptimizationResult(
        design=x, physical=x_phys, compliance=c_final, history=history,
        volumes=volumes, iterations=it if config.max_iters else 0, converged=converged,
    )
