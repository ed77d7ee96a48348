"""Randomized design problems, the boundary-condition catalog, records and augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import SamplingError, SingularSystemError, TopoLDMError
from .fea import (
    FeaProblem, MaterialModel, StiffnessSystem, boundary_nodes, check_constraints, derive_fields,
    node_index, penalized_modulus,
)
from .simp import OptimizerConfig, optimize

N_ANGLES = 6
VF_RANGE = (0.30, 0.50)
CHANNELS = ("topology", "volume_fraction", "von_mises", "sed", "load_x", "load_y")
MAX_TRIES = 100

# catalog points walk the boundary clockwise (as displayed) from the top-left corner
POINT_NAMES = ("top_left", "top", "top_right", "right", "bottom_right", "bottom", "bottom_left", "left")


@dataclass(frozen=True)
class BoundaryCondition:
    id: int
    kind: str
    name: str
    nodes: tuple

    def dofs(self) -> np.ndarray:
        n = np.asarray(self.nodes, dtype=np.int64)
        return np.sort(np.concatenate([2 * n, 2 * n + 1]))


def _catalog_points(n: int):
    h = n // 2
    return [(0, 0), (0, h), (0, n), (h, n), (n, n), (n, h), (n, 0), (h, 0)]


def _segment(a, b):
    (r0, c0), (r1, c1) = a, b
    steps = max(abs(r1 - r0), abs(c1 - c0))
    return [(r0 + (r1 - r0) * k // steps, c0 + (c1 - c0) * k // steps) for k in range(steps + 1)]


@lru_cache(maxsize=None)
def bc_catalog(resolution: int = 64) -> tuple:
    """The 16 boundary conditions: 8 single points then 8 half-edge segments.

    Edge ``8 + k`` spans catalog point ``k`` to point ``k + 1``.
    """
    n = resolution
    pts = _catalog_points(n)
    out = []
    for k, (r, c) in enumerate(pts):
        out.append(BoundaryCondition(k, "point", POINT_NAMES[k], (node_index(r, c, n),)))
    for k in range(8):
        seg = _segment(pts[k], pts[(k + 1) % 8])
        nodes = tuple(sorted(node_index(r, c, n) for r, c in seg))
        out.append(BoundaryCondition(8 + k, "edge", f"{POINT_NAMES[k]}-{POINT_NAMES[(k + 1) % 8]}", nodes))
    return tuple(out)


def fixed_dofs_for(bc_set, resolution: int) -> np.ndarray:
    cat = bc_catalog(resolution)
    return np.unique(np.concatenate([cat[i].dofs() for i in bc_set]))


def boundary_elements(resolution: int) -> np.ndarray:
    n = resolution
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.flatnonzero(((i == 0) | (i == n - 1) | (j == 0) | (j == n - 1)).ravel())


def load_node_for_element(element: int, resolution: int) -> int:
    """Boundary node of ``element`` closest to its center; ties go to the lower node index."""
    n = resolution
    i, j = divmod(int(element), n)
    on_boundary = set(boundary_nodes(n, n).tolist())
    best = None
    for r, c in ((i, j), (i, j + 1), (i + 1, j), (i + 1, j + 1)):
        node = node_index(r, c, n)
        if node not in on_boundary:
            continue
        d = math.hypot(r - (i + 0.5), c - (j + 0.5))
        key = (round(d, 12), node)
        if best is None or key < best:
            best = key
    if best is None:
        raise ValueError(f"element {element} is not on the boundary")
    return best[1]


@dataclass(frozen=True)
class Problem:
    resolution: int
    bc_set: tuple
    load_element: int
    load_angle: float
    target_vf: float
    rng_seed: int | None = None
    angle_index: int | None = None
    load_node: int | None = None
    augmentation: str = "none"

    def __post_init__(self):
        if not 1 <= len(self.bc_set) <= 4:
            raise ValueError(f"a problem needs 1-4 boundary conditions, got {len(self.bc_set)}")
        if any(not 0 <= b < 16 for b in self.bc_set):
            raise ValueError(f"boundary condition ids must be in [0, 16), got {self.bc_set}")
        if self.load_element not in set(boundary_elements(self.resolution).tolist()):
            raise ValueError(f"load element {self.load_element} is not on the boundary")

    @property
    def node(self) -> int:
        if self.load_node is not None:
            return self.load_node
        return load_node_for_element(self.load_element, self.resolution)

    @property
    def load_vector(self):
        return math.cos(self.load_angle), math.sin(self.load_angle)

    def fixed_dofs(self) -> np.ndarray:
        return fixed_dofs_for(self.bc_set, self.resolution)

    def to_fea(self, densities=None) -> FeaProblem:
        n = self.resolution
        load = np.zeros(2 * (n + 1) ** 2)
        fx, fy = self.load_vector
        load[2 * self.node] = fx
        load[2 * self.node + 1] = fy
        if densities is None:
            densities = np.full((n, n), self.target_vf)
        return FeaProblem(n, n, self.fixed_dofs(), load, densities)

    def load_channels(self) -> tuple:
        n = self.resolution
        lx = np.zeros((n, n))
        ly = np.zeros((n, n))
        fx, fy = self.load_vector
        i, j = divmod(self.load_element, n)
        lx[i, j], ly[i, j] = fx, fy
        return lx, ly


def _well_posed(bc_set, resolution) -> bool:
    try:
        check_constraints(resolution, resolution, fixed_dofs_for(bc_set, resolution))
    except SingularSystemError:
        return False
    return True


def sample_problem(seed: int, resolution: int = 64) -> Problem:
    """Draw a random problem; a pure function of ``(seed, resolution)``.

    The number of conditions is drawn first and kept; only the condition ids
    (until the constraints suppress rigid motion) and load element (until its
    load node is free) are redrawn, so marginal distributions stay intact.
    """
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    for _ in range(MAX_TRIES):
        bc_set = tuple(sorted(int(b) for b in rng.choice(16, size=k, replace=False)))
        if _well_posed(bc_set, resolution):
            break
    else:
        raise SamplingError(f"seed {seed}: no well-posed boundary set after {MAX_TRIES} draws")
    fixed_nodes = set((fixed_dofs_for(bc_set, resolution) // 2).tolist())
    candidates = boundary_elements(resolution)
    for _ in range(MAX_TRIES):
        elem = int(rng.choice(candidates))
        if load_node_for_element(elem, resolution) not in fixed_nodes:
            break
    else:
        raise SamplingError(f"seed {seed}: load element always lands on a fixed node")
    a = int(rng.integers(N_ANGLES))
    f = float(rng.uniform(*VF_RANGE))
    return Problem(resolution, bc_set, elem, 2 * math.pi * a / N_ANGLES, f, int(seed), a,
                   load_node_for_element(elem, resolution))


@dataclass
class SampleRecord:
    channels: np.ndarray
    problem: Problem
    gt_compliance: float
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3 or self.channels.shape[0] != len(CHANNELS):
            raise ValueError(f"record channels must be (6, H, W), got {self.channels.shape}")

    @property
    def topology(self):
        return self.channels[0]

    @property
    def conditions(self):
        return self.channels[1:]


def condition_channels(problem: Problem, material: MaterialModel | None = None, normalize=False) -> np.ndarray:
    """(5, H, W) conditioning raster computed on the uniform unoptimized domain."""
    material = material or MaterialModel()
    n = problem.resolution
    fea = problem.to_fea()
    system = StiffnessSystem(n, n, fea.fixed_dofs, material)
    u = system.solve(penalized_modulus(fea.densities, material), fea.load)
    vm, sed = derive_fields(fea, u, material)
    if normalize:
        vm = vm / vm.max() if vm.max() > 0 else vm
        sed = sed / sed.max() if sed.max() > 0 else sed
    lx, ly = problem.load_channels()
    return np.stack([np.full((n, n), problem.target_vf), vm, sed, lx, ly])


class RecordError(TopoLDMError):
    def __init__(self, seed, cause):
        super().__init__(f"problem seed {seed}: {cause}")
        self.seed = seed
        self.__cause__ = cause


def build_record(problem: Problem, material: MaterialModel | None = None,
                 config: OptimizerConfig | None = None, normalize: bool = False) -> SampleRecord:
    material = material or MaterialModel()
    base = config or OptimizerConfig()
    config = replace(base, volfrac=problem.target_vf)
    try:
        cond = condition_channels(problem, material, normalize)
        result = optimize(problem.to_fea(), material, config)
    except TopoLDMError as exc:
        raise RecordError(problem.rng_seed, exc) from exc
    channels = np.concatenate([result.physical[None], cond], axis=0)
    return SampleRecord(channels, problem, result.compliance, normalized=normalize,
                        meta={"iterations": result.iterations})


# --- augmentation -------------------------------------------------------

def _transform_node(op, n, node):
    r, c = divmod(int(node), n + 1)
    if op == "rot90":
        r, c = n - c, r
    elif op == "mirror_lr":
        c = n - c
    elif op == "mirror_ud":
        r = n - r
    return r * (n + 1) + c


def _transform_element(op, n, e):
    i, j = divmod(int(e), n)
    if op == "rot90":
        i, j = n - 1 - j, i
    elif op == "mirror_lr":
        j = n - 1 - j
    elif op == "mirror_ud":
        i = n - 1 - i
    return i * n + j


def _transform_raster(op, a):
    if op == "rot90":
        return np.rot90(a, 1, axes=(-2, -1))
    if op == "mirror_lr":
        return a[..., :, ::-1]
    if op == "mirror_ud":
        return a[..., ::-1, :]
    raise ValueError(op)


def _transform_vector(op, vx, vy):
    if op == "rot90":
        return -vy, vx
    if op == "mirror_lr":
        return -vx, vy
    return vx, -vy


def _transform_angle(op, theta):
    if op == "rot90":
        theta = theta + math.pi / 2
    elif op == "mirror_lr":
        theta = math.pi - theta
    else:
        theta = -theta
    return theta % (2 * math.pi)


@lru_cache(maxsize=None)
def catalog_permutation(op: str, resolution: int) -> tuple:
    """Image of each catalog id under a symmetry op; raises if the catalog is not closed."""
    cat = bc_catalog(resolution)
    lookup = {bc.nodes: bc.id for bc in cat}
    perm = []
    for bc in cat:
        moved = tuple(sorted(_transform_node(op, resolution, v) for v in bc.nodes))
        if moved not in lookup:
            raise ValueError(f"catalog not closed under {op}: condition {bc.id}")
        perm.append(lookup[moved])
    return tuple(perm)


def _angle_index(theta):
    k = theta / (2 * math.pi / N_ANGLES)
    nearest = round(k) % N_ANGLES
    return int(nearest) if abs(k - round(k)) < 1e-9 else None


def _elementary(record: SampleRecord, op: str) -> SampleRecord:
    p = record.problem
    n = p.resolution
    ch = _transform_raster(op, record.channels.astype(np.float64))
    lx, ly = _transform_vector(op, ch[4], ch[5])
    ch = np.concatenate([ch[:4], lx[None], ly[None]])
    perm = catalog_permutation(op, n)
    theta = _transform_angle(op, p.load_angle)
    tag = op if p.augmentation == "none" else f"{p.augmentation}+{op}"
    q = Problem(
        n, tuple(sorted(perm[b] for b in p.bc_set)), _transform_element(op, n, p.load_element),
        theta, p.target_vf, p.rng_seed, _angle_index(theta), _transform_node(op, n, p.node), tag,
    )
    return SampleRecord(ch.astype(np.float32), q, record.gt_compliance, record.normalized, dict(record.meta))


AUGMENTATIONS = ("identity", "rot90", "rot180", "rot270", "mirror_lr", "mirror_ud")


def augment(record: SampleRecord, op: str) -> SampleRecord:
    """Apply a square-symmetry op: ``rot90``/``rot180``/``rot270`` (counterclockwise),
    ``mirror_lr``/``mirror_ud`` or ``identity``.  Compliance is invariant."""
    if record.channels.shape[1] != record.channels.shape[2]:
        raise ValueError("augmentation requires a square domain")
    if op in ("identity", "rot0", "rot360"):
        return record
    if op.startswith("rot"):
        k = (int(op[3:]) // 90) % 4
        if int(op[3:]) % 90:
            raise ValueError(f"rotations must be multiples of 90 degrees, got {op}")
        out = record
        for _ in range(k):
            out = _elementary(out, "rot90")
        return out
    if op in ("mirror_lr", "mirror_ud"):
        return _elementary(record, op)
    raise ValueError(f"unknown augmentation {op!r}; expected one of {AUGMENTATIONS}")
