"""Metrics for generated designs, error histograms and the VAE hyperparameter grid."""
from __future__ import annotations

import itertools
import math
import traceback
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import physics_losses as pl
from .errors import FEAError, TopoLDMError
from .fea import MaterialModel, StiffnessSystem, penalized_modulus
from .problems import Problem

PRUNE_THRESHOLD = 30.0


def binarize(x, threshold=pl.THRESHOLD) -> np.ndarray:
    return (np.asarray(x) >= threshold).astype(np.float64)


def design_compliance(design, problem: Problem, material: MaterialModel | None = None) -> float:
    """Compliance of the binarized design under SIMP moduli.

    Raises FEAError when the design cannot be analysed (including an empty design).
    """
    material = material or MaterialModel()
    x = binarize(design)
    if x.shape != (problem.resolution, problem.resolution):
        raise ValueError(f"design shape {x.shape} does not match problem resolution {problem.resolution}")
    if not x.any():
        raise FEAError("design has no material")
    fea = problem.to_fea(x)
    system = StiffnessSystem(fea.nx, fea.ny, fea.fixed_dofs, material)
    u = system.solve(penalized_modulus(x, material), fea.load)
    c = float(fea.load @ u)
    if not math.isfinite(c):
        raise FEAError("non-finite compliance")
    return c


def compliance_error(generated, reference, problem: Problem, material=None):
    """Percent compliance error of ``generated`` against the reference design.

    Both designs are evaluated by the same binarize-and-solve route, so the
    reference compared with itself is exactly 0. Returns ``(percent, defective)``;
    a defective generated design reports ``inf``.
    """
    c_ref = design_compliance(reference, problem, material)
    try:
        c_gen = design_compliance(generated, problem, material)
    except (FEAError, ValueError):
        return math.inf, True
    return 100.0 * (c_gen - c_ref) / c_ref, False


def fm_error_rate(designs, defective=None) -> float:
    """Percent of designs with floating material; defective designs count as errors."""
    designs = np.asarray(designs)
    if len(designs) == 0:
        return 0.0
    bad = pl.fm_hard(designs).astype(bool)
    if defective is not None:
        bad |= np.asarray(defective, dtype=bool)
    return 100.0 * bad.mean()


def _load_elements(problems):
    return [divmod(p.load_element, p.resolution) for p in problems]


def ld_rate(designs, problems):
    """``(binary rate %, mean soft LD)``.

    The rate is the share of designs whose binarized density at the load
    element is 0; the soft value is the mean clamped 1 - overlap.
    """
    designs = np.asarray(designs, dtype=np.float64)
    if len(designs) == 0:
        return 0.0, 0.0
    hits = np.array([designs[k, i, j] >= pl.THRESHOLD for k, (i, j) in enumerate(_load_elements(problems))])
    lx = np.stack([p.load_channels()[0] for p in problems])
    ly = np.stack([p.load_channels()[1] for p in problems])
    soft = pl.ld_loss(pl.TopologyBatch(designs, lx, ly, [p.target_vf for p in problems])).data
    return 100.0 * float((~hits).mean()), float(soft.mean())


def vf_error(designs, targets):
    """``(relative %, absolute points)`` mean volume-fraction error of the raw designs."""
    designs = np.asarray(designs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(designs) == 0:
        return 0.0, 0.0
    achieved = designs.reshape(len(designs), -1).mean(axis=1)
    gap = np.abs(targets - achieved)
    return float(np.mean(gap * 100.0 / targets)), float(np.mean(gap * 100.0))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    threshold: float

    @property
    def pooled(self) -> int:
        return int(self.counts[-1])

    def rows(self):
        for k in range(len(self.counts) - 1):
            yield f"[{self.edges[k]:g},{self.edges[k + 1]:g})", int(self.counts[k])
        yield f">{self.threshold:g}", self.pooled


def histogram(errors, bin_width=1.0, pool_threshold=PRUNE_THRESHOLD) -> Histogram:
    """Counts in ``bin_width`` bins up to the threshold; everything above it lands in one terminal bin."""
    e = np.asarray(list(errors), dtype=np.float64)
    if np.any(np.isnan(e)):
        raise ValueError("histogram input contains NaN")
    lo = 0.0
    finite = e[np.isfinite(e)]
    if finite.size and finite.min() < 0:
        lo = math.floor(finite.min() / bin_width) * bin_width
    n_bins = int(round((pool_threshold - lo) / bin_width))
    edges = lo + bin_width * np.arange(n_bins + 1)
    counts = np.zeros(n_bins + 1, dtype=np.int64)
    over = e > pool_threshold
    counts[-1] = int(over.sum())
    inside = e[~over]
    if inside.size:
        idx = np.clip(np.floor((inside - lo) / bin_width).astype(np.int64), 0, n_bins - 1)
        counts[:-1] = np.bincount(idx, minlength=n_bins)
    return Histogram(edges, counts, pool_threshold)


@dataclass
class MetricsReport:
    n: int
    compliance_error_mean: float
    compliance_error_mean_unpruned: float
    compliance_error_median: float
    share_above_30: float
    fm_rate: float
    ld_rate: float
    ld_soft_mean: float
    vf_error: float
    vf_error_abs: float
    n_defective: int
    errors: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("errors")
        return d

    def table(self, sep="\t") -> str:
        head = ["n", "compliance_err_%", "compliance_err_unpruned_%", "compliance_err_median_%",
                "above_30_%", "floating_material_%", "load_discrepancy_%", "load_discrepancy_soft",
                "vf_err_rel_%", "vf_err_abs_pts", "defective"]
        vals = [self.n, self.compliance_error_mean, self.compliance_error_mean_unpruned,
                self.compliance_error_median, self.share_above_30, self.fm_rate, self.ld_rate,
                self.ld_soft_mean, self.vf_error, self.vf_error_abs, self.n_defective]
        return sep.join(head) + "\n" + sep.join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in vals) + "\n"

    def text(self) -> str:
        return "".join(f"{k}: {v:.6g}\n" if isinstance(v, float) else f"{k}: {v}\n" for k, v in self.summary().items())


def _safe_mean(a):
    return float(np.mean(a)) if len(a) else math.nan


def evaluate(generated, records, material=None) -> MetricsReport:
    """Full report for generated (N, H, W) designs against the records' problems and ground truth."""
    gen = np.asarray(generated, dtype=np.float64)
    if gen.ndim == 4:
        gen = gen[:, 0]
    if len(gen) != len(records):
        raise ValueError(f"{len(gen)} generated designs for {len(records)} records")
    problems = [r.problem for r in records]
    errs, defect = [], []
    for g, r in zip(gen, records):
        e, d = compliance_error(g, r.topology, r.problem, material)
        errs.append(e)
        defect.append(d)
    errs = np.asarray(errs)
    defect = np.asarray(defect, dtype=bool)
    over = errs > PRUNE_THRESHOLD
    ld, ld_soft = ld_rate(gen, problems)
    vf_rel, vf_abs = vf_error(gen, [p.target_vf for p in problems])
    finite = errs[~defect]
    return MetricsReport(
        n=len(gen),
        compliance_error_mean=_safe_mean(errs[~over]),
        compliance_error_mean_unpruned=_safe_mean(finite),
        compliance_error_median=float(np.median(errs)) if len(errs) else 0.0,
        share_above_30=100.0 * float(over.mean()) if len(errs) else 0.0,
        fm_rate=fm_error_rate(gen, defect),
        ld_rate=ld,
        ld_soft_mean=ld_soft,
        vf_error=vf_rel,
        vf_error_abs=vf_abs,
        n_defective=int(defect.sum()),
        errors=errs.tolist(),
    )


# --- hyperparameter grid ----------------------------------------------------------

GRID_LATENT_DIMS = (64, 128, 192, 256)
GRID_BETA1 = (0.075, 0.15, 0.3)
GRID_BETA2 = (0.1, 0.3)
GRID_COLUMNS = ("fm", "ld", "vf", "mse")


@dataclass
class GridCell:
    latent_dim: int
    beta1: float
    beta2: float
    fm: float = math.nan
    ld: float = math.nan
    vf: float = math.nan
    mse: float = math.nan
    status: str = "ok"
    error: str = ""


def _fit_cell(channels, vae_config):
    from .vae import DualVAE, decode, encode_topology, train_vae
    from .autodiff.tensor import no_grad

    model = DualVAE(vae_config)
    train_vae(model, channels)
    with no_grad():
        recon = []
        for s in range(0, len(channels), 64):
            xb = channels[s:s + 64, :1]
            recon.append(decode(model, encode_topology(model, xb).mu).data[:, 0])
    recon = np.concatenate(recon).astype(np.float64)
    topo = channels[:, 0].astype(np.float64)
    batch = pl.TopologyBatch.from_conditions(recon, channels[:, 1:])
    return {
        "fm": float(pl.fm_hard(recon).mean()),
        "ld": float(pl.ld_loss(batch).data.mean()),
        "vf": float(pl.vf_loss(batch).data.mean()),
        "mse": float(np.mean((recon - topo) ** 2)),
    }


def grid_runner(channels, latent_dims=GRID_LATENT_DIMS, beta1s=GRID_BETA1, beta2s=GRID_BETA2,
                vae_config=None, fit=None, progress=None) -> list:
    """Train one toy VAE per (D, beta1, beta2) cell; failures are recorded and the grid continues."""
    from .vae import VAEConfig

    base = vae_config or VAEConfig()
    fit = fit or _fit_cell
    channels = np.asarray(channels)
    cells = []
    for d, b1, b2 in itertools.product(latent_dims, beta1s, beta2s):
        cell = GridCell(int(d), float(b1), float(b2))
        try:
            cfg = replace(base, latent_dim=int(d), beta1=float(b1), beta2=float(b2))
            for k, v in fit(channels, cfg).items():
                setattr(cell, k, float(v))
        except (TopoLDMError, ValueError, ArithmeticError, MemoryError) as exc:
            cell.status = "failed"
            cell.error = f"{type(exc).__name__}: {exc}"
            cell.error += " | " + traceback.format_exc(limit=1).strip().splitlines()[-1]
        cells.append(cell)
        if progress:
            progress(cell)
    return cells


def _best(values):
    finite = [v for v in values if math.isfinite(v)]
    return min(finite) if finite else None


def format_grid(cells, sep="\t") -> str:
    """All cells, one per row, with the best (lowest) value of each metric column starred."""
    best = {c: _best([getattr(x, c) for x in cells]) for c in GRID_COLUMNS}
    lines = [sep.join(["D", "beta1", "beta2", "FM", "LD", "VF", "MSE", "status"])]
    for x in cells:
        vals = []
        for c in GRID_COLUMNS:
            v = getattr(x, c)
            mark = "*" if best[c] is not None and v == best[c] else ""
            vals.append(f"{v:.4g}{mark}")
        lines.append(sep.join([str(x.latent_dim), f"{x.beta1:g}", f"{x.beta2:g}", *vals, x.status]))
    return "\n".join(lines) + "\n"


def _pivot(cells, key, header, sep):
    groups = {}
    for x in cells:
        groups.setdefault(key(x), []).append(x)
    rows = {}
    for k, xs in groups.items():
        ok = [x for x in xs if x.status == "ok"]
        rows[k] = {c: (float(np.mean([getattr(x, c) for x in ok])) if ok else math.nan) for c in GRID_COLUMNS}
    best = {c: _best([r[c] for r in rows.values()]) for c in GRID_COLUMNS}
    lines = [sep.join(header + ["FM", "LD", "VF", "MSE"])]
    for k, r in rows.items():
        keys = k if isinstance(k, tuple) else (k,)
        vals = [f"{r[c]:.4g}{'*' if best[c] is not None and r[c] == best[c] else ''}" for c in GRID_COLUMNS]
        lines.append(sep.join([f"{v:g}" for v in keys] + vals))
    return "\n".join(lines) + "\n"


def latent_dim_table(cells, sep="\t") -> str:
    """Metrics averaged over the loss weights, one row per latent size."""
    return _pivot(cells, lambda x: x.latent_dim, ["D"], sep)


def beta_table(cells, sep="\t") -> str:
    """Metrics averaged over latent sizes, one row per (beta1, beta2)."""
    return _pivot(cells, lambda x: (x.beta1, x.beta2), ["beta1", "beta2"], sep)


# --- plots ---------------------------------------------------------------------

def plot_histogram(hist: Histogram, path, title="compliance error"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    centers = list(0.5 * (hist.edges[:-1] + hist.edges[1:])) + [hist.threshold + 1.0]
    ax.bar(centers, hist.counts, width=0.9 * (hist.edges[1] - hist.edges[0]) if len(hist.edges) > 1 else 0.9)
    ax.set_xlabel("compliance error (%)  [last bar: pooled above threshold]")
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_designs(designs, path, cols=8):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    designs = np.asarray(designs)
    if designs.ndim == 4:
        designs = designs[:, 0]
    n = max(len(designs), 1)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, min(cols, n), figsize=(1.2 * min(cols, n), 1.2 * rows), squeeze=False)
    for k, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if k < len(designs):
            ax.imshow(designs[k], cmap="gray_r", vmin=0, vmax=1)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
