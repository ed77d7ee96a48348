"""Auxiliary topology losses and connected-component labeling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops as T
from .autodiff.tensor import Tensor, as_tensor
from .errors import ShapeError

THRESHOLD = 0.5


@dataclass
class TopologyBatch:
    """Decoded densities (B, H, W) with the load planes and target fractions they answer to."""

    densities: Tensor
    load_x: np.ndarray
    load_y: np.ndarray
    vf: np.ndarray

    def __post_init__(self):
        self.densities = as_tensor(self.densities)
        if self.densities.ndim == 4 and self.densities.shape[1] == 1:
            self.densities = self.densities.reshape(self.densities.shape[0], *self.densities.shape[2:])
        if self.densities.ndim != 3:
            raise ShapeError(f"densities must be (B, H, W), got {self.densities.shape}")
        self.load_x = np.asarray(self.load_x, dtype=np.float64)
        self.load_y = np.asarray(self.load_y, dtype=np.float64)
        self.vf = np.asarray(self.vf, dtype=np.float64).reshape(-1)
        b = self.densities.shape
        if self.load_x.shape != b or self.load_y.shape != b:
            raise ShapeError(f"load planes {self.load_x.shape}, {self.load_y.shape} do not match densities {b}")
        if self.vf.shape != (b[0],):
            raise ShapeError(f"need one target fraction per sample, got {self.vf.shape} for batch {b[0]}")

    @classmethod
    def from_conditions(cls, densities, conditions):
        """Build from a (B, 5, H, W) condition stack ordered vf, von Mises, SED, load-x, load-y."""
        c = np.asarray(getattr(conditions, "data", conditions))
        return cls(densities, c[:, 3], c[:, 4], c[:, 0].mean(axis=(1, 2)))


def vf_loss(batch: TopologyBatch) -> Tensor:
    """Per-sample |f - mean density|."""
    x = batch.densities
    achieved = T.mean(x, axis=(1, 2))
    return T.abs_(achieved - Tensor(batch.vf, dtype=x.dtype))


def ld_loss(batch: TopologyBatch) -> Tensor:
    """Per-sample 1 - sum of density-weighted load magnitude, clamped at zero."""
    x = batch.densities
    mag = np.sqrt(batch.load_x**2 + batch.load_y**2)
    overlap = T.sum_(x * Tensor(mag, dtype=x.dtype), axis=(1, 2))
    return T.relu(1.0 - overlap)


# --- labeling -------------------------------------------------------------

def _find(parent, a):
    root = a
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        parent[a], a = root, parent[a]
    return root


def _runs(mask):
    """Horizontal foreground runs as per-row lists of (start, stop)."""
    h, w = mask.shape
    padded = np.zeros((h, w + 2), dtype=np.int8)
    padded[:, 1:-1] = mask
    rows, cols = np.nonzero(np.diff(padded, axis=1))
    rows, cols = rows[::2].tolist(), list(zip(cols[::2].tolist(), cols[1::2].tolist()))
    out = [[] for _ in range(h)]
    for r, run in zip(rows, cols):
        out[r].append(run)
    return out


def _label_2d(mask):
    h, w = mask.shape
    parent = [0]
    runs = []  # per row: list of (start, stop, provisional label)
    prev = []
    for row_runs in _runs(mask):
        cur = []
        k = 0
        for start, stop in row_runs:
            lab = None
            # runs above that share a column are 4-connected to this run
            while k < len(prev) and prev[k][1] <= start:
                k += 1
            j = k
            while j < len(prev) and prev[j][0] < stop:
                above = prev[j][2]
                if lab is None:
                    lab = _find(parent, above)
                else:
                    ra, rb = _find(parent, above), lab
                    if ra != rb:
                        lo, hi = min(ra, rb), max(ra, rb)
                        parent[hi] = lo
                        lab = lo
                j += 1
            if lab is None:
                lab = len(parent)
                parent.append(lab)
            cur.append((start, stop, lab))
        runs.append(cur)
        prev = cur
    # resolve to consecutive labels in raster order of first appearance
    out = np.zeros((h, w), dtype=np.int32)
    final = {}
    for r, cur in enumerate(runs):
        for start, stop, lab in cur:
            root = _find(parent, lab)
            if root not in final:
                final[root] = len(final) + 1
            out[r, start:stop] = final[root]
    return out, len(final) + 1


def label_components(field, threshold=THRESHOLD, connectivity=4):
    """Label 4-connected foreground regions of ``field >= threshold``.

    Returns ``(labels, count)`` where background is 0 and ``count`` includes
    the background label. Accepts (H, W) or (B, H, W); for a batch ``count``
    is an int array.
    """
    if connectivity != 4:
        raise ValueError("only 4-connectivity is supported")
    arr = np.asarray(getattr(field, "data", field))
    mask = arr if arr.dtype == bool else arr >= threshold
    if mask.ndim == 2:
        return _label_2d(mask)
    if mask.ndim != 3:
        raise ShapeError(f"label_components expects (H, W) or (B, H, W), got {mask.shape}")
    labels = np.zeros(mask.shape, dtype=np.int32)
    counts = np.zeros(mask.shape[0], dtype=np.int64)
    for b in range(mask.shape[0]):
        labels[b], counts[b] = _label_2d(mask[b])
    return labels, counts


def fm_hard(field, threshold=THRESHOLD) -> np.ndarray:
    """1 where the thresholded design has more than one foreground component, else 0."""
    arr = np.asarray(getattr(field, "data", field))
    if arr.ndim == 2:
        arr = arr[None]
    _, counts = label_components(arr, threshold)
    return (counts > 2).astype(np.float64)


def stray_mask(field, threshold=THRESHOLD) -> np.ndarray:
    """Foreground pixels outside the heaviest component (ties go to the lower label)."""
    arr = np.asarray(getattr(field, "data", field), dtype=np.float64)
    labels, counts = label_components(arr, threshold)
    out = np.zeros(arr.shape, dtype=bool)
    for b in range(arr.shape[0]):
        if counts[b] <= 2:
            continue
        mass = np.bincount(labels[b].ravel(), weights=arr[b].ravel(), minlength=counts[b])
        mass[0] = -np.inf
        main = int(np.argmax(mass))
        out[b] = (labels[b] > 0) & (labels[b] != main)
    return out


def fm_loss(batch: TopologyBatch):
    """Return ``(surrogate, hard)`` floating-material losses per sample.

    The surrogate is the soft foreground mass outside the heaviest component
    divided by the total foreground mass, and carries gradient to stray pixels.
    """
    x = batch.densities
    fg = x.data >= THRESHOLD
    stray = stray_mask(x.data)
    num = T.sum_(x * Tensor(stray, dtype=x.dtype), axis=(1, 2))
    den = T.sum_(x * Tensor(fg, dtype=x.dtype), axis=(1, 2))
    safe = den + Tensor((~fg.any(axis=(1, 2))).astype(x.dtype), dtype=x.dtype)
    surrogate = num / safe
    hard = (stray.any(axis=(1, 2))).astype(np.float64)
    return surrogate, hard


def auxiliary_losses(batch: TopologyBatch) -> dict:
    """Batch-mean VF, LD and FM-surrogate tensors plus the hard FM rate."""
    surrogate, hard = fm_loss(batch)
    return {
        "vf": T.mean(vf_loss(batch)),
        "ld": T.mean(ld_loss(batch)),
        "fm": T.mean(surrogate),
        "fm_hard": float(hard.mean()),
    }
