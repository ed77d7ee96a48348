"""Seeded dataset generation and array views of records."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .errors import SamplingError
from .physics_losses import fm_hard
from .problems import AUGMENTATIONS, SampleRecord, augment, build_record, sample_problem


MAX_REDRAWS = 20


def sample_seed(seed: int, index: int, attempt: int = 0) -> int:
    """Per-sample problem seed derived from the run seed, sample index and redraw count."""
    key = [int(seed), int(index)] + ([int(attempt)] if attempt else [])
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0] >> 1)


def _one(args):
    seed, index, resolution, normalize, connected = args
    for attempt in range(MAX_REDRAWS):
        rec = build_record(sample_problem(sample_seed(seed, index, attempt), resolution), normalize=normalize)
        # ground truth with disconnected islands is redrawn so the data is defect-free
        if not connected or fm_hard(rec.topology)[0] == 0:
            rec.meta["redraws"] = attempt
            return rec
    raise SamplingError(f"sample {index}: optimized design disconnected after {MAX_REDRAWS} draws")


def generate_records(n: int, resolution: int = 64, seed: int = 0, normalize: bool = True,
                     threads: int = 1, progress=None, require_connected: bool = True) -> list:
    """Build ``n`` records in index order; output is independent of ``threads``."""
    jobs = [(seed, i, resolution, normalize, require_connected) for i in range(n)]
    out = []
    if threads > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rec in pool.map(_one, jobs, chunksize=max(1, n // (4 * threads))):
                out.append(rec)
                if progress:
                    progress(len(out), n)
    else:
        for job in jobs:
            out.append(_one(job))
            if progress:
                progress(len(out), n)
    return out


def augment_records(records, ops=AUGMENTATIONS) -> list:
    """Each record followed by its images under ``ops`` (identity is skipped)."""
    out = []
    for rec in records:
        out.append(rec)
        out.extend(augment(rec, op) for op in ops if op != "identity")
    return out


def stack_channels(records) -> np.ndarray:
    """(N, 6, H, W) float32 array of record rasters."""
    if not records:
        return np.zeros((0, 6, 0, 0), dtype=np.float32)
    return np.stack([r.channels for r in records]).astype(np.float32, copy=False)


def records_from_array(channels, like: list) -> list:
    """Records carrying new rasters but the problems/metadata of ``like``."""
    return [SampleRecord(c, r.problem, r.gt_compliance, r.normalized, dict(r.meta)) for c, r in zip(channels, like)]
