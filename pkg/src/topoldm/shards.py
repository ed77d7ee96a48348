"""Binary dataset shards with a text manifest sidecar.

Layout (little-endian)::

    b"TOPO" | u32 version | u32 H | u32 W | u32 C | u64 count | count * C*H*W f32

Rasters are channel-major, row-major within a channel.  The manifest sits at
``<shard>.manifest`` with one ``key=value`` line per record.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import ShardFormatError
from .problems import CHANNELS, Problem, SampleRecord

MAGIC = b"TOPO"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")
HEADER_SIZE = _HEADER.size


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v) if v else "-"
    if v is None:
        return "-"
    s = str(v)
    if not s or any(ch.isspace() for ch in s) or "=" in s:
        raise ValueError(f"manifest value {s!r} must be non-empty without whitespace or '='")
    return s


def manifest_line(record: SampleRecord) -> str:
    p = record.problem
    fields = {
        "seed": p.rng_seed,
        "bc": p.bc_set,
        "angle_idx": -1 if p.angle_index is None else p.angle_index,
        "vf": p.target_vf,
        "compliance": float(record.gt_compliance),
        "res": p.resolution,
        "load_elem": p.load_element,
        "load_node": p.node,
        "angle": float(p.load_angle),
        "aug": p.augmentation,
        "norm": int(record.normalized),
    }
    for k, v in record.meta.items():
        if k not in fields:
            fields[k] = v
    return " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())


def parse_manifest_line(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out


def _record_from_fields(channels, f: dict) -> SampleRecord:
    known = {"seed", "bc", "angle_idx", "vf", "compliance", "res", "load_elem", "load_node", "angle", "aug", "norm"}
    angle_idx = int(f["angle_idx"])
    problem = Problem(
        resolution=int(f["res"]),
        bc_set=tuple(int(b) for b in f["bc"].split(",")),
        load_element=int(f["load_elem"]),
        load_angle=float(f["angle"]),
        target_vf=float(f["vf"]),
        rng_seed=None if f["seed"] == "-" else int(f["seed"]),
        angle_index=None if angle_idx < 0 else angle_idx,
        load_node=int(f["load_node"]),
        augmentation=f.get("aug", "none"),
    )
    meta = {k: v for k, v in f.items() if k not in known}
    return SampleRecord(channels, problem, float(f["compliance"]), bool(int(f.get("norm", "0"))), meta)


def write_shard(path, records) -> None:
    """Write records (homogeneous resolution) and the manifest sidecar."""
    records = list(records)
    if records:
        shape = records[0].channels.shape
        for k, r in enumerate(records):
            if r.channels.shape != shape:
                raise ValueError(f"record {k} has shape {r.channels.shape}, expected {shape}")
        c, h, w = shape
    else:
        c, (h, w) = len(CHANNELS), (0, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, h, w, c, len(records)))
        for r in records:
            fh.write(np.ascontiguousarray(r.channels, dtype="<f4").tobytes())
    with open(manifest_path(path), "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(manifest_line(r) + "\n")


def read_header(path):
    path = Path(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise ShardFormatError(f"truncated header: expected {HEADER_SIZE} bytes, got {len(raw)}", len(raw))
    magic, version, h, w, c, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ShardFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise ShardFormatError(f"unsupported version {version}, expected {VERSION}", 4)
    expected = HEADER_SIZE + count * c * h * w * 4
    if size != expected:
        raise ShardFormatError(
            f"shard length mismatch: header implies {expected} bytes, file has {size}", min(size, expected)
        )
    return h, w, c, count


def read_rasters(path) -> np.ndarray:
    h, w, c, count = read_header(path)
    data = np.fromfile(path, dtype="<f4", offset=HEADER_SIZE)
    return data.reshape(count, c, h, w).astype(np.float32)


def read_shard(path) -> list:
    path = Path(path)
    rasters = read_rasters(path)
    mpath = manifest_path(path)
    lines = [ln for ln in mpath.read_text(encoding="utf-8").splitlines() if ln.strip()] if mpath.exists() else []
    if len(lines) != len(rasters):
        raise ShardFormatError(f"manifest has {len(lines)} lines but shard header declares {len(rasters)} records")
    return [_record_from_fields(rasters[k], parse_manifest_line(ln)) for k, ln in enumerate(lines)]
