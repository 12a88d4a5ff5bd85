"""Checkpoint, metrics CSV and PGM grid formats.

Checkpoint layout::

    b"IMAGO1\\n"
    u64 little-endian manifest length
    manifest: UTF-8 JSON (sorted keys) with version, config echo, step and
              [{"name", "dtype": "<f8", "shape"}] in payload order
    raw little-endian float64 payloads, concatenated
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"IMAGO1\n"
FORMAT_VERSION = 1
CSV_HEADER = "policy,t,bce,max_var,cat_entropy,probe_acc"


class CheckpointVersionError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    kind: str = "agent"
    version: int = FORMAT_VERSION


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    payload = []
    for name, value in ckpt.params.items():
        arr = np.asarray(value, dtype="<f8")  # tobytes() emits C order; keeps 0-d shapes
        entries.append({"name": name, "dtype": "<f8", "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    manifest = {
        "version": ckpt.version,
        "kind": ckpt.kind,
        "step": ckpt.step,
        "config": ckpt.config,
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(payload)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"IMAGO"):
        raise ValueError(f"{path}: not a checkpoint file")
    if not raw.startswith(MAGIC):
        raise CheckpointVersionError(f"{path}: unsupported checkpoint magic {raw[:7]!r}")
    offset = len(MAGIC)
    (length,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    manifest = json.loads(raw[offset : offset + length].decode())
    offset += length
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {manifest.get('version')} != {FORMAT_VERSION}")
    params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = math.prod(shape)
        arr = np.frombuffer(raw, dtype=entry["dtype"], count=count, offset=offset).reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return Checkpoint(params, manifest["config"], manifest["step"], manifest["kind"], manifest["version"])


# ---------------------------------------------------------------------------
# metrics CSV


@dataclass
class MetricsRow:
    policy: str
    t: int
    bce: float
    max_var: float
    cat_entropy: float | None = None
    probe_acc: float | None = None


def _fmt(v) -> str:
    return "" if v is None else format(float(v), ".17g")


def write_metrics_csv(rows: Iterable[MetricsRow], path) -> None:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(",".join([r.policy, str(r.t), _fmt(r.bce), _fmt(r.max_var), _fmt(r.cat_entropy), _fmt(r.probe_acc)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list[MetricsRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header")
    rows = []
    for line in lines[1:]:
        policy, t, *vals = line.split(",")
        nums = [float(v) if v else None for v in vals]
        rows.append(MetricsRow(policy, int(t), *nums))
    return rows


# ---------------------------------------------------------------------------
# PGM


def pgm_grid(rows: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Tile ``[(composite (H, W), hypotheses (N, H, W)), ...]`` into one uint8 image.

    One row of tiles per timestep; 1-pixel white separators between tiles.
    """
    if not rows:
        raise ValueError("nothing to export")
    h, w = rows[0][0].shape
    n = max(len(hyps) for _, hyps in rows)
    cols = 1 + n
    grid = np.ones((len(rows) * (h + 1) - 1, cols * (w + 1) - 1))
    for i, (composite, hyps) in enumerate(rows):
        tiles = [composite, *hyps]
        for j, tile in enumerate(tiles):
            r0, c0 = i * (h + 1), j * (w + 1)
            grid[r0 : r0 + h, c0 : c0 + w] = tile
    return np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    height, width = image.shape
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode() + image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    width, height = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def export_pgm_grid(rows: Sequence[tuple[np.ndarray, np.ndarray]], path) -> None:
    write_pgm(path, pgm_grid(rows))


def observation_composite(scene: np.ndarray, mask: np.ndarray, fill: float = 0.5) -> np.ndarray:
    """Observed pixels from the scene, unobserved ones at ``fill`` grey."""
    return np.where(mask > 0, scene, fill)
