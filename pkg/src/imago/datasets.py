"""Synthetic glyph scenes and IDX (MNIST) file I/O.

Glyph randomness comes from a counter-based splitmix64 mix, so a given
``(seed, count, canvas)`` renders the same bytes on every platform:

    u(seed, item, slot) = mix64(seed * 0x9E3779B97F4A7C15 + item * 0xBF58476D1CE4E5B9 + slot)

where ``mix64`` is the splitmix64 finaliser.  Slots: 0 row jitter, 1 column
jitter, 2 thickness.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .diffcore import ContractError

MASK64 = (1 << 64) - 1
GLYPH_BOX = 10
CLASS_NAMES = (
    "horizontal bar",
    "vertical bar",
    "cross",
    "main diagonal",
    "anti-diagonal",
    "L-corner",
    "T-shape",
    "box outline",
    "filled box",
    "two-dot cluster",
)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxLengthError(IdxFormatError):
    pass


def mix64(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def counter_u64(seed: int, item: int, slot: int) -> int:
    return mix64(seed * 0x9E3779B97F4A7C15 + item * 0xBF58476D1CE4E5B9 + slot)


def glyph_template(class_id: int, thickness: int) -> np.ndarray:
    """Binary 10x10 template for one class, before placement."""
    n, t = GLYPH_BOX, thickness
    g = np.zeros((n, n), dtype=np.uint8)
    mid = (n - t) // 2
    i, j = np.indices((n, n))
    if class_id == 0:
        g[mid : mid + t, :] = 1
    elif class_id == 1:
        g[:, mid : mid + t] = 1
    elif class_id == 2:
        g[mid : mid + t, :] = 1
        g[:, mid : mid + t] = 1
    elif class_id == 3:
        off = j - i + (t - 1) // 2
        g[(off >= 0) & (off < t)] = 1
    elif class_id == 4:
        off = (n - 1 - j) - i + (t - 1) // 2
        g[(off >= 0) & (off < t)] = 1
    elif class_id == 5:
        g[:, :t] = 1
        g[n - t :, :] = 1
    elif class_id == 6:
        g[:t, :] = 1
        g[:, mid : mid + t] = 1
    elif class_id == 7:
        g[:t, :] = g[n - t :, :] = 1
        g[:, :t] = g[:, n - t :] = 1
    elif class_id == 8:
        g[:, :] = 1
    elif class_id == 9:
        g[1 : 1 + t + 1, 1 : 1 + t + 1] = 1
        g[n - 2 - t : n - 1, n - 2 - t : n - 1] = 1
    else:
        raise ValueError(f"class_id must be in 0..9, got {class_id}")
    return g


def render_glyph(class_id: int, canvas=(16, 16), thickness: int = 2, jitter=(0, 0)) -> np.ndarray:
    height, width = canvas
    if height < GLYPH_BOX + 2 or width < GLYPH_BOX + 2:
        raise ContractError(f"canvas {canvas} too small for {GLYPH_BOX}x{GLYPH_BOX} glyphs with +-1 jitter")
    out = np.zeros((height, width), dtype=np.uint8)
    r = (height - GLYPH_BOX) // 2 + jitter[0]
    c = (width - GLYPH_BOX) // 2 + jitter[1]
    out[r : r + GLYPH_BOX, c : c + GLYPH_BOX] = glyph_template(class_id, thickness)
    return out


def generate_glyphs(seed: int, count: int, canvas=(16, 16)) -> tuple[np.ndarray, np.ndarray]:
    """``count`` binary scenes (float64, values in {0, 1}) and labels ``index % 10``."""
    if count < 1:
        raise ContractError("count must be >= 1")
    images = np.empty((count, *canvas), dtype=np.float64)
    labels = np.arange(count, dtype=np.int64) % 10
    for k in range(count):
        dr = counter_u64(seed, k, 0) % 3 - 1
        dc = counter_u64(seed, k, 1) % 3 - 1
        thickness = 2 + counter_u64(seed, k, 2) % 2
        images[k] = render_glyph(int(labels[k]), canvas, int(thickness), (int(dr), int(dc)))
    return images, labels


def binarize(scene: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(scene) >= threshold).astype(np.float64)


def downsample_2x(scene: np.ndarray) -> np.ndarray:
    """2x2 average pooling over the last two axes."""
    scene = np.asarray(scene, dtype=np.float64)
    h, w = scene.shape[-2:]
    if h % 2 or w % 2:
        raise ContractError(f"downsample_2x needs even extents, got {h}x{w}")
    return scene.reshape(*scene.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


# ---------------------------------------------------------------------------
# IDX


def _open(path, mode: str):
    path = Path(path)
    if path.suffix != ".gz":
        return open(path, mode)
    if "w" in mode:
        # fixed mtime keeps compressed output byte-stable
        return gzip.GzipFile(path, mode, mtime=0)
    return gzip.open(path, mode)


def read_idx(path) -> np.ndarray:
    """Raw uint8 array with the header's big-endian dims."""
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    magic = raw[:4]
    code = struct.unpack(">I", magic)[0]
    if code not in (IDX_IMAGES, IDX_LABELS):
        raise IdxFormatError(f"{path}: bad magic bytes {magic.hex(' ')}")
    ndim = 3 if code == IDX_IMAGES else 1
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxLengthError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload != expected:
        raise IdxLengthError(f"{path}: header declares {expected} payload bytes, file has {payload}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_header(path) -> tuple[int, tuple[int, ...]]:
    """(magic, dims) without reading the payload."""
    with _open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) < 4:
            raise IdxFormatError(f"{path}: file too short for an IDX header")
        code = struct.unpack(">I", magic)[0]
        if code not in (IDX_IMAGES, IDX_LABELS):
            raise IdxFormatError(f"{path}: bad magic bytes {magic.hex(' ')}")
        ndim = 3 if code == IDX_IMAGES else 1
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
    return code, dims


def load_idx(path) -> np.ndarray:
    """Images scaled to [0, 1] (or labels as int64 for 1-D files)."""
    raw = read_idx(path)
    if raw.ndim == 1:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / 255.0


def write_idx(path, array) -> None:
    arr = np.asarray(array)
    if arr.ndim not in (1, 3):
        raise ValueError("IDX writer supports 1-D labels and 3-D images")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise ValueError("IDX payload must fit in uint8")
        arr = arr.astype(np.uint8)
    code = IDX_IMAGES if arr.ndim == 3 else IDX_LABELS
    header = struct.pack(">I", code) + struct.pack(f">{arr.ndim}I", *arr.shape)
    with _open(path, "wb") as f:
        f.write(header + arr.tobytes())


def load_mnist_reduced(images_path, labels_path=None) -> tuple[np.ndarray, np.ndarray | None]:
    """MNIST at 14x14: 2x2 average pooling then binarization."""
    images = binarize(downsample_2x(load_idx(images_path)))
    labels = load_idx(labels_path) if labels_path else None
    return images, labels
