"""CT volume ingestion and the preprocessing chain.

A scan directory holds either a stack of binary PGM slices or a
``meta.json`` + ``volume.raw`` pair. :func:`preprocess_scan` runs
assemble -> normalize -> prune -> resize.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from cov3d import kernels

DEFAULT_TARGET = (128, 256, 256)
_RAW_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


class IngestionError(ValueError):
    """A scan directory or file could not be read."""

    def __init__(self, message: str, path=None, offset: Optional[int] = None):
        parts = [message]
        if path is not None:
            parts.append(f"file {path}")
        if offset is not None:
            parts.append(f"byte offset {offset}")
        super().__init__("; ".join(parts))
        self.path = path
        self.offset = offset


@dataclass
class PruneReport:
    head_removed: int
    tail_removed: int
    per_slice_lung_score: list[float]

    def to_dict(self) -> dict:
        return {"head_removed": self.head_removed, "tail_removed": self.tail_removed,
                "per_slice_lung_score": [round(float(s), 6) for s in self.per_slice_lung_score]}


@dataclass
class Volume:
    """Dense ``(D, H, W)`` float32 voxels plus provenance."""

    voxels: np.ndarray
    intensity_domain: str = "raw"
    scan_id: str = ""
    prune_report: Optional[PruneReport] = field(default=None, compare=False)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.voxels.shape}")
        if self.intensity_domain not in ("raw", "unit"):
            raise ValueError(f"intensity_domain must be 'raw' or 'unit', got {self.intensity_domain!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------
def _pgm_token(buf: bytes, pos: int, path) -> tuple[bytes, int, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise IngestionError("malformed PGM header: unexpected end of header", path, start)
    return buf[start:pos], start, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM, 8- or 16-bit, into a 2D array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise IngestionError("malformed PGM header: magic is not 'P5'", path, 0)
    pos = 2
    values = []
    for label in ("width", "height", "maxval"):
        tok, tok_start, pos = _pgm_token(buf, pos, path)
        if not tok.isdigit():
            raise IngestionError(f"malformed PGM header: {label} {tok!r} is not an integer", path, tok_start)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise IngestionError(f"malformed PGM header: width={width} height={height} maxval={maxval}", path, pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise IngestionError("malformed PGM header: missing whitespace before raster", path, pos)
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(buf) - pos < need:
        raise IngestionError(f"truncated PGM raster: need {need} bytes, have {len(buf) - pos}", path, pos)
    return np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos).reshape(height, width)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2D uint8/uint16 array as binary PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM slices must be 2D")
    if image.dtype == np.uint8:
        maxval, raster = 255, image.tobytes()
    else:
        maxval, raster = 65535, image.astype(">u2").tobytes()
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(raster)


def write_raw(directory, voxels: np.ndarray, dtype: str = "f32") -> None:
    """Write ``meta.json`` + ``volume.raw`` (little-endian, row-major d,h,w)."""
    if dtype not in _RAW_DTYPES:
        raise ValueError(f"raw dtype must be one of {sorted(_RAW_DTYPES)}, got {dtype!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d, h, w = voxels.shape
    meta = {"depth": int(d), "height": int(h), "width": int(w), "dtype": dtype}
    (directory / "volume.raw").write_bytes(np.ascontiguousarray(voxels, dtype=_RAW_DTYPES[dtype]).tobytes())
    (directory / "meta.json").write_text(json.dumps(meta))


def read_raw(directory) -> np.ndarray:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
        d, h, w = (int(meta[k]) for k in ("depth", "height", "width"))
        dt = _RAW_DTYPES[meta["dtype"]]
    except OSError as exc:
        raise IngestionError(f"cannot read raw metadata ({exc.strerror or exc})", meta_path) from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise IngestionError(f"invalid raw metadata ({exc})", meta_path) from exc
    raw_path = directory / "volume.raw"
    if not raw_path.is_file():
        raise IngestionError("missing volume.raw", raw_path)
    buf = raw_path.read_bytes()
    need = d * h * w * dt.itemsize
    if len(buf) != need:
        raise IngestionError(f"raw payload is {len(buf)} bytes, expected {need}", raw_path, min(len(buf), need))
    return np.frombuffer(buf, dtype=dt).reshape(d, h, w)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------
def assemble_volume(scan_path) -> Volume:
    """Stack a scan directory into a raw-domain volume.

    PGM slices are ordered by ascending filename.
    """
    scan_path = Path(scan_path)
    if not scan_path.is_dir():
        raise IngestionError("scan path is not a directory", scan_path)
    scan_id = scan_path.name
    if (scan_path / "meta.json").exists():
        return Volume(read_raw(scan_path).astype(np.float32), "raw", scan_id)
    files = sorted(p for p in scan_path.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise IngestionError("empty scan directory", scan_path)
    slices = []
    for f in files:
        img = read_pgm(f)
        if slices and img.shape != slices[0].shape:
            raise IngestionError(f"slice dimensions {img.shape[1]}x{img.shape[0]} differ from "
                                 f"{slices[0].shape[1]}x{slices[0].shape[0]}", f)
        slices.append(img)
    return Volume(np.stack(slices).astype(np.float32), "raw", scan_id)


def normalize_intensity(v: Volume) -> Volume:
    """Per-volume min-max map onto [0, 1]; a constant volume maps to zeros."""
    if v.intensity_domain != "raw":
        raise ValueError("normalize_intensity expects a raw-domain volume")
    x = v.voxels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi > lo:
        out = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    else:
        out = np.zeros_like(x)
    return Volume(out.astype(np.float32), "unit", v.scan_id)


def lung_scores(voxels: np.ndarray, tau_air: float = 0.3, center_frac: float = 0.6) -> np.ndarray:
    """Fraction of dark voxels in the centred window of every slice."""
    _, h, w = voxels.shape
    wh = max(1, int(round(center_frac * h)))
    ww = max(1, int(round(center_frac * w)))
    y0, x0 = (h - wh) // 2, (w - ww) // 2
    window = voxels[:, y0:y0 + wh, x0:x0 + ww]
    return (window <= tau_air).mean(axis=(1, 2))


def prune_non_lung(v: Volume, tau_air: float = 0.3, theta: float = 0.05, center_frac: float = 0.6,
                   max_trim_frac: float = 0.4, min_keep: int = 16) -> tuple[Volume, PruneReport]:
    """Trim lung-free slices from both ends of a unit-domain volume.

    Each end loses at most ``floor(max_trim_frac * D)`` slices. When no
    slice at all scores as lung-bearing, the central
    ``min(min_keep, D)`` slices are kept instead.
    """
    if v.intensity_domain != "unit":
        raise ValueError("prune_non_lung expects a unit-domain volume")
    scores = lung_scores(v.voxels, tau_air, center_frac)
    d = v.depth
    free = scores < theta
    cap = int(np.floor(max_trim_frac * d))

    head = 0
    while head < d and free[head]:
        head += 1
    tail = 0
    while tail < d and free[d - 1 - tail]:
        tail += 1
    head, tail = min(head, cap), min(tail, cap)

    if free.all():
        allowed = d - min(min_keep, d)
        if head + tail > allowed:
            h2 = min(head, max(allowed // 2, allowed - tail))
            tail = min(tail, allowed - h2)
            head = h2
    if head + tail >= d:
        # caps above 0.5 could otherwise empty the volume
        tail = max(0, d - 1 - head)
    report = PruneReport(head, tail, [float(s) for s in scores])
    kept = v.voxels[head:d - tail]
    return Volume(kept, "unit", v.scan_id, prune_report=report), report


def resize_trilinear(v: Volume, target) -> Volume:
    """Align-corners trilinear resampling to exactly ``target`` extents."""
    td, th, tw = (int(t) for t in target)
    if min(td, th, tw) < 1:
        raise ValueError(f"target extents must be positive, got {target}")
    out = kernels.resize_trilinear(v.voxels, td, th, tw)
    return Volume(out, v.intensity_domain, v.scan_id, prune_report=v.prune_report)


def preprocess_scan(scan_path, prune: bool = True, target=DEFAULT_TARGET, **prune_params) -> Volume:
    """Assemble, normalize, optionally prune, then resize a scan.

    The returned volume carries the :class:`PruneReport` (or ``None``) in
    ``prune_report``.
    """
    v = normalize_intensity(assemble_volume(scan_path))
    if prune:
        v, _ = prune_non_lung(v, **prune_params)
    return resize_trilinear(v, target)

