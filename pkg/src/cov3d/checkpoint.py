"""C3DW checkpoint format and transfer-style initialization.

Layout (all integers little-endian)::

    b"C3DW" | version u32 (=1) | config JSON length u32 | config JSON bytes
    | entry count u32 | entries...

    entry = name length u16 | UTF-8 name | dtype u8 (0 = f32) | rank u8
            | dims u32 x rank | f32 payload, row-major
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from cov3d.model import Module, ModelConfig, ResNeSt3D, initialize

MAGIC = b"C3DW"
VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated or incompatible."""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    entries: "OrderedDict[str, np.ndarray]"
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    def __post_init__(self):
        self.entries = OrderedDict((k, np.ascontiguousarray(v, dtype=np.float32)) for k, v in self.entries.items())

    @classmethod
    def from_model(cls, model: Module, **metadata) -> "Checkpoint":
        meta = dict(metadata)
        cfg = getattr(model, "config", None)
        if cfg is not None:
            meta.setdefault("model", cfg.to_dict())
        return cls(OrderedDict((k, v.copy()) for k, v in model.state_dict().items()), meta)


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def format(self) -> str:
        lines = [f"loaded {len(self.loaded)} entries, skipped {len(self.skipped)}"]
        lines += [f"  skipped {name}: {reason}" for name, reason in self.skipped]
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------
def encode(ckpt: Checkpoint) -> bytes:
    if not ckpt.entries:
        raise CheckpointError("empty checkpoint")
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.entries))]
    for name, arr in ckpt.entries.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"entry {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic (not a C3DW checkpoint)", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    (meta_len,) = r.unpack("<I", "config length")
    meta_at = r.pos
    try:
        metadata = json.loads(r.take(meta_len, "config JSON").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"config JSON is invalid ({exc})", meta_at) from exc
    (count,) = r.unpack("<I", "entry count")
    if count == 0:
        raise CheckpointError("empty checkpoint", r.pos - 4)
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<H", "entry name length")
        try:
            name = r.take(name_len, "entry name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("entry name is not UTF-8", at) from exc
        dtype, rank = r.unpack("<BB", f"header of {name!r}")
        if dtype != _DTYPE_F32:
            raise CheckpointError(f"entry {name!r} has unknown dtype tag {dtype}", r.pos - 2)
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        count_vals = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * count_vals, f"payload of {name!r}")
        if name in entries:
            raise CheckpointError(f"duplicate entry {name!r}", at)
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last entry", r.pos)
    return Checkpoint(entries, metadata, version)


def save_checkpoint(model_or_ckpt, path, **metadata) -> Checkpoint:
    """Write atomically (temp file + rename)."""
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else Checkpoint.from_model(model_or_ckpt, **metadata)
    data = encode(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# applying checkpoints to models
# ---------------------------------------------------------------------------
def load_into(model: Module, ckpt: Checkpoint) -> None:
    """Strict load: every model entry present with matching shape, nothing extra."""
    state = model.state_dict()
    problems = [f"missing {k}" for k in state if k not in ckpt.entries]
    problems += [f"unexpected {k}" for k in ckpt.entries if k not in state]
    problems += [f"{k}: shape {ckpt.entries[k].shape} != {v.shape}" for k, v in state.items()
                 if k in ckpt.entries and ckpt.entries[k].shape != v.shape]
    if problems:
        raise CheckpointError("checkpoint does not match model: " + "; ".join(problems))
    model.assign_state(ckpt.entries)


def transfer_init(model: Module, ckpt: Checkpoint, skip_mismatched: bool = True, reinit_head: bool = True,
                  head_prefix: str = "head.", seed: int = 0) -> LoadReport:
    """Copy name- and shape-matched entries from ``ckpt`` into ``model``.

    Head entries are re-initialized (from ``seed``) when ``reinit_head``.
    With ``skip_mismatched=False`` any absent, extra or mis-shaped entry is
    an error and the model is left untouched.
    """
    state = model.state_dict()
    report = LoadReport()
    to_copy: dict[str, np.ndarray] = {}
    mismatches: list[str] = []
    heads = {k for k in state if k.startswith(head_prefix)} if reinit_head else set()
    for name, current in state.items():
        if name in heads:
            report.skipped.append((name, "head re-initialized"))
            continue
        if name not in ckpt.entries:
            mismatches.append(f"{name}: absent from checkpoint")
            report.skipped.append((name, "absent from checkpoint"))
            continue
        src = ckpt.entries[name]
        if src.shape != current.shape:
            mismatches.append(f"{name}: checkpoint shape {src.shape} != model shape {current.shape}")
            report.skipped.append((name, f"shape {src.shape} != {current.shape}"))
            continue
        to_copy[name] = src
    for name in ckpt.entries:
        if name not in state and not (reinit_head and name.startswith(head_prefix)):
            mismatches.append(f"{name}: not in model")
            report.skipped.append((name, "not in model"))
    if mismatches and not skip_mismatched:
        raise CheckpointError("transfer mismatches: " + "; ".join(mismatches))
    model.assign_state(to_copy)
    if heads:
        initialize(model, seed, only=heads)
    report.loaded = list(to_copy)
    return report


def model_from_checkpoint(ckpt: Checkpoint) -> ResNeSt3D:
    """Rebuild the model described by the checkpoint's config echo and load its weights."""
    raw = ckpt.metadata.get("model")
    if not isinstance(raw, dict):
        raise CheckpointError("checkpoint carries no model config")
    try:
        cfg = ModelConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint model config is invalid ({exc})") from exc
    model = ResNeSt3D(cfg)
    load_into(model, ckpt)
    return model
