"""JSON-lines manifests and labeled volume datasets."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cov3d.volume import Volume, read_raw

LABEL_NAMES = ("non-COVID", "COVID")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    label: int

    def to_dict(self) -> dict:
        return {"id": self.id, "path": self.path, "label": self.label}


def read_manifest(path) -> list[ManifestRecord]:
    """Parse a manifest; relative scan paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
    records: list[ManifestRecord] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{where}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise ManifestError(f"{where}: record must be a JSON object")
        missing = [k for k in ("id", "path", "label") if k not in obj]
        if missing:
            raise ManifestError(f"{where}: missing field(s) {', '.join(missing)}")
        extra = sorted(set(obj) - {"id", "path", "label"})
        if extra:
            raise ManifestError(f"{where}: unknown field(s) {', '.join(extra)}")
        sid, spath, label = obj["id"], obj["path"], obj["label"]
        if not isinstance(sid, str) or not sid:
            raise ManifestError(f"{where}: id must be a non-empty string")
        if not isinstance(spath, str) or not spath:
            raise ManifestError(f"{where}: path must be a non-empty string")
        if isinstance(label, bool) or label not in (0, 1):
            raise ManifestError(f"{where}: label must be 0 or 1, got {label!r}")
        if sid in seen:
            raise ManifestError(f"{where}: duplicate id {sid!r} (first on line {seen[sid]})")
        seen[sid] = lineno
        resolved = spath if os.path.isabs(spath) else str(path.parent / spath)
        records.append(ManifestRecord(sid, resolved, int(label)))
    if not records:
        raise ManifestError(f"manifest {path} has no records")
    return records


def write_manifest(path, records: Iterable[ManifestRecord], relative_to=None) -> None:
    """Atomic write; paths are stored relative to ``relative_to`` (default: manifest dir) when possible."""
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    lines = []
    for rec in records:
        p = rec.path
        try:
            p = os.path.relpath(p, base)
        except ValueError:
            pass
        lines.append(json.dumps({"id": rec.id, "path": p, "label": rec.label}))
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class VolumeDataset(Sequence):
    """In-memory ``(Volume, label)`` pairs."""

    def __init__(self, volumes: Sequence[Volume], labels: Sequence[int]):
        if len(volumes) != len(labels):
            raise ValueError(f"{len(volumes)} volumes but {len(labels)} labels")
        self.volumes = list(volumes)
        self.labels = [int(l) for l in labels]

    def __len__(self) -> int:
        return len(self.volumes)

    def __getitem__(self, i):
        return self.volumes[i], self.labels[i]


class CachedDataset(Sequence):
    """Preprocessed raw-f32 volumes referenced by a manifest, loaded on first access."""

    def __init__(self, records: Sequence[ManifestRecord], keep_in_memory: bool = True):
        self.records = list(records)
        self.labels = [r.label for r in self.records]
        self.keep_in_memory = keep_in_memory
        self._cache: dict[int, Volume] = {}

    @classmethod
    def from_manifest(cls, path, **kw) -> "CachedDataset":
        return cls(read_manifest(path), **kw)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        if i in self._cache:
            return self._cache[i], self.labels[i]
        rec = self.records[i]
        vox = read_raw(rec.path).astype(np.float32, copy=False)
        vol = Volume(vox, "unit", rec.id)
        if self.keep_in_memory:
            self._cache[i] = vol
        return vol, self.labels[i]


def dataset_labels(ds) -> list[int]:
    labels = getattr(ds, "labels", None)
    if labels is not None:
        return list(labels)
    return [int(ds[i][1]) for i in range(len(ds))]
