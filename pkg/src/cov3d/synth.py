"""Synthetic CT-like scans for exercising the full pipeline at desk scale.

Each scan is a body cylinder holding two dark ellipsoidal lungs, with bright
lung-free slices at both ends. Class 1 adds 1-3 ground-glass blobs clipped
to the lung mask. Anatomy, noise and lesions draw from separate seeded
streams, so a class-1 scan and its class-0 twin differ only inside the lungs.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cov3d.data import ManifestRecord, write_manifest
from cov3d.volume import write_pgm

DEFAULT_SIZE = (48, 64, 64)
RAW_MAX = 4095  # 12-bit CT-like range stored in 16-bit PGM

# intensities on a [0, 1] scale before quantization
AIR, LUNG, BODY, BRIGHT = 0.0, 0.08, 0.55, 0.8


@dataclass(frozen=True)
class SynthParams:
    noise_sigma: float = 0.02
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (0.12, 0.2)  # fraction of height
    lesion_intensity: float = 0.75  # below BRIGHT so min-max normalization is label-independent
    end_slices: tuple[float, float] = (0.08, 0.16)  # lung-free slices per end, fraction of depth


@dataclass
class SynthScan:
    raw: np.ndarray  # uint16 (D, H, W)
    lung_mask: np.ndarray  # bool (D, H, W)
    lesion_mask: np.ndarray  # bool (D, H, W)
    label: int


def _streams(seed: int, split: int, index: int):
    anatomy, noise, lesions = np.random.SeedSequence([seed, split, index]).spawn(3)
    return np.random.default_rng(anatomy), np.random.default_rng(noise), np.random.default_rng(lesions)


def generate_scan(seed: int, label: int, size=DEFAULT_SIZE, params: SynthParams = SynthParams(),
                  split: int = 0, index: int = 0) -> SynthScan:
    """One scan; ``(seed, split, index)`` fixes the anatomy and noise regardless of ``label``."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    d, h, w = (int(s) for s in size)
    if d < 8 or h < 16 or w < 16:
        raise ValueError(f"synthetic scans need at least (8, 16, 16) voxels, got {size}")
    rng_a, rng_n, rng_l = _streams(seed, split, index)
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    yc, xc = (h - 1) / 2, (w - 1) / 2

    head = int(round(rng_a.uniform(*params.end_slices) * d))
    tail = int(round(rng_a.uniform(*params.end_slices) * d))
    z0, z1 = head, d - tail  # lung-bearing slab [z0, z1)
    radius = 0.45 * min(h, w) * rng_a.uniform(0.95, 1.05)
    body = (y - yc) ** 2 + (x - xc) ** 2 <= radius ** 2

    lungs = np.zeros((d, h, w), dtype=bool)
    zc, zr = (z0 + z1 - 1) / 2, max((z1 - z0) / 2, 1.0)
    for side in (-1, 1):
        cx = xc + side * 0.2 * w * rng_a.uniform(0.9, 1.1)
        cy = yc + 0.03 * h * rng_a.uniform(-1, 1)
        ax, ay = 0.12 * w * rng_a.uniform(0.9, 1.1), 0.22 * h * rng_a.uniform(0.9, 1.1)
        lungs |= ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - zc) / zr) ** 2 <= 1.0

    img = np.full((d, h, w), AIR)
    img[body] = BODY
    ends = np.zeros(d, dtype=bool)
    ends[:z0] = True
    ends[z1:] = True
    img[ends[:, None, None] & body] = BRIGHT
    img[lungs] = LUNG

    lesion = np.zeros((d, h, w), dtype=bool)
    if label == 1:
        core = lungs.copy()
        lo, hi = int(z0 + 0.2 * (z1 - z0)), int(np.ceil(z1 - 0.2 * (z1 - z0)))
        core[:lo] = False
        core[hi:] = False
        candidates = np.argwhere(core if core.any() else lungs)
        for _ in range(int(rng_l.integers(params.lesion_count[0], params.lesion_count[1] + 1))):
            cz, cy, cx = candidates[int(rng_l.integers(len(candidates)))]
            r = rng_l.uniform(*params.lesion_radius) * h
            rz = r * d / h
            lesion |= ((x - cx) / r) ** 2 + ((y - cy) / r) ** 2 + ((z - cz) / rz) ** 2 <= 1.0
        lesion &= lungs
        img[lesion] = params.lesion_intensity

    img = np.clip(img + rng_n.normal(0.0, params.noise_sigma, img.shape), 0.0, 1.0)
    raw = np.round(img * RAW_MAX).astype(np.uint16)
    return SynthScan(raw, lungs, lesion, label)


def write_scan_pgm(directory, raw: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(raw.shape[0] - 1)))
    for i, sl in enumerate(raw):
        write_pgm(directory / f"slice_{i:0{width}d}.pgm", sl)


def balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.array([i % 2 for i in range(n)], dtype=np.int64)
    return rng.permutation(labels)


def synthesize_dataset(out_dir, n_train: int, n_val: int, seed: int = 0, size=DEFAULT_SIZE,
                       params: SynthParams = SynthParams()) -> dict[str, Path]:
    """Write ``scans/<id>/slice_*.pgm`` plus ``train.jsonl`` and ``val.jsonl``."""
    if n_train < 0 or n_val < 0:
        raise ValueError("scan counts must be non-negative")
    out = Path(out_dir)
    manifests = {}
    for split_code, (split, count) in enumerate((("train", n_train), ("val", n_val))):
        labels = balanced_labels(count, np.random.default_rng([seed, split_code, 2**31]))
        records = []
        for i, label in enumerate(labels):
            sid = f"{split}_{i:04d}"
            scan = generate_scan(seed, int(label), size, params, split=split_code, index=i)
            path = out / "scans" / sid
            write_scan_pgm(path, scan.raw)
            records.append(ManifestRecord(sid, str(path), int(label)))
        manifests[split] = out / f"{split}.jsonl"
        write_manifest(manifests[split], records)
    return manifests
