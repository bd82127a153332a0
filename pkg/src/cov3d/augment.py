"""Seeded training-time augmentations for unit-domain volumes.

Stages run in a fixed order: transverse random-resized crop, depth crop,
in-plane rotation, brightness/contrast jitter. The output is a pure
function of ``(volume, config, seed)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from cov3d import kernels
from cov3d.volume import Volume


@dataclass(frozen=True)
class AugmentConfig:
    resized_crop: bool = True
    crop_scale: tuple[float, float] = (0.7, 1.0)
    crop_aspect: tuple[float, float] = (0.75, 1.333)
    depth_crop: bool = True
    depth_crop_to: int = 64
    rotation: bool = True
    rotation_deg: float = 10.0
    jitter: bool = True
    brightness_delta: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        for name in ("crop_scale", "crop_aspect", "contrast_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range is empty: ({lo}, {hi})")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1:
            raise ValueError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        if self.crop_aspect[0] <= 0:
            raise ValueError("crop_aspect must be positive")
        if self.depth_crop_to < 1:
            raise ValueError(f"depth_crop_to must be >= 1, got {self.depth_crop_to}")
        if self.rotation_deg < 0 or self.brightness_delta < 0:
            raise ValueError("rotation_deg and brightness_delta must be non-negative")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        base = dict(resized_crop=False, depth_crop=False, rotation=False, jitter=False)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_seed(global_seed: int, epoch: int, index: int) -> int:
    """Per-sample seed: epochs differ, reruns reproduce."""
    ss = np.random.SeedSequence([int(global_seed) & (2**63 - 1), int(epoch), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def _crop_window(rng: np.random.Generator, h: int, w: int, scale, aspect):
    area = h * w
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        ch = int(round(math.sqrt(target / ratio)))
        cw = int(round(math.sqrt(target * ratio)))
        if 0 < ch <= h and 0 < cw <= w:
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            return y0, x0, ch, cw
    return 0, 0, h, w


def _rotate(vox: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate every slice about its centre; bilinear, zero fill."""
    d, h, w = vox.shape
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    sy = c * yy + s * xx + cy
    sx = -s * yy + c * xx + cx
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    fy, fx = sy - y0, sx - x0
    out = np.zeros((d, h, w), dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            weight = np.where(inside, wy * wx, 0.0)
            out += vox[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)] * weight
    return out.astype(np.float32)


def apply_augmentations(v: Volume, cfg: AugmentConfig, seed: int) -> Volume:
    if v.intensity_domain != "unit":
        raise ValueError("augmentations expect a unit-domain volume")
    if cfg.depth_crop and v.depth < cfg.depth_crop_to:
        raise ValueError(f"volume depth {v.depth} is smaller than depth_crop_to={cfg.depth_crop_to}")
    rng = np.random.default_rng(seed)
    vox = v.voxels
    d, h, w = vox.shape

    if cfg.resized_crop:
        y0, x0, ch, cw = _crop_window(rng, h, w, cfg.crop_scale, cfg.crop_aspect)
        if (ch, cw) != (h, w):
            crop = np.ascontiguousarray(vox[:, y0:y0 + ch, x0:x0 + cw])
            vox = kernels.resize_trilinear(crop, d, h, w)

    if cfg.depth_crop:
        start = int(rng.integers(0, d - cfg.depth_crop_to + 1))
        vox = vox[start:start + cfg.depth_crop_to]

    if cfg.rotation:
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        if angle != 0.0:
            vox = _rotate(vox, angle)

    if cfg.jitter:
        brightness = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
        contrast = rng.uniform(*cfg.contrast_range)
        vox = np.clip(contrast * (vox.astype(np.float64) - 0.5) + 0.5 + brightness, 0.0, 1.0)

    return Volume(np.array(vox, dtype=np.float32), "unit", v.scan_id)


def center_eval_crop(v: Volume, depth_to: int) -> Volume:
    """Central ``depth_to`` slices, starting at ``floor((D - depth_to) / 2)``."""
    if depth_to < 1 or v.depth < depth_to:
        raise ValueError(f"cannot crop depth {v.depth} to {depth_to}")
    start = (v.depth - depth_to) // 2
    return Volume(v.voxels[start:start + depth_to], v.intensity_domain, v.scan_id)
