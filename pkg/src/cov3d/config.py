"""Flat JSON run configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from cov3d.augment import AugmentConfig
from cov3d.model import PRESETS, ModelConfig, preset
from cov3d.optim import OptimHyper
from cov3d.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model
    model: str = "resnest50_3d"
    # training
    epochs: int = 100
    batch_size: int = 2
    seed: int = 0
    grad_accum_steps: int = 1
    eval_depth: Optional[int] = None
    init_ckpt: Optional[str] = None
    # optimizer
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # augmentation
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
    # preprocessing
    prune: bool = True
    target: tuple[int, int, int] = (128, 256, 256)
    tau_air: float = 0.3
    theta: float = 0.05
    center_frac: float = 0.6
    max_trim_frac: float = 0.4
    min_keep: int = 16

    # -- construction -------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        problems = [f"unknown key {k!r}" for k in raw if k not in known]
        values = {}
        for key, value in raw.items():
            if key not in known:
                continue
            try:
                values[key] = _coerce(key, value, getattr(cls, key))
            except ConfigError as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def with_overrides(self, **overrides) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def validate(self) -> None:
        """Build every sub-config once so range errors surface together."""
        problems = []
        for build in (self.augment_config, self.optim_hyper, self.model_config):
            try:
                build()
            except ValueError as exc:
                problems.append(str(exc))
        try:
            TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                        grad_accum_steps=self.grad_accum_steps, eval_depth=self.eval_depth)
        except ValueError as exc:
            problems.append(str(exc))
        if min(self.target) < 1:
            problems.append(f"target extents must be positive, got {list(self.target)}")
        if not 0 <= self.max_trim_frac <= 0.5 or not 0 < self.center_frac <= 1 or self.min_keep < 1:
            problems.append("pruning needs 0 <= max_trim_frac <= 0.5, 0 < center_frac <= 1 and min_keep >= 1")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))

    # -- views --------------------------------------------------------------
    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            resized_crop=self.resized_crop, crop_scale=self.crop_scale, crop_aspect=self.crop_aspect,
            depth_crop=self.depth_crop, depth_crop_to=self.depth_crop_to, rotation=self.rotation,
            rotation_deg=self.rotation_deg, jitter=self.jitter, brightness_delta=self.brightness_delta,
            contrast_range=self.contrast_range)

    def optim_hyper(self) -> OptimHyper:
        return OptimHyper(self.learning_rate, self.weight_decay, self.beta1, self.beta2, self.epsilon)

    def model_config(self) -> ModelConfig:
        return preset(self.model)

    def train_config(self, init_ckpt=None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           augment=self.augment_config(), hyper=self.optim_hyper(),
                           init_ckpt=init_ckpt if init_ckpt is not None else self.init_ckpt,
                           grad_accum_steps=self.grad_accum_steps, eval_depth=self.eval_depth)

    def prune_params(self) -> dict:
        return {"tau_air": self.tau_air, "theta": self.theta, "center_frac": self.center_frac,
                "max_trim_frac": self.max_trim_frac, "min_keep": self.min_keep}

    def preprocess_options(self) -> dict:
        return {"prune": self.prune, "target": list(self.target), **self.prune_params()}


def _coerce(key: str, value, default):
    def fail(kind):
        return ConfigError(f"{key!r} must be {kind}, got {json.dumps(value)}")

    if key in ("eval_depth", "init_ckpt"):
        if value is None:
            return None
        if key == "init_ckpt":
            if not isinstance(value, str):
                raise fail("a path string or null")
            return value
        if isinstance(value, bool) or not isinstance(value, int):
            raise fail("an integer or null")
        return value
    if key == "model":
        if not isinstance(value, str) or value not in PRESETS:
            raise fail(f"one of {sorted(PRESETS)}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise fail("true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise fail("an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise fail("a number")
        return float(value)
    if isinstance(default, tuple):
        n = len(default)
        elem_int = isinstance(default[0], int)
        if not isinstance(value, list) or len(value) != n or any(
                isinstance(v, bool) or not isinstance(v, int if elem_int else (int, float)) for v in value):
            raise fail(f"a list of {n} {'integers' if elem_int else 'numbers'}")
        return tuple(int(v) if elem_int else float(v) for v in value)
    raise fail("a supported value")  # pragma: no cover


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    return RunConfig.from_dict(raw)
