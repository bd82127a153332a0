"""3D split-attention residual network.

Layout: stem (3x3x3 conv stride (1,2,2), BN, ReLU, 3x3x3 max pool stride 2)
-> four stages of bottleneck blocks whose 3x3x3 convolution is a
split-attention unit -> global average pool -> dense head.

Parameter names are dotted paths (``layer2.0.sa.fc1.weight``); the head
lives under ``head.``.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from typing import Iterator, Optional

import numpy as np

from cov3d import ops
from cov3d.tensor import Tensor, get_dtype


@dataclass(frozen=True)
class ModelConfig:
    stage_blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    stem_channels: int = 64
    stage_widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    radix: int = 2
    cardinality: int = 1
    bottleneck_expansion: int = 4
    num_classes: int = 2
    input_shape: tuple[int, int, int, int] = (1, 64, 256, 256)
    attention_floor: int = 32
    attention_reduction: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.stage_blocks) != 4 or len(self.stage_widths) != 4:
            raise ValueError("stage_blocks and stage_widths need exactly 4 entries")
        if min(self.stage_blocks) < 1:
            raise ValueError(f"every stage needs at least one block, got {self.stage_blocks}")
        if self.radix < 1 or self.cardinality < 1:
            raise ValueError(f"radix and cardinality must be >= 1, got R={self.radix}, K={self.cardinality}")
        groups = self.radix * self.cardinality
        for i, w in enumerate(self.stage_widths):
            if w < 1 or w % groups:
                raise ValueError(f"stage {i + 1} width {w} not divisible by cardinality*radix={groups}")
        if self.stem_channels < 1 or self.num_classes < 2 or self.bottleneck_expansion < 1:
            raise ValueError("stem_channels, bottleneck_expansion must be >= 1 and num_classes >= 2")
        if len(self.input_shape) != 4 or self.input_shape[0] != 1 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (1, D, H, W), got {self.input_shape}")
        if self.attention_floor < 1 or self.attention_reduction < 1:
            raise ValueError("attention_floor and attention_reduction must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_input(self, depth: int, height: int, width: int) -> "ModelConfig":
        return replace(self, input_shape=(1, depth, height, width))

    def attention_channels(self, width: int) -> int:
        inter = max(width * self.radix // self.attention_reduction, self.attention_floor)
        k = self.cardinality
        return -(-inter // k) * k


PRESETS = {
    "resnest50_3d": ModelConfig(),
    "tiny3d": ModelConfig(stage_blocks=(1, 1, 1, 1), stem_channels=8, stage_widths=(8, 16, 32, 64),
                          input_shape=(1, 16, 32, 32), attention_floor=8),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------
class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._modules[name] = module
        object.__setattr__(self, name, module)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        for name in self._buffers:
            yield prefix + name, self, name
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters then buffers of each module, in registration order."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._collect_state("", out)
        return out

    def _collect_state(self, prefix, out):
        for name, p in self._params.items():
            out[prefix + name] = p.data
        for name, b in self._buffers.items():
            out[prefix + name] = b
        for name, m in self._modules.items():
            m._collect_state(prefix + name + ".", out)

    def _slots(self) -> dict:
        """name -> (owner module, attribute, is_parameter)."""
        slots = {}

        def walk(mod, prefix):
            for name in mod._params:
                slots[prefix + name] = (mod, name, True)
            for name in mod._buffers:
                slots[prefix + name] = (mod, name, False)
            for name, child in mod._modules.items():
                walk(child, prefix + name + ".")

        walk(self, "")
        return slots

    def assign_state(self, values: dict) -> None:
        """Overwrite named parameters/buffers in place (shapes must match)."""
        slots = self._slots()
        for name, arr in values.items():
            owner, attr, is_param = slots[name]
            current = owner._params[attr].data if is_param else owner._buffers[attr]
            if current.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {current.shape}")
        for name, arr in values.items():
            owner, attr, is_param = slots[name]
            if is_param:
                owner._params[attr].data = np.array(arr, dtype=owner._params[attr].dtype)
            else:
                owner._buffers[attr][...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=True)


class Conv3d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, groups=1, bias=False):
        super().__init__()
        k = ops._triple(kernel, "kernel")
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = _param((cout, cin // groups) + k)
        if bias:
            self.bias = _param((cout,))
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = _param((channels,))
        self.beta = _param((channels,))
        self.register_buffer("running_mean", np.zeros(channels, dtype=get_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=get_dtype()))

    def forward(self, x):
        return ops.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Dense(Module):
    def __init__(self, fin, fout, groups=1, bias=True):
        super().__init__()
        self.groups = groups
        self.weight = _param((fout, fin // groups))
        if bias:
            self.bias = _param((fout,))
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x):
        return ops.dense(x, self.weight, self.bias, self.groups)


class SplitAttention3d(Module):
    """Grouped conv into ``radix`` splits, recombined by per-channel attention."""

    def __init__(self, channels: int, radix: int, cardinality: int, inter: int):
        super().__init__()
        self.channels, self.radix, self.cardinality = channels, radix, cardinality
        self.conv = Conv3d(channels, channels * radix, 3, padding=1, groups=cardinality * radix)
        self.bn0 = BatchNorm(channels * radix)
        self.fc1 = Dense(channels, inter, groups=cardinality)
        self.bn1 = BatchNorm(inter)
        self.fc2 = Dense(inter, channels * radix, groups=cardinality)
        object.__setattr__(self, "last_attention", None)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ValueError(f"split-attention unit expects (N, {self.channels}, D, H, W), got {x.shape}")
        n = x.shape[0]
        c, r, k = self.channels, self.radix, self.cardinality
        feats = ops.relu(self.bn0(self.conv(x)))
        spatial = feats.shape[2:]
        if r > 1:
            splits = feats.reshape((n, r, c) + spatial)
            pooled_in = splits.sum(axis=1)
        else:
            splits = feats
            pooled_in = feats
        gap = ops.global_avg_pool(pooled_in)
        hidden = ops.relu(self.bn1(self.fc1(gap)))
        logits = self.fc2(hidden)
        if r > 1:
            att = ops.softmax(logits.reshape(n, k, r, c // k), axis=2).transpose(0, 2, 1, 3)
            att = att.reshape(n, r, c, 1, 1, 1)
            object.__setattr__(self, "last_attention", att.data.reshape(n, r, c))
            return (splits * att).sum(axis=1)
        att = ops.sigmoid(logits).reshape(n, c, 1, 1, 1)
        object.__setattr__(self, "last_attention", att.data.reshape(n, 1, c))
        return splits * att


class Shortcut(Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.stride = stride
        self.conv = Conv3d(cin, cout, 1)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        if self.stride > 1:
            x = ops.avg_pool3d(x, self.stride, self.stride, ceil_mode=True)
        return self.bn(self.conv(x))


class Bottleneck(Module):
    def __init__(self, cin: int, width: int, stride: int, cfg: ModelConfig):
        super().__init__()
        cout = width * cfg.bottleneck_expansion
        self.stride = stride
        self.conv1 = Conv3d(cin, width, 1)
        self.bn1 = BatchNorm(width)
        self.sa = SplitAttention3d(width, cfg.radix, cfg.cardinality, cfg.attention_channels(width))
        self.conv3 = Conv3d(width, cout, 1)
        self.bn3 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.downsample = Shortcut(cin, cout, stride)
        else:
            object.__setattr__(self, "downsample", None)

    def forward(self, x):
        out = ops.relu(self.bn1(self.conv1(x)))
        out = self.sa(out)
        if self.stride > 1:
            out = ops.avg_pool3d(out, 3, self.stride, padding=1)
        out = self.bn3(self.conv3(out))
        residual = x if self.downsample is None else self.downsample(x)
        return ops.relu(out + residual)


class Stage(Module):
    def __init__(self, blocks: list[Module]):
        super().__init__()
        self.blocks = blocks
        for i, b in enumerate(blocks):
            self.add_module(str(i), b)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class Stem(Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = Conv3d(1, channels, 3, stride=(1, 2, 2), padding=1)
        self.bn = BatchNorm(channels)

    def forward(self, x):
        x = ops.relu(self.bn(self.conv(x)))
        return ops.max_pool3d(x, 3, 2, padding=1)


_DOWNSAMPLING = [("stem conv", (1, 2, 2)), ("stem pool", (2, 2, 2)), ("layer2", (2, 2, 2)),
                 ("layer3", (2, 2, 2)), ("layer4", (2, 2, 2))]


def check_input_extents(spatial) -> None:
    """Every downsampling step must see at least ``stride`` voxels per axis."""
    cur = list(spatial)
    for stage, strides in _DOWNSAMPLING:
        for axis, size, s in zip(("depth", "height", "width"), cur, strides):
            if size < s:
                raise ValueError(f"input too small: {stage} needs {axis} >= {s}, got {size} "
                                 f"(network input {tuple(spatial)})")
        cur = [size // s for size, s in zip(cur, strides)]


def min_input_extent() -> tuple[int, int, int]:
    """Smallest (D, H, W) the downsampling chain accepts: (16, 32, 32)."""
    return tuple(int(np.prod([st[axis] for _, st in _DOWNSAMPLING])) for axis in range(3))


class ResNeSt3D(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        object.__setattr__(self, "config", cfg)
        self.stem = Stem(cfg.stem_channels)
        cin = cfg.stem_channels
        for i, (blocks, width) in enumerate(zip(cfg.stage_blocks, cfg.stage_widths)):
            stage_blocks = []
            for j in range(blocks):
                stride = 2 if (i > 0 and j == 0) else 1
                stage_blocks.append(Bottleneck(cin, width, stride, cfg))
                cin = width * cfg.bottleneck_expansion
            self.add_module(f"layer{i + 1}", Stage(stage_blocks))
        self.head = Dense(cin, cfg.num_classes)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"model expects (N, 1, D, H, W) input, got shape {x.shape}")
        check_input_extents(x.shape[2:])
        x = self.stem(x)
        for i in range(4):
            x = getattr(self, f"layer{i + 1}")(x)
        return self.head(ops.global_avg_pool(x))

    def split_attention_units(self) -> list[SplitAttention3d]:
        return [m for m in self.modules() if isinstance(m, SplitAttention3d)]


def _fan_in(shape) -> int:
    return int(np.prod(shape[1:]))


def initialize(model: Module, seed: int, only: Optional[set] = None) -> None:
    """Fan-in scaled uniform weights, BN gamma 1 / beta 0, zero biases."""
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if only is not None and name not in only:
            continue
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            p.data = np.ones(p.shape, dtype=p.dtype)
        elif leaf in ("beta", "bias"):
            p.data = np.zeros(p.shape, dtype=p.dtype)
        else:
            bound = math.sqrt(6.0 / _fan_in(p.shape))
            p.data = rng.uniform(-bound, bound, size=p.shape).astype(p.dtype)
    for name, owner, attr in model.named_buffers():
        if only is not None and name not in only:
            continue
        buf = owner._buffers[attr]
        buf[...] = 1.0 if attr == "running_var" else 0.0


def build_model(cfg: ModelConfig, init_seed: int = 0) -> ResNeSt3D:
    model = ResNeSt3D(cfg)
    initialize(model, init_seed)
    return model


def parameter_count(model: Module) -> int:
    return sum(p.size for p in model.parameters())
