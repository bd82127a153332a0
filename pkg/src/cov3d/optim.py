"""Adam with coupled L2 weight decay."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from cov3d.tensor import Tensor


@dataclass(frozen=True)
class OptimHyper:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.weight_decay < 0 or not self.epsilon > 0:
            raise ValueError("weight_decay must be >= 0 and epsilon > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros(np.shape(p)) for p in params], [np.zeros(np.shape(p)) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              hyper: OptimHyper) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update. Returns new parameter arrays and the advanced state.

    Moments are kept in float64; results are cast back to each parameter's dtype.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError(f"got {len(params)} params, {len(grads)} grads and state for {len(state.m)}")
    if state.t < 0:
        raise ValueError(f"step count must be >= 0, got {state.t}")
    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        p = np.asarray(p)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {i}: param {p.shape}, grad {g.shape}, state {m.shape}")
        theta = p.astype(np.float64)
        if hyper.weight_decay:
            g = g + hyper.weight_decay * theta
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        theta = theta - hyper.learning_rate * (m / c1) / (np.sqrt(v / c2) + hyper.epsilon)
        new_params.append(theta.astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


class Adam:
    """Stateful wrapper updating ``Tensor.data`` in place."""

    def __init__(self, params: Sequence[Tensor], hyper: OptimHyper = OptimHyper()):
        self.params = list(params)
        self.hyper = hyper
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.hyper)
        for p, arr in zip(self.params, new):
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

