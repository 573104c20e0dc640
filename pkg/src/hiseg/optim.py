"""Decoupled-weight-decay Adam with linear warmup.

Weight decay multiplies parameters by (1 - lr*wd) before the moment
update, so zero gradients still shrink decayed weights by exactly that
factor. The learning rate ramps linearly over the warmup steps and then
holds constant (the default policy; cosine decay is available behind
config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class OptimConfig:
    base_lr: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    warmup_steps: int = 250
    eps: float = 1e-8
    lr_policy: str = "constant"  # or "cosine"
    total_steps: int = 0         # used by the cosine policy


def learning_rate(step: int, cfg: OptimConfig) -> float:
    """lr at update number `step` (1-based)."""
    lr = cfg.base_lr
    if cfg.warmup_steps > 0:
        lr *= min(1.0, step / cfg.warmup_steps)
    if cfg.lr_policy == "cosine" and cfg.total_steps > cfg.warmup_steps and step > cfg.warmup_steps:
        t = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
        lr *= 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))
    return lr


class AdamW:
    def __init__(self, params: list[tuple[str, Tensor]], cfg: OptimConfig):
        self.cfg = cfg
        self.params = params
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update using the accumulated gradients; returns the lr used."""
        self.step_count += 1
        lr = learning_rate(self.step_count, self.cfg)
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} mismatches {name} {p.data.shape}")
            if self.cfg.weight_decay:
                p.data *= 1.0 - lr * self.cfg.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.cfg.eps)
        return lr

    # ---- state round-trip for checkpointing ---------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt/m/{name}"] = self.m[name]
            out[f"opt/v/{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        for name in self.m:
            self.m[name] = tensors[f"opt/m/{name}"].copy()
            self.v[name] = tensors[f"opt/v/{name}"].copy()
