"""Frozen ViT image encoder with trainable low-rank bypasses.

The backbone (patch embedding, attention projections, MLPs, norms) is
randomly initialized and frozen: this artifact verifies the adaptation
mechanism, not transfer from a pretrained checkpoint. Only the low-rank
bypass pairs on the configured attention projections (and whatever sits
downstream of the encoder) receive gradient updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .nn import LayerNorm, LinearLayer, MLP, PatchEmbed
from .tensor import Tensor, matmul, softmax


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    in_channels: int = 1
    mlp_ratio: int = 4
    lora_rank: int = 4
    lora_targets: tuple[str, ...] = ("query", "value")

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ShapeError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.lora_rank < 1:
            raise ShapeError("lora_rank must be at least 1")
        bad = set(self.lora_targets) - {"query", "value"}
        if bad:
            raise ShapeError(f"unknown LoRA targets {sorted(bad)}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch


class LoraLayer:
    """A frozen projection plus a trainable rank-r bypass.

    y = base(x) + scale * (x @ down^T) @ up^T. ``up`` starts at zero so the
    adapted layer reproduces the frozen path exactly until trained.
    """

    def __init__(self, rng: np.random.Generator, base: LinearLayer, rank: int, scale: float = 1.0):
        if rank >= min(base.in_dim, base.out_dim):
            raise ShapeError(f"rank {rank} must be below min({base.in_dim}, {base.out_dim})")
        base.weight.requires_grad = False
        base.bias.requires_grad = False
        base.trainable = False
        self.base = base
        self.rank = rank
        self.scale = scale
        self.down = Tensor(rng.normal(0.0, 1.0 / rank, (rank, base.in_dim)), requires_grad=True)
        self.up = Tensor(np.zeros((base.out_dim, rank)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return lora_forward(self, x)

    def bypass_param_count(self) -> int:
        return self.down.size + self.up.size

    def named_params(self, prefix: str):
        yield from self.base.named_params(f"{prefix}.base")
        yield f"{prefix}.down", self.down
        yield f"{prefix}.up", self.up


def lora_forward(layer: LoraLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.base.in_dim:
        raise ShapeError(f"expected trailing extent {layer.base.in_dim}, got {x.shape}")
    y = layer.base(x)
    lead = x.shape[:-1]
    flat = x.reshape((-1, layer.base.in_dim))
    low = flat @ layer.down.transpose()
    delta = (low @ layer.up.transpose()).scale(layer.scale)
    return y + delta.reshape(lead + (layer.base.out_dim,))


class EncoderBlock:
    """Pre-norm transformer block; q/v projections optionally LoRA-adapted."""

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        d = cfg.dim
        self.heads = cfg.heads
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.norm1.gain.requires_grad = False
        self.norm1.shift.requires_grad = False
        self.norm2.gain.requires_grad = False
        self.norm2.shift.requires_grad = False

        def proj(target: str):
            base = LinearLayer.create(rng, d, d, trainable=False)
            if target in cfg.lora_targets:
                return LoraLayer(rng, base, cfg.lora_rank)
            return base

        self.q = proj("query")
        self.k = LinearLayer.create(rng, d, d, trainable=False)
        self.v = proj("value")
        self.o = LinearLayer.create(rng, d, d, trainable=False)
        self.mlp = MLP(rng, d, cfg.mlp_ratio * d, d, trainable=False)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        n, t, d = h.shape
        dh = d // self.heads

        def heads_of(p):
            return p.reshape((n, t, self.heads, dh)).transpose((0, 2, 1, 3))

        q = heads_of(self.q(h))
        k = heads_of(self.k(h))
        v = heads_of(self.v(h))
        logits = matmul(q, k.transpose((0, 1, 3, 2))).scale(1.0 / np.sqrt(dh))
        att = matmul(softmax(logits, axis=-1), v)
        att = att.transpose((0, 2, 1, 3)).reshape((n, t, d))
        x = x + self.o(att)
        return x + self.mlp(self.norm2(x))

    def named_params(self, prefix: str):
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.norm2.named_params(f"{prefix}.norm2")
        yield from self.q.named_params(f"{prefix}.attn.q")
        yield from self.k.named_params(f"{prefix}.attn.k")
        yield from self.v.named_params(f"{prefix}.attn.v")
        yield from self.o.named_params(f"{prefix}.attn.o")
        yield from self.mlp.named_params(f"{prefix}.mlp")


class VitEncoder:
    """Tokenize, run frozen blocks with LoRA bypasses, return a 2-D embedding grid."""

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        self.cfg = cfg
        self.embed = PatchEmbed(rng, cfg.image_size, cfg.patch, cfg.in_channels, cfg.dim,
                                trainable=False)
        self.blocks = [EncoderBlock(rng, cfg) for _ in range(cfg.depth)]

    def __call__(self, image: Tensor) -> Tensor:
        cfg = self.cfg
        if image.ndim != 4 or image.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected (N,{cfg.in_channels},{cfg.image_size},{cfg.image_size}), got {image.shape}")
        x = self.embed(image)
        for block in self.blocks:
            x = block(x)
        n = image.shape[0]
        g = cfg.grid
        return x.transpose((0, 2, 1)).reshape((n, cfg.dim, g, g))

    def named_params(self, prefix: str = "encoder"):
        yield from self.embed.named_params(f"{prefix}.embed")
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i}")

    def lora_param_count(self) -> int:
        total = 0
        for block in self.blocks:
            for layer in (block.q, block.v):
                if isinstance(layer, LoraLayer):
                    total += layer.bypass_param_count()
        return total


def lora_param_count_closed_form(cfg: EncoderConfig) -> int:
    """2 * rank * dim parameters per adapted square projection."""
    per_proj = 2 * cfg.lora_rank * cfg.dim
    return per_proj * len(cfg.lora_targets) * cfg.depth
