"""Two-stage hierarchical mask decoding.

Stage 1 is a compact two-way transformer decoder plus a small pixel
decoder: class tokens attend to the image embedding and back, per-class
logit maps come from token/feature inner products at quarter resolution,
and a per-pixel softmax over classes yields the prior probability mask.
The updated image feature also produces a class-channel mask feature at
embedding resolution (no upsampling) for the embedding enhancer.

Stage 2 runs the same two-way structure on the (optionally enhanced)
embedding, modulating its token-to-image cross-attention with the resized
prior, then decodes to full resolution through transposed-conv stages that
concatenate the matching-resolution stage-1 features (skip connections,
1x1 fusion). The final prediction averages the two stages' probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    CrossAttention,
    binary_mask_attention,
    learnable_mask_attention,
    multi_head_attention,
)
from .errors import ShapeError, UsageError
from .nn import (
    ChannelNorm2d,
    ConvLayer,
    ConvSpec,
    LayerNorm,
    LinearLayer,
    MLP,
    bilinear_resize,
    trunc_normal,
)
from .tensor import Tensor, concat, matmul, softmax

MASK_MODES = ("none", "original", "learnable")


class ClassQueries:
    """One learnable token per class, background included."""

    def __init__(self, rng: np.random.Generator, num_classes: int, dim: int):
        self.tokens = Tensor(trunc_normal(rng, (num_classes, dim)), requires_grad=True)

    @property
    def num_classes(self) -> int:
        return self.tokens.shape[0]

    def named_params(self, prefix: str):
        yield f"{prefix}.tokens", self.tokens


class TwoWayBlock:
    """Token self-attention, token-to-image cross-attention (optionally
    mask-modulated), token MLP, then image-to-token cross-attention."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: int = 2):
        self.self_attn = CrossAttention(rng, dim, heads)
        self.cross_t2i = CrossAttention(rng, dim, heads)
        self.cross_i2t = CrossAttention(rng, dim, heads)
        self.mlp = MLP(rng, dim, mlp_ratio * dim, dim)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.norm3 = LayerNorm(dim)
        self.norm4 = LayerNorm(dim)

    def __call__(self, tokens: Tensor, image: Tensor, mask: Tensor | None = None,
                 mask_mode: str = "none") -> tuple[Tensor, Tensor]:
        t = self.norm1(tokens + multi_head_attention(self.self_attn, tokens))
        if mask is None or mask_mode == "none":
            attended = t + multi_head_attention(self.cross_t2i, t, image)
        elif mask_mode == "learnable":
            attended = learnable_mask_attention(self.cross_t2i, t, image, mask)
        elif mask_mode == "original":
            attended = binary_mask_attention(self.cross_t2i, t, image, mask)
        else:
            raise UsageError(f"unknown mask mode {mask_mode!r}")
        t = self.norm2(attended)
        t = self.norm3(t + self.mlp(t))
        image = self.norm4(image + multi_head_attention(self.cross_i2t, image, t))
        return t, image

    def named_params(self, prefix: str):
        yield from self.self_attn.named_params(f"{prefix}.self_attn")
        yield from self.cross_t2i.named_params(f"{prefix}.cross_t2i")
        yield from self.cross_i2t.named_params(f"{prefix}.cross_i2t")
        yield from self.mlp.named_params(f"{prefix}.mlp")
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.norm2.named_params(f"{prefix}.norm2")
        yield from self.norm3.named_params(f"{prefix}.norm3")
        yield from self.norm4.named_params(f"{prefix}.norm4")


@dataclass
class Stage1Output:
    prior: Tensor           # (N, C, H/4, W/4) per-pixel class probabilities
    logits: Tensor          # (N, C, H/4, W/4) pre-softmax
    mask_feature: Tensor    # (N, C, h_e, w_e) token-embedding inner products
    skip_features: list     # pixel-decoder features, strictly increasing extents
    tokens_out: Tensor      # (N, C, dim) updated class tokens
    image_feature: Tensor   # (N, dim, h_e, w_e) updated image embedding


@dataclass
class Stage2Output:
    logits: Tensor          # (N, C, H, W) at full resolution (or H/4 without
                            # the hierarchical pixel decoder)


def _tokens_times_feature(tokens: Tensor, feature: Tensor) -> Tensor:
    """(N,C,d') x (N,d',h,w) -> (N,C,h,w) logit maps, scaled by 1/sqrt(d')."""
    n, d, h, w = feature.shape
    flat = feature.reshape((n, d, h * w))
    out = matmul(tokens, flat).scale(1.0 / np.sqrt(d))
    return out.reshape((tokens.shape[0], tokens.shape[1], h, w))


class Stage1Decoder:
    """SAM-style first decoding stage: two unmasked two-way blocks, a
    two-step upsampling pixel decoder, and token-projected logit maps."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, depth: int = 2):
        self.dim = dim
        self.blocks = [TwoWayBlock(rng, dim, heads) for _ in range(depth)]
        self.up1 = ConvLayer(rng, ConvSpec(dim, dim // 2, kernel=2, stride=2, transposed=True))
        self.norm1 = ChannelNorm2d(dim // 2)
        self.up2 = ConvLayer(rng, ConvSpec(dim // 2, dim // 4, kernel=2, stride=2, transposed=True))
        self.norm2 = ChannelNorm2d(dim // 4)
        self.token_mlp = MLP(rng, dim, dim, dim // 2)

    def __call__(self, embedding: Tensor, queries: ClassQueries) -> Stage1Output:
        if embedding.ndim != 4 or embedding.shape[1] != self.dim:
            raise ShapeError(f"expected (N,{self.dim},h,w) embedding, got {embedding.shape}")
        n, d, h, w = embedding.shape
        c = queries.num_classes
        tokens = queries.tokens.reshape((1, c, d)) + Tensor(np.zeros((n, c, d)))
        image = embedding.reshape((n, d, h * w)).transpose((0, 2, 1))
        for block in self.blocks:
            tokens, image = block(tokens, image)
        image_feature = image.transpose((0, 2, 1)).reshape((n, d, h, w))

        mask_feature = _tokens_times_feature(tokens, image_feature)

        f_quarter = self.norm1(self.up1(image_feature)).relu()
        f_half = self.norm2(self.up2(f_quarter)).relu()
        logits = _tokens_times_feature(self.token_mlp(tokens), f_quarter)
        prior = softmax(logits, axis=1)
        return Stage1Output(
            prior=prior,
            logits=logits,
            mask_feature=mask_feature,
            skip_features=[f_quarter, f_half],
            tokens_out=tokens,
            image_feature=image_feature,
        )

    def named_params(self, prefix: str):
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i}")
        yield from self.up1.named_params(f"{prefix}.pixel.up1")
        yield from self.norm1.named_params(f"{prefix}.pixel.norm1")
        yield from self.up2.named_params(f"{prefix}.pixel.up2")
        yield from self.norm2.named_params(f"{prefix}.pixel.norm2")
        yield from self.token_mlp.named_params(f"{prefix}.token_mlp")


class Stage2Decoder:
    """Second decoding stage with mask-modulated cross-attention and a
    skip-connected pixel decoder reaching full resolution.

    Without the hierarchical pixel decoder it mirrors stage 1 exactly
    (single upsampling step, quarter-resolution logits, no skips).
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, depth: int = 2,
                 hierarchical: bool = True, mask_mode: str = "learnable"):
        if mask_mode not in MASK_MODES:
            raise UsageError(f"mask_mode must be one of {MASK_MODES}")
        self.dim = dim
        self.hierarchical = hierarchical
        self.mask_mode = mask_mode
        self.blocks = [TwoWayBlock(rng, dim, heads) for _ in range(depth)]
        self.up0 = ConvLayer(rng, ConvSpec(dim, dim // 2, kernel=2, stride=2, transposed=True))
        self.norm0 = ChannelNorm2d(dim // 2)
        if hierarchical:
            self.fuse_a = ConvLayer(rng, ConvSpec(dim, dim // 2, kernel=1))
            self.up_a = ConvLayer(rng, ConvSpec(dim // 2, dim // 4, kernel=2, stride=2, transposed=True))
            self.norm_a = ChannelNorm2d(dim // 4)
            self.fuse_b = ConvLayer(rng, ConvSpec(dim // 2, dim // 4, kernel=1))
            self.up_b = ConvLayer(rng, ConvSpec(dim // 4, dim // 8, kernel=2, stride=2, transposed=True))
            self.norm_b = ChannelNorm2d(dim // 8)
            self.token_mlp = MLP(rng, dim, dim, dim // 8)
        else:
            self.token_mlp = MLP(rng, dim, dim, dim // 2)

    def __call__(self, embedding: Tensor, prior: Tensor, skip_features: list,
                 queries: Tensor) -> Stage2Output:
        if embedding.ndim != 4 or embedding.shape[1] != self.dim:
            raise ShapeError(f"expected (N,{self.dim},h,w) embedding, got {embedding.shape}")
        n, d, h, w = embedding.shape
        c = prior.shape[1]

        mask = None
        if self.mask_mode != "none":
            resized = bilinear_resize(prior, h, w)  # rows align with class tokens
            mask = resized.reshape((n, c, h * w))
            if self.mask_mode == "original":
                mask = Tensor((mask.data >= 0.5).astype(np.float64))

        tokens = queries
        image = embedding.reshape((n, d, h * w)).transpose((0, 2, 1))
        for block in self.blocks:
            tokens, image = block(tokens, image, mask, self.mask_mode)
        image_feature = image.transpose((0, 2, 1)).reshape((n, d, h, w))

        x = self.up0(image_feature).relu()
        if self.hierarchical:
            if len(skip_features) < 2:
                raise UsageError("hierarchical decoding requires two stage-1 skip features")
            f_quarter, f_half = skip_features[0], skip_features[1]
            if f_quarter.shape[2:] != x.shape[2:]:
                raise UsageError(
                    f"missing stage-1 skip at resolution {x.shape[2:]} (got {f_quarter.shape[2:]})")
            x = self.fuse_a(concat([x, f_quarter], axis=1)).relu()
            x = self.up_a(x).relu()
            if f_half.shape[2:] != x.shape[2:]:
                raise UsageError(
                    f"missing stage-1 skip at resolution {x.shape[2:]} (got {f_half.shape[2:]})")
            x = self.fuse_b(concat([x, f_half], axis=1)).relu()
            x = self.up_b(x).relu()
        logits = _tokens_times_feature(self.token_mlp(tokens), x)
        return Stage2Output(logits=logits)

    def named_params(self, prefix: str):
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i}")
        yield from self.up0.named_params(f"{prefix}.pixel.up0")
        if self.hierarchical:
            yield from self.fuse_a.named_params(f"{prefix}.pixel.fuse_a")
            yield from self.up_a.named_params(f"{prefix}.pixel.up_a")
            yield from self.fuse_b.named_params(f"{prefix}.pixel.fuse_b")
            yield from self.up_b.named_params(f"{prefix}.pixel.up_b")
        yield from self.token_mlp.named_params(f"{prefix}.token_mlp")


def ensemble(prior: Tensor, stage2_logits: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average the two stages' class probabilities at the target resolution.

    Stage-1 probabilities and softmaxed stage-2 logits are each bilinearly
    resized to (out_h, out_w); interpolation preserves per-pixel sums of 1.
    """
    p1 = bilinear_resize(prior, out_h, out_w)
    p2 = bilinear_resize(softmax(stage2_logits, axis=1), out_h, out_w)
    return (p1 + p2).scale(0.5)
