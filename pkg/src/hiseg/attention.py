"""Attention variants used by the two-stage decoder.

Three ways of mixing a prior mask into cross-attention live here, plus the
mask-guided embedding enhancement block:

* plain scaled dot-product multi-head attention;
* binary mask attention: a {0,1} mask mapped to {-inf, 0} and added to the
  logits before softmax. No gradient reaches the mask through this path,
  which is exactly why it is kept only as a baseline;
* learnable mask attention: the untransformed probability mask multiplies
  the softmax weights elementwise, so the mask stays on the tape and
  receives gradients;
* a class-balanced noise augmentation and self-attention block that gates
  the image embedding with a compressed mask feature (Hadamard product
  plus residual).

All attention entry points accept (T, d) token matrices or (N, T, d)
batches; one mask is shared across heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError, UsageError
from .nn import LinearLayer
from .tensor import Tensor, make_op, matmul, softmax

# ---- plumbing ---------------------------------------------------------------


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (T,d) or (N,T,d), got {x.shape}")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, t, d = x.shape
    if d % heads:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    return x.reshape((n, t, heads, d // heads)).transpose((0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, t, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape((n, t, h * dh))


class CrossAttention:
    """Projection weights for one attention operation.

    The output projection carries no bias so that a fully suppressed
    attention map contributes exactly zero.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, trainable: bool = True):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q = LinearLayer.create(rng, dim, dim, trainable)
        self.k = LinearLayer.create(rng, dim, dim, trainable)
        self.v = LinearLayer.create(rng, dim, dim, trainable)
        self.out = LinearLayer.create(rng, dim, dim, trainable)
        self.out.bias.requires_grad = False  # bias-free output projection

    def named_params(self, prefix: str):
        yield from self.q.named_params(f"{prefix}.q")
        yield from self.k.named_params(f"{prefix}.k")
        yield from self.v.named_params(f"{prefix}.v")
        yield f"{prefix}.out.weight", self.out.weight


def _attention_weights(attn: CrossAttention, x: Tensor, source: Tensor):
    """Return (softmax weights (N,h,T,S), value heads (N,h,S,dh))."""
    q = _split_heads(attn.q(x), attn.heads)
    k = _split_heads(attn.k(source), attn.heads)
    v = _split_heads(attn.v(source), attn.heads)
    dh = attn.dim // attn.heads
    logits = matmul(q, k.transpose((0, 1, 3, 2))).scale(1.0 / np.sqrt(dh))
    return softmax(logits, axis=-1), v


def multi_head_attention(attn: CrossAttention, x: Tensor, source: Tensor | None = None) -> Tensor:
    """Standard scaled dot-product attention; queries from x, keys/values
    from source (self-attention when source is omitted)."""
    xb, squeeze = _batched(x)
    sb, _ = _batched(source if source is not None else x)
    weights, v = _attention_weights(attn, xb, sb)
    out = attn.out(_merge_heads(matmul(weights, v)))
    return out.reshape(x.shape[:-1] + (attn.dim,)) if squeeze else out


def _masked_softmax_binary(logits: Tensor, mask_bin: Tensor) -> Tensor:
    """Softmax of logits + t(mask), t: {0,1} -> {-inf, 0}.

    Rows whose mask is entirely zero produce all-zero attention weights
    (the documented convention: those tokens fall back to the residual).
    The mask joins the tape with an identically-zero gradient, which is
    the point of contrast with the learnable formulation.
    """
    m = mask_bin.data
    if not np.all((m == 0.0) | (m == 1.0)):
        raise DomainError("binary mask must contain only 0/1 entries")
    keep = m == 1.0  # (T,S) or (N,T,S); logits are (N,h,T,S)
    if keep.ndim == 2:
        keep_b = np.broadcast_to(keep, logits.shape)
    else:
        keep_b = np.broadcast_to(keep[:, None, :, :], logits.shape)
    shifted = np.where(keep_b, logits.data, -np.inf)
    row_max = np.max(shifted, axis=-1, keepdims=True)
    safe_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(np.where(keep_b, shifted - safe_max, -np.inf))
    e = np.where(keep_b, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out_data = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def bw(g):
        dot = np.sum(g * out_data, axis=-1, keepdims=True)
        logits._accumulate(out_data * (g - dot))
        mask_bin._accumulate(np.zeros_like(mask_bin.data))

    return make_op(out_data, (logits, mask_bin), bw)


def binary_mask_attention(attn: CrossAttention, x: Tensor, source: Tensor,
                          mask_bin: Tensor) -> Tensor:
    """Additive-infinity masked cross-attention plus residual.

    mask rows align with query tokens, columns with source positions.
    """
    xb, squeeze = _batched(x)
    sb, _ = _batched(source)
    _check_mask_shape(mask_bin, xb, sb)
    q = _split_heads(attn.q(xb), attn.heads)
    k = _split_heads(attn.k(sb), attn.heads)
    v = _split_heads(attn.v(sb), attn.heads)
    dh = attn.dim // attn.heads
    logits = matmul(q, k.transpose((0, 1, 3, 2))).scale(1.0 / np.sqrt(dh))
    weights = _masked_softmax_binary(logits, mask_bin)
    out = attn.out(_merge_heads(matmul(weights, v))) + xb
    return out.reshape(x.shape) if squeeze else out


def learnable_mask_attention(attn: CrossAttention, x: Tensor, source: Tensor,
                             mask: Tensor) -> Tensor:
    """Probability-mask-modulated cross-attention plus residual.

    The mask multiplies the softmax weights elementwise (one shared mask
    across heads) before the value product, so gradients flow back into it.
    """
    xb, squeeze = _batched(x)
    sb, _ = _batched(source)
    _check_mask_shape(mask, xb, sb)
    if np.any(mask.data < -1e-12) or np.any(mask.data > 1.0 + 1e-12):
        raise DomainError("mask entries must lie in [0, 1]")
    q = _split_heads(attn.q(xb), attn.heads)
    k = _split_heads(attn.k(sb), attn.heads)
    v = _split_heads(attn.v(sb), attn.heads)
    dh = attn.dim // attn.heads
    logits = matmul(q, k.transpose((0, 1, 3, 2))).scale(1.0 / np.sqrt(dh))
    weights = softmax(logits, axis=-1)
    mb = mask if mask.ndim == 3 else mask.reshape((1,) + mask.shape)
    gated = weights * mb.reshape((mb.shape[0], 1) + mb.shape[1:])
    out = attn.out(_merge_heads(matmul(gated, v))) + xb
    return out.reshape(x.shape) if squeeze else out


def _check_mask_shape(mask: Tensor, xb: Tensor, sb: Tensor) -> None:
    t, s = xb.shape[1], sb.shape[1]
    if mask.ndim == 2:
        ok = mask.shape == (t, s)
    elif mask.ndim == 3:
        ok = mask.shape == (xb.shape[0], t, s)
    else:
        ok = False
    if not ok:
        raise ShapeError(f"mask shape {mask.shape} does not align with ({t} tokens, {s} positions)")


# ---- class-balanced noise augmentation ---------------------------------------


@dataclass
class ClassNoiseTable:
    """Per-class Gaussian variances, inversely tied to class pixel frequency.

    var(i) = sigma0 * f_med / f_i, clamped to [0, var_max]; classes that
    never occur are pinned at var_max and flagged.
    """

    var: np.ndarray
    absent_classes: list[int] = field(default_factory=list)

    @classmethod
    def from_frequencies(cls, freqs, sigma0: float = 0.05, var_max: float = 1.0) -> "ClassNoiseTable":
        f = np.asarray(freqs, dtype=np.float64)
        if np.any(f < 0):
            raise DomainError("frequencies must be non-negative")
        med = float(np.median(f[f > 0])) if np.any(f > 0) else 0.0
        var = np.empty_like(f)
        absent = []
        for i, fi in enumerate(f):
            if fi <= 0:
                var[i] = var_max
                absent.append(i)
            else:
                var[i] = min(sigma0 * med / fi, var_max)
        return cls(var=var, absent_classes=absent)

    @property
    def num_classes(self) -> int:
        return len(self.var)


def class_balanced_augment(p: Tensor, gt: np.ndarray, table: ClassNoiseTable,
                           rng_seed, training: bool = True) -> Tensor:
    """Perturb a mask feature with per-class Gaussian noise.

    At every pixel labeled i, each of the C channels receives independent
    N(0, var(i)) noise. Evaluation mode is a strict no-op. gt must already
    be at the feature's spatial resolution.
    """
    if not training:
        return p
    if p.ndim != 4:
        raise ShapeError(f"expected (N,C,h,w) mask feature, got {p.shape}")
    n, c, h, w = p.shape
    gt = np.asarray(gt)
    if gt.shape != (n, h, w):
        raise ShapeError(f"gt shape {gt.shape} does not match feature grid {(n, h, w)}")
    if gt.min() < 0 or gt.max() >= table.num_classes:
        raise DomainError(f"labels must lie in [0, {table.num_classes})")
    std_map = np.sqrt(table.var[gt])  # (n, h, w)
    if not std_map.any():
        return p
    rng = np.random.default_rng(rng_seed)
    noise = rng.standard_normal((n, c, h, w)) * std_map[:, None, :, :]
    return p + Tensor(noise)


# ---- mask-guided embedding enhancement ----------------------------------------


class MaskGuidedEnhancer:
    """Gates the image embedding with self-attended, noise-balanced mask features.

    E' = E + E * proj(attend(normalize(P))), where the self-attention runs
    over the spatial positions with class-probability features and proj
    compresses C channels up to the embedding width. proj starts at zero,
    making the block an exact identity at initialization.
    """

    def __init__(self, rng: np.random.Generator, num_classes: int, dim: int, heads: int = 1):
        self.num_classes = num_classes
        self.dim = dim
        self.attn = CrossAttention(rng, num_classes, heads)
        self.proj = LinearLayer(Tensor(np.zeros((dim, num_classes))), Tensor(np.zeros(dim)))

    def __call__(self, embedding: Tensor, mask_feature: Tensor, *, table: ClassNoiseTable,
                 gt: np.ndarray | None = None, rng_seed=None, training: bool = False) -> Tensor:
        if embedding.ndim != 4 or mask_feature.ndim != 4:
            raise ShapeError("expected (N,d,h,w) embedding and (N,C,h,w) mask feature")
        n, d, h, w = embedding.shape
        if mask_feature.shape[0] != n or mask_feature.shape[2:] != (h, w):
            raise ShapeError(
                f"mask feature {mask_feature.shape} does not align with embedding {embedding.shape}")
        if training and gt is None:
            raise UsageError("training mode requires the resized ground-truth labels")

        normed = softmax(mask_feature, axis=1)
        normed = class_balanced_augment(normed, gt, table, rng_seed, training=training)
        tokens = normed.reshape((n, self.num_classes, h * w)).transpose((0, 2, 1))
        attended = multi_head_attention(self.attn, tokens)
        gate = self.proj(attended)  # (n, h*w, d)
        gate = gate.transpose((0, 2, 1)).reshape((n, d, h, w))
        return embedding + embedding * gate

    def named_params(self, prefix: str):
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.proj.named_params(f"{prefix}.proj")
