"""Neural layers built on the tensor core.

Linear projection, layer normalization, 2-D convolution / transposed
convolution (cross-correlation convention, no kernel flip), bilinear
resampling (align-corners-false) and ViT-style patch embedding. The fused
convolution and resize kernels register custom adjoints on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, make_op

# ---- initialization --------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations, by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


# ---- linear ----------------------------------------------------------------


class LinearLayer:
    """y = x W^T + b. Frozen layers hold non-grad weights and never update."""

    def __init__(self, weight: Tensor, bias: Tensor, trainable: bool = True):
        if weight.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
            raise ShapeError(f"inconsistent linear shapes {weight.shape} / {bias.shape}")
        self.weight = weight
        self.bias = bias
        self.trainable = trainable
        weight.requires_grad = trainable
        bias.requires_grad = trainable

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int, out_dim: int,
               trainable: bool = True, std: float = 0.02) -> "LinearLayer":
        w = Tensor(trunc_normal(rng, (out_dim, in_dim), std))
        b = Tensor(np.zeros(out_dim))
        return cls(w, b, trainable)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"linear expects trailing extent {layer.in_dim}, got {x.shape}")
    lead = x.shape[:-1]
    flat = x.reshape((-1, layer.in_dim))
    y = flat @ layer.weight.transpose()
    y = y + layer.bias
    return y.reshape(lead + (layer.out_dim,))


# ---- layer norm -------------------------------------------------------------


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)

    def named_params(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.shift", self.shift


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to mean 0 / population variance 1, then affine."""
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs a trailing extent of at least 2")
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    normed = xc / (var + Tensor(eps)).sqrt()
    return normed * gain + shift


class ChannelNorm2d:
    """Layer norm over the channel axis of (N, C, H, W) maps.

    Keeps pixel-decoder feature scales bounded so downstream logit
    products cannot saturate their softmax.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"expected (N,C,H,W), got {x.shape}")
        moved = x.transpose((0, 2, 3, 1))
        normed = layer_norm(moved, self.gain, self.shift, self.eps)
        return normed.transpose((0, 3, 1, 2))

    def named_params(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.shift", self.shift


# ---- convolution -------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    def out_size(self, size: int) -> int:
        if self.transposed:
            return (size - 1) * self.stride - 2 * self.padding + self.kernel
        return (size + 2 * self.padding - self.kernel) // self.stride + 1


def _im2col(xp, k, stride, oh, ow):
    """(n,c,Hp,Wp) padded input -> (n, c*k*k, oh*ow) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow))
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(cols, n, c, hp, wp, k, stride, oh, ow):
    """Adjoint of _im2col: scatter-add patches back onto the padded grid."""
    out = np.zeros((n, c, hp, wp))
    cols = cols.reshape(n, c, k, k, oh, ow)
    for u in range(k):
        for v in range(k):
            out[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += cols[:, :, u, v]
    return out


def _conv_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, oh, ow)
    out = np.matmul(w.reshape(o, c * k * k), cols)
    return out.reshape(n, o, oh, ow)


def _conv_backward_x(g, w, x_shape, stride, pad):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    oh, ow = g.shape[2], g.shape[3]
    dcols = np.matmul(w.reshape(o, c * k * k).T, g.reshape(n, o, oh * ow))
    gxp = _col2im(dcols, n, c, h + 2 * pad, wd + 2 * pad, k, stride, oh, ow)
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad]
    return gxp


def _conv_backward_w(g, x, w_shape, stride, pad):
    o, c, k, _ = w_shape
    n = x.shape[0]
    oh, ow = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, oh, ow)
    gw = np.matmul(g.reshape(n, o, oh * ow), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(w_shape)


def conv2d(spec: ConvSpec, x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Strided cross-correlation. weight: (out, in, k, k)."""
    if spec.transposed:
        raise ShapeError("conv2d requires a non-transposed spec")
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d expects (N,{spec.in_channels},H,W), got {x.shape}")
    if weight.shape != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel):
        raise ShapeError(f"conv2d weight shape {weight.shape} does not match spec")
    out_data = _conv_forward(x.data, weight.data, spec.stride, spec.padding)

    def bw(g):
        x._accumulate(_conv_backward_x(g, weight.data, x.shape, spec.stride, spec.padding))
        weight._accumulate(_conv_backward_w(g, x.data, weight.shape, spec.stride, spec.padding))

    out = make_op(out_data, (x, weight), bw)
    if bias is not None:
        out = out + bias.reshape((1, spec.out_channels, 1, 1))
    return out


def conv_transpose2d(spec: ConvSpec, x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Adjoint of conv2d with the same weight. weight: (in, out, k, k).

    Output spatial size is (H-1)*stride - 2*padding + kernel.
    """
    if not spec.transposed:
        raise ShapeError("conv_transpose2d requires a transposed spec")
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv_transpose2d expects (N,{spec.in_channels},H,W), got {x.shape}")
    if weight.shape != (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel):
        raise ShapeError(f"conv_transpose2d weight shape {weight.shape} does not match spec")
    # forward of the transposed op == input-gradient of the matching conv
    out_h = spec.out_size(x.shape[2])
    out_w = spec.out_size(x.shape[3])
    out_shape = (x.shape[0], spec.out_channels, out_h, out_w)
    out_data = _conv_backward_x(x.data, weight.data, out_shape, spec.stride, spec.padding)

    def bw(g):
        x._accumulate(_conv_forward(g, weight.data, spec.stride, spec.padding))
        weight._accumulate(_conv_backward_w(x.data, g, weight.shape, spec.stride, spec.padding))

    out = make_op(out_data, (x, weight), bw)
    if bias is not None:
        out = out + bias.reshape((1, spec.out_channels, 1, 1))
    return out


class ConvLayer:
    """Owns the weights for one (possibly transposed) convolution."""

    def __init__(self, rng: np.random.Generator, spec: ConvSpec, std: float = 0.02):
        self.spec = spec
        if spec.transposed:
            wshape = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
        else:
            wshape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        self.weight = Tensor(trunc_normal(rng, wshape, std), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if self.spec.transposed:
            return conv_transpose2d(self.spec, x, self.weight, self.bias)
        return conv2d(self.spec, x, self.weight, self.bias)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


# ---- bilinear resize ---------------------------------------------------------


def _resize_coords(out_size: int, in_size: int):
    # sample centers at (i + 0.5) * scale - 0.5, clamped (align-corners-false)
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resampling of (N, C, H, W) maps."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects (N,C,H,W), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError("output extents must be at least 1")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        # identity; keep the tape edge so gradients still flow
        def bw_id(g):
            x._accumulate(g)

        return make_op(x.data.copy(), (x,), bw_id)

    i0, i1, fy = _resize_coords(out_h, h)
    j0, j1, fx = _resize_coords(out_w, w)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]

    d = x.data
    out_data = (
        d[:, :, i0[:, None], j0[None, :]] * (wy0 * wx0)
        + d[:, :, i0[:, None], j1[None, :]] * (wy0 * wx1)
        + d[:, :, i1[:, None], j0[None, :]] * (wy1 * wx0)
        + d[:, :, i1[:, None], j1[None, :]] * (wy1 * wx1)
    )

    def bw(g):
        gx = np.zeros_like(x.data)
        for ii, jj, wgt in (
            (i0, j0, wy0 * wx0),
            (i0, j1, wy0 * wx1),
            (i1, j0, wy1 * wx0),
            (i1, j1, wy1 * wx1),
        ):
            np.add.at(gx, (slice(None), slice(None), ii[:, None], jj[None, :]), g * wgt)
        x._accumulate(gx)

    return make_op(out_data, (x,), bw)


# ---- patch embedding -----------------------------------------------------------


class PatchEmbed:
    """Non-overlapping patch flattening, linear projection, learned 2-D positions."""

    def __init__(self, rng: np.random.Generator, image_size: int, patch: int,
                 in_channels: int, dim: int, trainable: bool = True):
        if image_size % patch != 0:
            raise ShapeError(f"image size {image_size} not divisible by patch {patch}")
        self.patch = patch
        self.in_channels = in_channels
        self.grid = image_size // patch
        self.dim = dim
        self.proj = LinearLayer.create(rng, in_channels * patch * patch, dim, trainable)
        self.pos = Tensor(trunc_normal(rng, (self.grid * self.grid, dim)), requires_grad=trainable)

    def __call__(self, image: Tensor) -> Tensor:
        return patch_embed(image, self.patch, self.proj, self.pos)

    def named_params(self, prefix: str):
        yield from self.proj.named_params(f"{prefix}.proj")
        yield f"{prefix}.pos", self.pos


def patch_embed(image: Tensor, patch: int, proj: LinearLayer, pos: Tensor) -> Tensor:
    """(N, c, H, W) -> (N, (H/p)*(W/p), dim) tokens with positions added."""
    if image.ndim != 4:
        raise ShapeError(f"patch_embed expects (N,c,H,W), got {image.shape}")
    n, c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"extents {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape((n, c, gh, patch, gw, patch))
    x = x.transpose((0, 2, 4, 1, 3, 5))  # (n, gh, gw, c, p, p)
    x = x.reshape((n, gh * gw, c * patch * patch))
    tokens = proj(x)
    return tokens + pos


class MLP:
    """Two-layer perceptron with GELU, the transformer feed-forward block."""

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int,
                 trainable: bool = True):
        self.fc1 = LinearLayer.create(rng, in_dim, hidden, trainable)
        self.fc2 = LinearLayer.create(rng, hidden, out_dim, trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())

    def named_params(self, prefix: str):
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")
