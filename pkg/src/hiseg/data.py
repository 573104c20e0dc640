"""Synthetic long-tailed multi-class segmentation data.

Each sample is a grayscale image with up to C-1 textured elliptical
regions on a noisy background; class k appears with probability
0.9 * tail_ratio^(k-1), which makes later classes progressively rarer and
exercises the class-balancing machinery. Generation, augmentation and the
noise table derive everything from explicit seeds (PCG64 via numpy's
SeedSequence, so "same seed, same bits" holds across runs).

The on-disk container is little-endian: magic ``HSD1``, version u32,
header length u32, a utf-8 key=value header, then per sample the image as
H*W float32 and the mask as H*W u8.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .attention import ClassNoiseTable
from .errors import FormatError, UsageError

MAGIC = b"HSD1"
VERSION = 1

# seed-stream tags, so independent purposes never share a stream
_TAG_SAMPLE = 0
_TAG_AUGMENT = 1


@dataclass
class ImageSample:
    image: np.ndarray  # (1, H, W) float64 in [0, 1]
    mask: np.ndarray   # (H, W) integer labels in [0, C)

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise UsageError(f"image {self.image.shape} and mask {self.mask.shape} disagree")


@dataclass
class DatasetManifest:
    n: int
    height: int
    width: int
    num_classes: int
    seed: int
    split: str
    class_pixel_counts: np.ndarray

    def check(self) -> None:
        total = int(self.class_pixel_counts.sum())
        expect = self.n * self.height * self.width
        if total != expect:
            raise UsageError(f"pixel counts sum to {total}, expected {expect}")


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list[ImageSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def images_array(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def masks_array(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])


# ---- generation -----------------------------------------------------------------


def _blob_mask(h: int, w: int, cy, cx, ry, rx, angle, lobes, wobble, phase) -> np.ndarray:
    """Rotated ellipse whose radius is modulated around the boundary.

    The angular wobble puts structure on the boundary at a scale a
    quarter-resolution decoder cannot represent, so fine detail matters.
    """
    yy, xx = np.mgrid[0:h, 0:w]
    y = yy - cy
    x = xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (x * ca + y * sa) / rx
    v = (-x * sa + y * ca) / ry
    r = np.sqrt(u * u + v * v)
    theta = np.arctan2(v, u)
    return r <= 1.0 + wobble * np.sin(lobes * theta + phase)


def _generate_sample(rng: np.random.Generator, h: int, w: int, c: int,
                     tail_ratio: float) -> ImageSample:
    image = rng.uniform(0.05, 0.25) + rng.normal(0.0, 0.03, (h, w))
    mask = np.zeros((h, w), dtype=np.uint8)
    for k in range(1, c):
        appear = 0.9 * tail_ratio ** (k - 1)
        if rng.uniform() >= appear:
            continue
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        ry = rng.uniform(0.10 * h, 0.20 * h)
        rx = rng.uniform(0.10 * w, 0.20 * w)
        angle = rng.uniform(0.0, np.pi)
        lobes = int(rng.integers(5, 9))
        wobble = rng.uniform(0.15, 0.3)
        phase = rng.uniform(0.0, 2 * np.pi)
        region = _blob_mask(h, w, cy, cx, ry, rx, angle, lobes, wobble, phase)
        # distinct intensity band per class, clear of the <=0.3 background
        base = 0.45 + 0.5 * (k - 1) / max(c - 2, 1)
        fy, fx = rng.uniform(1.0, 3.0, 2)
        phase = rng.uniform(0.0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        texture = 0.04 * np.sin(2 * np.pi * (fy * yy + fx * xx) / h + phase)
        image = np.where(region, base + texture + rng.normal(0.0, 0.015, (h, w)), image)
        mask[region] = k
    # quantize to f32 so the container round-trip is bit-exact both ways
    image = np.clip(image, 0.0, 1.0).astype("<f4").astype(np.float64)
    return ImageSample(image=image[None], mask=mask)


def generate(seed: int, n: int, height: int, width: int, num_classes: int,
             tail_ratio: float, split: str = "train") -> Dataset:
    """Deterministically generate n samples; per-sample streams are derived
    from (seed, sample index) so workers could produce them independently."""
    if height < 8 or width < 8:
        raise UsageError("extents must be at least 8")
    if num_classes < 2:
        raise UsageError("need at least background plus one class")
    if not 0.0 < tail_ratio <= 1.0:
        raise UsageError("tail_ratio must lie in (0, 1]")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, _TAG_SAMPLE, i])
        samples.append(_generate_sample(rng, height, width, num_classes, tail_ratio))
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.mask.reshape(-1), minlength=num_classes)
    manifest = DatasetManifest(n=n, height=height, width=width, num_classes=num_classes,
                               seed=seed, split=split, class_pixel_counts=counts)
    manifest.check()
    return Dataset(manifest=manifest, samples=samples)


def class_frequencies(dataset: Dataset, sigma0: float = 0.05,
                      var_max: float = 1.0) -> tuple[np.ndarray, ClassNoiseTable]:
    """Recount pixel frequencies and derive the per-class noise table."""
    if not dataset.samples:
        raise UsageError("dataset is empty")
    c = dataset.manifest.num_classes
    counts = np.zeros(c, dtype=np.int64)
    for s in dataset.samples:
        counts += np.bincount(s.mask.reshape(-1), minlength=c)
    table = ClassNoiseTable.from_frequencies(counts, sigma0=sigma0, var_max=var_max)
    return counts, table


# ---- augmentation -----------------------------------------------------------------


@dataclass
class AugmentConfig:
    rotation_degrees: tuple[float, float] = (-20.0, 20.0)
    scale_range: tuple[float, float] = (0.9, 1.1)
    elastic_magnitude: float = 1.5
    elastic_radius: float = 8.0

    @property
    def is_identity(self) -> bool:
        return (self.rotation_degrees == (0.0, 0.0)
                and self.scale_range == (1.0, 1.0)
                and self.elastic_magnitude == 0.0)


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    return (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
            + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx)


def _nearest_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    yi = np.clip(np.rint(ys).astype(int), 0, h - 1)
    xi = np.clip(np.rint(xs).astype(int), 0, w - 1)
    return img[yi, xi]


def augment(sample: ImageSample, seed, cfg: AugmentConfig) -> ImageSample:
    """Rotation + scaling + elastic deformation.

    The image is resampled bilinearly, the mask by nearest neighbor, via a
    shared inverse coordinate map, so labels stay integral and aligned.
    """
    if cfg.is_identity:
        return ImageSample(image=sample.image.copy(), mask=sample.mask.copy())
    rng = np.random.default_rng(seed if not isinstance(seed, int) else [seed, _TAG_AUGMENT])
    h, w = sample.mask.shape
    theta = np.deg2rad(rng.uniform(*cfg.rotation_degrees))
    s = rng.uniform(*cfg.scale_range)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # inverse map: rotate by -theta, scale by 1/s about the grid center
    yr = (yy - cy)
    xr = (xx - cx)
    ca, sa = np.cos(theta), np.sin(theta)
    src_y = (ca * yr + sa * xr) / s + cy
    src_x = (-sa * yr + ca * xr) / s + cx

    if cfg.elastic_magnitude > 0:
        dy = gaussian_filter(rng.normal(0.0, cfg.elastic_magnitude, (h, w)), cfg.elastic_radius)
        dx = gaussian_filter(rng.normal(0.0, cfg.elastic_magnitude, (h, w)), cfg.elastic_radius)
        src_y = src_y + dy
        src_x = src_x + dx

    image = _bilinear_sample(sample.image[0], src_y, src_x)[None]
    mask = _nearest_sample(sample.mask, src_y, src_x)
    return ImageSample(image=image, mask=mask.astype(sample.mask.dtype))


# ---- container IO -----------------------------------------------------------------


def _header_text(manifest: DatasetManifest) -> bytes:
    lines = [
        f"n={manifest.n}",
        f"H={manifest.height}",
        f"W={manifest.width}",
        f"C={manifest.num_classes}",
        f"seed={manifest.seed}",
        f"split={manifest.split}",
        "freq=" + ",".join(str(int(x)) for x in manifest.class_pixel_counts),
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_dataset(dataset: Dataset, path) -> None:
    header = _header_text(dataset.manifest)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint32(len(header)).tobytes())
        fh.write(header)
        for s in dataset.samples:
            fh.write(s.image.astype("<f4").tobytes())
            fh.write(s.mask.astype(np.uint8).tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(raw) < 12:
        raise FormatError("truncated fixed header", offset=len(raw))
    version = int(np.frombuffer(raw, "<u4", 1, 4)[0])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    header_len = int(np.frombuffer(raw, "<u4", 1, 8)[0])
    if len(raw) < 12 + header_len:
        raise FormatError("truncated header block", offset=12)
    fields = {}
    for line in raw[12 : 12 + header_len].decode("utf-8").strip().splitlines():
        key, _, value = line.partition("=")
        fields[key] = value
    try:
        n = int(fields["n"])
        h = int(fields["H"])
        w = int(fields["W"])
        c = int(fields["C"])
        seed = int(fields["seed"])
        split = fields["split"]
        counts = np.array([int(x) for x in fields["freq"].split(",")], dtype=np.int64)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed header field: {exc}", offset=12)
    manifest = DatasetManifest(n=n, height=h, width=w, num_classes=c, seed=seed,
                               split=split, class_pixel_counts=counts)

    offset = 12 + header_len
    img_bytes = h * w * 4
    msk_bytes = h * w
    expect = offset + n * (img_bytes + msk_bytes)
    if len(raw) != expect:
        raise FormatError(
            f"header field n={n} implies {expect} bytes, file has {len(raw)}", offset=offset)
    samples = []
    for _ in range(n):
        img = np.frombuffer(raw, "<f4", h * w, offset).reshape(1, h, w).astype(np.float64)
        offset += img_bytes
        msk = np.frombuffer(raw, np.uint8, h * w, offset).reshape(h, w).copy()
        offset += msk_bytes
        samples.append(ImageSample(image=img, mask=msk))
    return Dataset(manifest=manifest, samples=samples)
