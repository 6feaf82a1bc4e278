"""Procedural flip-invariant image classification data, the corruption suite,
and continual/gradual/mixed domain-shift streams.

Images are N x 3 x 16 x 16 with pixels in [0, 1]. Every glyph mask is
mirror-symmetric about its own vertical axis and jitter only translates it,
so horizontal flipping is label-preserving by construction. Contrast and
pixelate reduce via paired 2x2 averaging, which makes those corruptions
commute with flip_h bitwise (pair sums are order-independent in IEEE).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng, Tensor

__all__ = [
    "ImageBatch",
    "CorruptionSpec",
    "StreamSpec",
    "SegmentMeta",
    "PerturbationSpec",
    "CORRUPTION_KINDS",
    "GRADUAL_WALK",
    "gen_shapegrid",
    "corrupt",
    "flip_h",
    "flip_width",
    "perturb",
    "augment_views",
    "build_stream",
    "stream_segments",
    "take_batch",
    "save_dataset",
    "load_dataset",
]

CORRUPTION_KINDS = ("gaussian", "brightness", "contrast", "blur", "pixelate")
GRADUAL_WALK = (1, 2, 3, 4, 5, 4, 3, 2, 1)

# Severity tables, index = severity - 1. Chosen so a well-trained desk model
# lands at 20-60% severity-5 error, leaving headroom to measure adaptation.
_GAUSS_STD = (0.04, 0.08, 0.12, 0.18, 0.26)
_BRIGHT_DELTA = (0.05, 0.10, 0.15, 0.20, 0.30)
_CONTRAST_FACTOR = (0.85, 0.70, 0.55, 0.40, 0.30)
_BLUR_RADIUS = (1, 1, 2, 2, 3)
_BLUR_WEIGHT = (0.4, 0.7, 0.6, 0.85, 1.0)
_PIXELATE_FACTOR = (2, 2, 4, 4, 8)


@dataclass(frozen=True)
class ImageBatch:
    x: Tensor  # N x 3 x H x W in [0, 1]
    y: np.ndarray  # N integer labels in [0, classes)
    classes: int

    def __post_init__(self):
        if self.x.ndim != 4 or self.x.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W images, got {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("one label per image required")
        if self.x.data.min() < 0.0 or self.x.data.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        if self.y.min(initial=0) < 0 or self.y.max(initial=0) >= self.classes:
            raise ValueError("labels out of range")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def subset(self, idx: np.ndarray) -> "ImageBatch":
        return ImageBatch(Tensor._wrap(self.x.data[idx].copy()), self.y[idx].copy(), self.classes)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int  # 0..5; 0 is the exact identity

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS + ("none", "mixed"):
            raise ValueError(f"unknown corruption kind: {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be 0..5, got {self.severity}")


@dataclass(frozen=True)
class StreamSpec:
    setting: str  # "continual" | "gradual" | "mixed" | "clean"
    kinds: tuple[str, ...]
    batches_per_segment: int
    batch_size: int
    seed: int

    def __post_init__(self):
        if self.setting not in ("continual", "gradual", "mixed", "clean"):
            raise ValueError(f"unknown stream setting: {self.setting!r}")
        for k in self.kinds:
            if k not in CORRUPTION_KINDS:
                raise ValueError(f"unknown corruption kind: {k!r}")
        if self.batches_per_segment < 1 or self.batch_size < 1:
            raise ValueError("batches_per_segment and batch_size must be positive")


@dataclass(frozen=True)
class SegmentMeta:
    index: int
    kind: str
    severity: int


@dataclass(frozen=True)
class PerturbationSpec:
    """Source-data perturbation used by block selection (pluggable)."""

    kind: str = "gaussian"  # "gaussian" | "brightness" | "contrast"
    mean: float = 0.0
    var: float = 0.5
    factor: float = 2.0  # multiplicative, brightness/contrast kinds only

    def __post_init__(self):
        if self.kind not in ("gaussian", "brightness", "contrast"):
            raise ValueError(f"unknown perturbation kind: {self.kind!r}")
        if self.kind == "gaussian" and self.var < 0:
            raise ValueError("gaussian variance must be non-negative")


# ---------------------------------------------------------------------------
# glyph rendering

_GLYPHS = ("disk", "cross", "hstripes", "checker", "ring", "diamond", "vbar", "xcross")


def _glyph_mask(name: str, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    adx, ady = np.abs(dx), np.abs(dy)
    if name == "disk":
        r = np.sqrt(dx * dx + dy * dy)
        return np.clip(4.4 - r, 0.0, 1.0)
    if name == "cross":
        horiz = (ady <= 1.4) & (adx <= 4.4)
        vert = (adx <= 1.4) & (ady <= 4.4)
        return (horiz | vert).astype(np.float32)
    if name == "hstripes":
        inside = (adx <= 4.4) & (ady <= 4.4)
        band = np.floor(dy + 4.4) % 3 <= 1
        return (inside & band).astype(np.float32)
    if name == "checker":
        inside = (adx <= 4.4) & (ady <= 4.4)
        cell = (np.floor(adx / 2.2) + np.floor((dy + 4.4) / 2.2)) % 2 == 0
        return (inside & cell).astype(np.float32)
    if name == "ring":
        r = np.sqrt(dx * dx + dy * dy)
        return np.clip(np.minimum(4.6 - r, r - 2.2) + 0.5, 0.0, 1.0)
    if name == "diamond":
        return np.clip(4.8 - (adx + ady), 0.0, 1.0)
    if name == "vbar":
        return ((adx <= 1.6) & (ady <= 4.6)).astype(np.float32)
    if name == "xcross":
        return ((np.abs(adx - ady) <= 1.2) & (np.maximum(adx, ady) <= 4.6)).astype(np.float32)
    raise ValueError(name)


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h = (h % 1.0) * 6.0
    i = np.floor(h)
    f = h - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = (i.astype(np.int64) % 6)[..., None]
    rgb = np.select(
        [i == 0, i == 1, i == 2, i == 3, i == 4, i == 5],
        [
            np.stack([v, t, p], -1),
            np.stack([q, v, p], -1),
            np.stack([p, v, t], -1),
            np.stack([p, q, v], -1),
            np.stack([t, p, v], -1),
            np.stack([v, p, q], -1),
        ],
    )
    return rgb


def gen_shapegrid(n: int, classes: int, rng: Rng, size: int = 16) -> ImageBatch:
    """Render n labeled glyph images, balanced round-robin over classes."""
    if not 2 <= classes <= 8:
        raise ValueError(f"classes must be in 2..8, got {classes}")
    labels = np.arange(n, dtype=np.int64) % classes
    labels = labels[rng.permutation(n)]

    center = (size - 1) / 2.0
    cx = center + rng.uniform((n,), -2.5, 2.5, dtype=np.float32)
    cy = center + rng.uniform((n,), -2.5, 2.5, dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx = xx[None] - cx[:, None, None]
    dy = yy[None] - cy[:, None, None]

    mask = np.zeros((n, size, size), dtype=np.float32)
    for c in range(classes):
        rows = labels == c
        if rows.any():
            mask[rows] = _glyph_mask(_GLYPHS[c], dx[rows], dy[rows])

    base_hue = (labels.astype(np.float32) / classes + 0.05) % 1.0
    hue = base_hue + rng.uniform((n,), -0.08, 0.08, dtype=np.float32)
    sat = np.clip(rng.normal((n,), 0.35, 0.08, dtype=np.float32), 0.1, 0.6)
    val = np.clip(rng.normal((n,), 0.72, 0.06, dtype=np.float32), 0.5, 0.9)
    glyph_rgb = _hsv_to_rgb(hue, sat, val).astype(np.float32)  # (n, 3)

    bg = np.clip(rng.normal((n,), 0.33, 0.05, dtype=np.float32), 0.2, 0.46)
    tint = rng.uniform((n, 3), -0.02, 0.02, dtype=np.float32)
    bg_rgb = bg[:, None] + tint

    m = mask[:, None, :, :]
    img = bg_rgb[:, :, None, None] * (1.0 - m) + glyph_rgb[:, :, None, None] * m
    img = img + rng.normal((n, 3, size, size), 0.0, 0.015, dtype=np.float32)
    img = np.clip(img, 0.0, 1.0)
    return ImageBatch(Tensor._wrap(img.astype(np.float32)), labels, classes)


# ---------------------------------------------------------------------------
# corruptions

def flip_width(x: Tensor) -> Tensor:
    """Reverse the width axis of an N x C x H x W tensor."""
    return Tensor._wrap(np.ascontiguousarray(x.data[..., ::-1]))


def flip_h(batch: ImageBatch) -> ImageBatch:
    return ImageBatch(flip_width(batch.x), batch.y, batch.classes)


def _halve_lastaxis(a: np.ndarray) -> np.ndarray:
    # pair sums are flip-exact: (a+b) == (b+a) in IEEE arithmetic
    return (a[..., 0::2] + a[..., 1::2]) * 0.5


def _block_mean_pow2(a: np.ndarray, factor: int) -> np.ndarray:
    steps = int(np.log2(factor))
    for _ in range(steps):
        a = _halve_lastaxis(a)
        a = _halve_lastaxis(a.swapaxes(-1, -2)).swapaxes(-1, -2)
    return a


def _image_mean_flipexact(x: np.ndarray) -> np.ndarray:
    """Per-image scalar mean via paired halving (commutes with flip_h bitwise)."""
    hw = x.shape[-1]
    reduced = _block_mean_pow2(x, hw)  # (N, C, 1, 1)
    per_channel = reduced[..., 0, 0]
    mean = (per_channel[:, 0] + per_channel[:, 1] + per_channel[:, 2]) / 3.0
    return mean[:, None, None, None]


def _box_blur(x: np.ndarray, radius: int) -> np.ndarray:
    k = 2 * radius + 1
    for axis in (2, 3):
        pad = [(0, 0)] * 4
        pad[axis] = (radius, radius)
        xp = np.pad(x, pad, mode="edge")
        c = np.cumsum(xp, axis=axis, dtype=np.float64)
        zero = np.zeros(tuple(1 if a == axis else s for a, s in enumerate(c.shape)), dtype=c.dtype)
        c = np.concatenate([zero, c], axis=axis)
        hi = np.take(c, np.arange(k, c.shape[axis]), axis=axis)
        lo = np.take(c, np.arange(0, c.shape[axis] - k), axis=axis)
        x = ((hi - lo) / k).astype(np.float32)
    return x


def corrupt(batch: ImageBatch, spec: CorruptionSpec, rng: Rng | None = None) -> ImageBatch:
    """Apply one corruption at the given severity; severity 0 is the identity."""
    if spec.severity == 0 or spec.kind == "none":
        return batch
    x = batch.x.data
    i = spec.severity - 1
    if spec.kind == "gaussian":
        if rng is None:
            raise ValueError("gaussian corruption needs an rng")
        out = x + rng.normal(x.shape, 0.0, _GAUSS_STD[i], dtype=np.float32)
    elif spec.kind == "brightness":
        out = x + np.float32(_BRIGHT_DELTA[i])
    elif spec.kind == "contrast":
        mu = _image_mean_flipexact(x)
        out = (x - mu) * np.float32(_CONTRAST_FACTOR[i]) + mu
    elif spec.kind == "blur":
        w = np.float32(_BLUR_WEIGHT[i])
        out = (1.0 - w) * x + w * _box_blur(x, _BLUR_RADIUS[i])
    elif spec.kind == "pixelate":
        f = _PIXELATE_FACTOR[i]
        small = _block_mean_pow2(x, f)
        out = np.repeat(np.repeat(small, f, axis=2), f, axis=3)
    else:
        raise ValueError(f"cannot corrupt with kind {spec.kind!r}")
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return ImageBatch(Tensor._wrap(out), batch.y, batch.classes)


def perturb(batch: ImageBatch, spec: PerturbationSpec, rng: Rng) -> ImageBatch:
    """Perturb source data for block selection (clamped to [0, 1])."""
    x = batch.x.data
    if spec.kind == "gaussian":
        out = x + rng.normal(x.shape, spec.mean, float(np.sqrt(spec.var)), dtype=np.float32)
    elif spec.kind == "brightness":
        out = x * np.float32(spec.factor)
    else:  # contrast
        mu = _image_mean_flipexact(x)
        out = (x - mu) * np.float32(spec.factor) + mu
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return ImageBatch(Tensor._wrap(out), batch.y, batch.classes)


# ---------------------------------------------------------------------------
# pseudo-label augmentation menus (reduced-scale view generators)

def _jitter_views(batch: ImageBatch, rng: Rng, noise: bool, blur: bool, color: bool) -> ImageBatch:
    x = batch.x.data
    n = x.shape[0]
    if rng.uniform(()) < 0.5:
        x = x[..., ::-1]
    if color:
        x = x + rng.uniform((n, 1, 1, 1), -0.15, 0.15, dtype=np.float32)
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        x = (x - mu) * rng.uniform((n, 1, 1, 1), 0.7, 1.3, dtype=np.float32) + mu
    if blur:
        radius = int(rng.integers(1, 3))
        w = rng.uniform((), 0.3, 0.8)
        x = (1.0 - w) * x + w * _box_blur(np.ascontiguousarray(x, dtype=np.float32), radius)
    if noise:
        std = rng.uniform((), 0.02, 0.12)
        x = x + rng.normal(x.shape, 0.0, float(std), dtype=np.float32)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    return ImageBatch(Tensor._wrap(np.ascontiguousarray(x)), batch.y, batch.classes)


def augment_views(batch: ImageBatch, menu: str, views: int, rng: Rng) -> list[ImageBatch]:
    """Teacher-view generator for the pseudo-label menu comparison.

    "paired" is the production setting: the batch and its horizontal flip.
    The other menus emit ``views`` randomized augmentations (random flip
    included, as in the augmentation-averaged baselines).
    """
    if menu == "paired":
        return [batch, flip_h(batch)]
    flags = {
        "noise_blur": dict(noise=True, blur=True, color=False),
        "color": dict(noise=False, blur=False, color=True),
        "all": dict(noise=True, blur=True, color=True),
    }
    if menu not in flags:
        raise ValueError(f"unknown pseudo-label menu: {menu!r}")
    children = rng.split(views)
    return [_jitter_views(batch, child, **flags[menu]) for child in children]


# ---------------------------------------------------------------------------
# streams

def stream_segments(spec: StreamSpec) -> list[tuple[str, int]]:
    if spec.setting == "continual":
        return [(k, 5) for k in spec.kinds]
    if spec.setting == "gradual":
        return [(k, s) for k in spec.kinds for s in GRADUAL_WALK]
    if spec.setting == "mixed":
        return [("mixed", 5)]
    return [("none", 0)]  # clean


def build_stream(spec: StreamSpec, pool: ImageBatch):
    """Yield (corrupted batch, segment metadata), deterministic per seed.

    Each segment samples without replacement from the held-out pool. The
    mixed setting emits one segment of batches_per_segment * len(kinds)
    batches whose per-sample corruption kinds are drawn uniformly.
    """
    segments = stream_segments(spec)
    per_segment = spec.batches_per_segment
    if spec.setting == "mixed":
        per_segment = spec.batches_per_segment * max(len(spec.kinds), 1)
    need = per_segment * spec.batch_size
    if need > pool.n:
        raise ValueError(
            f"pool exhausted: segment needs {need} samples, pool has {pool.n}"
        )
    root = Rng(spec.seed)
    seg_rngs = root.split(len(segments))
    for seg_index, ((kind, severity), seg_rng) in enumerate(zip(segments, seg_rngs)):
        idx = seg_rng.choice(pool.n, size=need, replace=False)
        for b in range(per_segment):
            sel = idx[b * spec.batch_size : (b + 1) * spec.batch_size]
            clean = pool.subset(sel)
            if kind == "mixed":
                batch = _corrupt_mixed(clean, spec.kinds, severity, seg_rng)
            else:
                batch = corrupt(clean, CorruptionSpec(kind, severity), seg_rng)
            yield batch, SegmentMeta(seg_index, kind, severity)


def _corrupt_mixed(clean: ImageBatch, kinds, severity: int, rng: Rng) -> ImageBatch:
    assign = rng.integers(0, len(kinds), shape=(clean.n,))
    out = np.empty_like(clean.x.data)
    for ki, kind in enumerate(kinds):
        rows = np.nonzero(assign == ki)[0]
        if rows.size == 0:
            continue
        part = corrupt(clean.subset(rows), CorruptionSpec(kind, severity), rng)
        out[rows] = part.x.data
    return ImageBatch(Tensor._wrap(out), clean.y, clean.classes)


def take_batch(batch: ImageBatch, start: int, size: int) -> ImageBatch:
    return batch.subset(np.arange(start, start + size))


def save_dataset(batch: ImageBatch, path) -> None:
    from .blob import write_blob

    meta = {"payload": "dataset", "classes": batch.classes}
    write_blob(
        path,
        meta,
        [("images", 0, batch.x.data), ("labels", 0, batch.y.astype(np.float32))],
    )


def load_dataset(path) -> ImageBatch:
    from .blob import read_blob, BlobFormatError

    meta, arrays, _ = read_blob(path)
    if meta.get("payload") != "dataset":
        raise BlobFormatError(f"not a dataset blob: payload={meta.get('payload')!r}")
    x = Tensor._wrap(np.ascontiguousarray(arrays["images"], dtype=np.float32))
    y = arrays["labels"].astype(np.int64)
    return ImageBatch(x, y, int(meta["classes"]))
