"""Block-specific view generation and allocation across the ensemble.

Image pipeline: random area crop (bilinear resize back), horizontal flip,
then color jitter or grayscale at fixed odds.  Vector pipeline (the desk
stand-in for non-image data): additive Gaussian noise plus coordinate
masking.  One source batch yields 2M augmented copies; a seeded permutation
pairs them off, one pair per block, unless shared_views feeds every pair to
every block.

Each copy draws from its own RNG stream, so block j's views never depend on
block i's seed, and the streams are keyed by (seed, epoch, step) counters
rather than by call order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AugmentationSpec",
    "ViewAllocation",
    "augment_image",
    "augment_vector",
    "augment_batch",
    "generate_and_allocate",
]


@dataclass
class AugmentationSpec:
    """Distortion distribution for view generation."""

    crop_scale: tuple[float, float] = (0.2, 1.0)
    aspect_ratio: tuple[float, float] = (0.75, 4.0 / 3.0)
    flip_prob: float = 0.5
    jitter_params: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_vs_gray_odds: tuple[int, int] = (8, 1)  # (0, 0) disables the color stage
    noise_sigma: float = 0.1  # vector mode
    mask_prob: float = 0.0  # vector mode
    seed: int = 0

    def validate(self) -> None:
        for name, (lo, hi) in (("crop_scale", self.crop_scale), ("aspect_ratio", self.aspect_ratio)):
            if not (0 < lo <= hi):
                raise ValueError(f"{name} range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        if min(self.jitter_vs_gray_odds) < 0:
            raise ValueError("jitter odds must be non-negative")


@dataclass
class ViewAllocation:
    """2M augmented batches and their pairing onto blocks for one step."""

    num_blocks: int
    batches: list[np.ndarray]
    pairs: list[tuple[int, int]]  # pair k = the two batch ids owned by block k
    permutation: list[int]
    shared_views: bool = False

    def views_for_block(self, block_id: int) -> list[tuple[np.ndarray, np.ndarray]]:
        if not 0 <= block_id < self.num_blocks:
            raise IndexError(f"block id {block_id} out of range for M={self.num_blocks}")
        pair_ids = self.pairs if self.shared_views else [self.pairs[block_id]]
        return [(self.batches[a], self.batches[b]) for a, b in pair_ids]


# ---------------------------------------------------------------------------
# Image augmentation
# ---------------------------------------------------------------------------


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize with clamp-to-edge sampling."""
    c, in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0.0, in_h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, in_w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    spread = maxc - minc
    s = np.where(maxc > 0, spread / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(spread > 0, spread, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(spread > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[0], img[1], img[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _grayscale(img: np.ndarray) -> np.ndarray:
    if img.shape[0] != 3:
        return img.copy()
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.stack([lum, lum, lum])


def _color_jitter(img: np.ndarray, params, rng: np.random.Generator) -> np.ndarray:
    # Fixed application order for determinism: brightness, contrast,
    # saturation (multiplicative factors), then hue shift in HSV.
    b_str, c_str, s_str, h_str = params
    out = img * rng.uniform(1.0 - b_str, 1.0 + b_str)
    mean = out.mean()
    out = (out - mean) * rng.uniform(1.0 - c_str, 1.0 + c_str) + mean
    if img.shape[0] == 3:
        gray = _grayscale(out)
        out = gray + (out - gray) * rng.uniform(1.0 - s_str, 1.0 + s_str)
        hsv = _rgb_to_hsv(np.clip(out, 0.0, None))
        hsv[0] = (hsv[0] + rng.uniform(-h_str, h_str)) % 1.0
        out = _hsv_to_rgb(hsv)
    else:
        rng.uniform(1.0 - s_str, 1.0 + s_str)  # keep the draw order fixed
        rng.uniform(-h_str, h_str)
    return out


def _sample_crop(h: int, w: int, spec: AugmentationSpec, rng: np.random.Generator):
    for _ in range(10):
        scale = rng.uniform(*spec.crop_scale)
        ratio = rng.uniform(*spec.aspect_ratio)
        area = scale * h * w
        cw = int(round(np.sqrt(area * ratio)))
        ch = int(round(np.sqrt(area / ratio)))
        if 1 <= ch <= h and 1 <= cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)  # center-crop fallback
    return (h - side) // 2, (w - side) // 2, side, side


def augment_image(img: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """One distorted view of a [C x H x W] image, clamped to the input range."""
    spec.validate()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[1] < 4 or img.shape[2] < 4:
        raise ValueError(f"augment_image: expects [C x H x W] with H, W >= 4, got {img.shape}")
    _, h, w = img.shape
    lo, hi = float(img.min()), float(img.max())

    top, left, ch, cw = _sample_crop(h, w, spec, rng)
    out = _bilinear_resize(img[:, top : top + ch, left : left + cw], h, w)
    if rng.random() < spec.flip_prob:
        out = out[:, :, ::-1]
    jitter_odds, gray_odds = spec.jitter_vs_gray_odds
    if jitter_odds + gray_odds > 0:
        if rng.random() < jitter_odds / (jitter_odds + gray_odds):
            out = _color_jitter(out, spec.jitter_params, rng)
        else:
            out = _grayscale(out)
    return np.clip(out, lo, hi)


# ---------------------------------------------------------------------------
# Vector augmentation
# ---------------------------------------------------------------------------


def augment_vector(x: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise plus independent coordinate masking."""
    spec.validate()
    x = np.asarray(x, dtype=np.float64)
    out = x + rng.normal(0.0, spec.noise_sigma, size=x.shape) if spec.noise_sigma > 0 else x.copy()
    if spec.mask_prob > 0:
        out = out * (rng.random(size=x.shape) >= spec.mask_prob)
    return out


def augment_batch(batch: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Augment a whole batch: [N x dim] vectors or [N x C x H x W] images."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        return augment_vector(batch, spec, rng)
    if batch.ndim == 4:
        return np.stack([augment_image(img, spec, rng) for img in batch])
    raise ValueError(f"augment_batch: expects [N x dim] or [N x C x H x W], got {batch.shape}")


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------


def generate_and_allocate(
    batch: np.ndarray,
    num_blocks: int,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    pair_rngs: list[tuple[np.random.Generator, np.random.Generator]] | None = None,
    shared_views: bool = False,
) -> ViewAllocation:
    """Produce 2M augmented copies and pair them onto blocks.

    ``rng`` drives the allocation permutation.  ``pair_rngs`` supplies one
    RNG pair per block for the copies that block will own; when omitted,
    streams are spawned from ``rng``.  Copy generation is keyed to the
    owning pair, so views for block i are independent of block j's stream.
    """
    if num_blocks < 1:
        raise ValueError(f"num_blocks must be >= 1, got {num_blocks}")
    if pair_rngs is None:
        children = rng.spawn(2 * num_blocks)
        pair_rngs = [(children[2 * k], children[2 * k + 1]) for k in range(num_blocks)]
    if len(pair_rngs) != num_blocks:
        raise ValueError(f"expected {num_blocks} rng pairs, got {len(pair_rngs)}")
    perm = [int(i) for i in rng.permutation(2 * num_blocks)]
    batches: list[np.ndarray | None] = [None] * (2 * num_blocks)
    pairs: list[tuple[int, int]] = []
    for k in range(num_blocks):
        rng_a, rng_b = pair_rngs[k]
        ida, idb = perm[2 * k], perm[2 * k + 1]
        batches[ida] = augment_batch(batch, spec, rng_a)
        batches[idb] = augment_batch(batch, spec, rng_b)
        pairs.append((ida, idb))
    return ViewAllocation(
        num_blocks=num_blocks,
        batches=batches,  # type: ignore[arg-type]
        pairs=pairs,
        permutation=perm,
        shared_views=shared_views,
    )
