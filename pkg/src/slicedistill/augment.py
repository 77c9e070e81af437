"""Seed-deterministic augmentations: multi-crop views for
self-distillation plus the lighter joint image/mask pipeline used when
fine-tuning.

Every function is a pure function of (input, parameters, rng state).
"Color jitter" is reinterpreted as per-channel affine intensity jitter:
the channels are MRI contrasts, not RGB, so hue has no meaning here.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from ._interp import resize_bilinear_array
from .errors import SliceTooSmall
from .slices import SliceSample


@dataclass(frozen=True)
class CropConfig:
    n_global: int = 2
    n_local: int = 8
    global_side: int = 96
    local_side: int = 64
    global_scale_range: tuple[float, float] = (0.4, 1.0)
    local_scale_range: tuple[float, float] = (0.05, 0.4)
    flip_prob: float = 0.5
    jitter_strength: float = 1.0
    jitter_prob: float = 0.8
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    blur_prob_other: float = 0.1

    def __post_init__(self):
        if not (0 < self.local_side < self.global_side):
            raise ValueError(f"need local_side < global_side, got {self.local_side}/{self.global_side}")
        for lo, hi in (self.global_scale_range, self.local_scale_range):
            if not (0 < lo <= hi <= 1):
                raise ValueError("scale ranges must lie in (0, 1]")


@dataclass
class AugSample:
    """Multi-crop views of one slice, globals listed first."""
    views: list[np.ndarray]
    rng_seed: int
    n_global: int = 2


def derive_seed(base_seed: int, *parts) -> int:
    """Stable per-sample seed from the base seed plus identifying parts
    (step, subject id, slice index, ...); strings hash via crc32."""
    acc = int(base_seed) & 0xFFFFFFFF
    for p in parts:
        v = zlib.crc32(p.encode()) if isinstance(p, str) else int(p) & 0xFFFFFFFF
        acc = zlib.crc32(v.to_bytes(8, "little", signed=False), acc)
    return acc


def random_resized_crop(pixels: np.ndarray, side: int,
                        scale_range: tuple[float, float],
                        rng: np.random.Generator,
                        aspect_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0),
                        ) -> np.ndarray:
    """Random area/aspect crop, bilinearly resized to side x side.

    Up to 10 attempts to fit the sampled rectangle; afterwards falls
    back to the largest centered square (the degenerate-crop path).
    """
    h, w = pixels.shape[:2]
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(scale_range[0], scale_range[1])
        aspect = np.exp(rng.uniform(np.log(aspect_range[0]), np.log(aspect_range[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = pixels[top:top + ch, left:left + cw]
            return resize_bilinear_array(crop, side, side)
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return resize_bilinear_array(pixels[top:top + s, left:left + s], side, side)


def intensity_jitter(view: np.ndarray, strength: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Per-channel affine x -> a*x + b with a in [1 -/+ 0.4s] and b in
    [-/+ 0.2s] of the channel's value range."""
    if strength == 0:
        return view.copy()
    out = np.empty_like(view)
    for c in range(view.shape[2]):
        a = rng.uniform(1.0 - 0.4 * strength, 1.0 + 0.4 * strength)
        chan_range = float(view[:, :, c].max() - view[:, :, c].min())
        b = rng.uniform(-0.2 * strength, 0.2 * strength) * chan_range
        out[:, :, c] = view[:, :, c] * np.float32(a) + np.float32(b)
    return out


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(view: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, kernel radius ceil(3*sigma). Borders use
    edge-repeating reflection, which keeps total intensity exact."""
    if sigma < 0:
        raise ValueError(f"sigma {sigma}")
    if sigma == 0:
        return view.copy()
    k = _gauss_kernel(sigma)
    r = (len(k) - 1) // 2
    squeeze = view.ndim == 2
    x = view[:, :, None].astype(np.float32) if squeeze else view.astype(np.float32)

    pad = np.pad(x, ((r, r), (0, 0), (0, 0)), mode="symmetric")
    x = sum(k[i] * pad[i:i + x.shape[0]] for i in range(len(k)))
    pad = np.pad(x, ((0, 0), (r, r), (0, 0)), mode="symmetric")
    x = sum(k[i] * pad[:, i:i + view.shape[1]] for i in range(len(k)))
    x = x.astype(np.float32)
    return x[:, :, 0] if squeeze else x


def gaussian_noise(view: np.ndarray, sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Additive i.i.d. zero-mean Gaussian noise."""
    if sigma < 0:
        raise ValueError(f"sigma {sigma}")
    if sigma == 0:
        return view.copy()
    return (view + rng.normal(0.0, sigma, view.shape)).astype(np.float32)


def make_multicrop(sample: SliceSample, cfg: CropConfig,
                   rng: np.random.Generator) -> AugSample:
    """n_global + n_local augmented views of one slice.

    Per view: random resized crop, horizontal flip (p=0.5), intensity
    jitter (p=0.8), then Gaussian blur with p=1.0 for the first global
    view and p=0.1 for every other view.
    """
    h, w = sample.pixels.shape[:2]
    if min(h, w) < cfg.global_side:
        raise SliceTooSmall(f"slice {h}x{w} smaller than global side {cfg.global_side}")
    seed = int(rng.integers(0, 2 ** 31 - 1))
    views = []
    total = cfg.n_global + cfg.n_local
    for v in range(total):
        is_global = v < cfg.n_global
        side = cfg.global_side if is_global else cfg.local_side
        scale = cfg.global_scale_range if is_global else cfg.local_scale_range
        view = random_resized_crop(sample.pixels, side, scale, rng)
        if rng.uniform() < cfg.flip_prob:
            view = view[:, ::-1].copy()
        if rng.uniform() < cfg.jitter_prob:
            view = intensity_jitter(view, cfg.jitter_strength, rng)
        blur_p = 1.0 if v == 0 else cfg.blur_prob_other
        if rng.uniform() < blur_p:
            view = gaussian_blur(view, rng.uniform(*cfg.blur_sigma_range))
        views.append(view)
    return AugSample(views=views, rng_seed=seed, n_global=cfg.n_global)


# ---------------------------------------------------------------------------
# downstream fine-tuning pipeline (joint image/mask geometry)

@dataclass(frozen=True)
class DownstreamAugConfig:
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    max_rotate_deg: float = 10.0
    zoom_prob: float = 0.5
    zoom_range: tuple[float, float] = (0.9, 1.1)
    jitter_prob: float = 0.5
    jitter_strength: float = 0.5
    shift_prob: float = 0.5
    max_shift: float = 0.1
    noise_prob: float = 0.5
    noise_sigma: float = 0.02


def _rotate_zoom(img: np.ndarray, angle_deg: float, zoom: float,
                 nearest: bool) -> np.ndarray:
    """Rotate about the center and zoom via inverse mapping; bilinear for
    images, nearest for masks, edge clamp outside."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = (yy - cy) / zoom, (xx - cx) / zoom
    src_y = cos_t * dy - sin_t * dx + cy
    src_x = sin_t * dy + cos_t * dx + cx
    if nearest:
        iy = np.clip(np.rint(src_y).astype(np.int64), 0, h - 1)
        ix = np.clip(np.rint(src_x).astype(np.int64), 0, w - 1)
        return img[iy, ix]
    y0 = np.clip(np.floor(src_y).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(src_x).astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(src_y - y0, 0.0, 1.0)[..., None]
    fx = np.clip(src_x - x0, 0.0, 1.0)[..., None]
    im = img if img.ndim == 3 else img[:, :, None]
    top = im[y0, x0] * (1 - fx) + im[y0, x1] * fx
    bot = im[y1, x0] * (1 - fx) + im[y1, x1] * fx
    out = (top * (1 - fy) + bot * fy).astype(np.float32)
    return out if img.ndim == 3 else out[:, :, 0]


def downstream_augment(sample: SliceSample, cfg: DownstreamAugConfig,
                       rng: np.random.Generator) -> SliceSample:
    """Flip / small rotation / zoom applied identically to image and
    mask (mask nearest-neighbor), plus intensity-only jitter, shift,
    and noise on the image."""
    pixels = sample.pixels
    seg = sample.seg_slice
    if rng.uniform() < cfg.flip_prob:
        pixels = pixels[:, ::-1].copy()
        seg = seg[:, ::-1].copy() if seg is not None else None
    angle = rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg) \
        if rng.uniform() < cfg.rotate_prob else 0.0
    zoom = rng.uniform(*cfg.zoom_range) if rng.uniform() < cfg.zoom_prob else 1.0
    if angle != 0.0 or zoom != 1.0:
        pixels = _rotate_zoom(pixels, angle, zoom, nearest=False)
        if seg is not None:
            seg = _rotate_zoom(seg, angle, zoom, nearest=True)
    if rng.uniform() < cfg.jitter_prob:
        pixels = intensity_jitter(pixels, cfg.jitter_strength, rng)
    if rng.uniform() < cfg.shift_prob:
        span = float(pixels.max() - pixels.min())
        pixels = pixels + np.float32(rng.uniform(-cfg.max_shift, cfg.max_shift) * span)
    if rng.uniform() < cfg.noise_prob:
        pixels = gaussian_noise(pixels, cfg.noise_sigma, rng)
    out = SliceSample(pixels=pixels.astype(np.float32), subject_id=sample.subject_id,
                      slice_index=sample.slice_index, label=sample.label, seg_slice=seg)
    return out
