"""Image container and the stochastic augmentations that produce training views.

Every augmentation is a pure function of (image, policy, rng): feeding the
same seeded generator reproduces the same output bit for bit.  All outputs
are clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import PIL.Image
from scipy.ndimage import correlate1d

# Random-crop aspect ratio range, sampled log-uniform.
_DEFAULT_RATIO = (3.0 / 4.0, 4.0 / 3.0)
_CROP_ATTEMPTS = 10

_LUMA = (0.299, 0.587, 0.114)


class Image:
    """RGB image stored channels-first as float32 in [0, 1].

    The buffer is (3, H, W) and treated as immutable: augmentations return
    new images and never write through ``data``.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) pixel data, got shape {arr.shape}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError("image must have at least one pixel")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        lo = float(arr.min())
        hi = float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")
        self.data = np.ascontiguousarray(arr)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __repr__(self) -> str:
        return f"Image({self.height}x{self.width})"

    @classmethod
    def from_hwc(cls, arr) -> "Image":
        """Build from an (H, W, 3) array; uint8 input is scaled by 1/255."""
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) data, got shape {arr.shape}")
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        return cls(arr.transpose(2, 0, 1))

    def to_u8(self) -> np.ndarray:
        """Quantize to an (H, W, 3) uint8 array."""
        scaled = np.rint(np.clip(self.data, 0.0, 1.0) * 255.0)
        return scaled.astype(np.uint8).transpose(1, 2, 0)


@dataclass(frozen=True)
class AugmentPolicy:
    """Strengths and probabilities for the view-generation pipeline.

    Defaults follow the SimCLR recipe: crop scale [0.2, 1], flip 0.5,
    color jitter (0.8, 0.8, 0.8, 0.2) applied with probability 0.8,
    grayscale 0.2, blur 0.5 with sigma in [0.1, 2].
    """

    out_size: tuple = (64, 64)
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = _DEFAULT_RATIO
    flip_prob: float = 0.5
    jitter_strengths: tuple = (0.8, 0.8, 0.8, 0.2)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)

    def __post_init__(self):
        for name in ("flip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        lo, hi = self.crop_ratio
        if not (0.0 < lo <= hi):
            raise ValueError(f"crop_ratio must be positive and ordered, got {self.crop_ratio}")
        lo, hi = self.blur_sigma
        if not (0.0 < lo <= hi):
            raise ValueError(f"blur_sigma must be positive and ordered, got {self.blur_sigma}")
        if len(self.jitter_strengths) != 4:
            raise ValueError("jitter_strengths is (brightness, contrast, saturation, hue)")
        if not 0.0 <= self.jitter_strengths[3] <= 0.5:
            raise ValueError("hue strength must be in [0, 0.5]")
        oh, ow = self.out_size
        if oh < 1 or ow < 1:
            raise ValueError(f"out_size must be positive, got {self.out_size}")


# ---------------------------------------------------------------------------
# resize and crop


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    """Bilinear resample with half-pixel centers and edge clamping."""
    arr = img.data
    h, w = arr.shape[1], arr.shape[2]
    if (h, w) == (out_h, out_w):
        return Image(arr.copy())
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0).astype(np.float32)[None, :, None]
    wx = (xs - x0).astype(np.float32)[None, None, :]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    rows0 = arr[:, y0c, :]
    rows1 = arr[:, y1c, :]
    top = rows0[:, :, x0c] * (1.0 - wx) + rows0[:, :, x1c] * wx
    bot = rows1[:, :, x0c] * (1.0 - wx) + rows1[:, :, x1c] * wx
    out = top * (1.0 - wy) + bot * wy
    return Image(np.clip(out, 0.0, 1.0))


def _crop_geometry(h: int, w: int, policy: AugmentPolicy, rng) -> tuple:
    """Sample (top, left, crop_h, crop_w) with retry-then-center fallback."""
    area = float(h * w)
    log_lo, log_hi = np.log(policy.crop_ratio[0]), np.log(policy.crop_ratio[1])
    for _ in range(_CROP_ATTEMPTS):
        target = area * rng.uniform(policy.crop_scale[0], policy.crop_scale[1])
        ratio = float(np.exp(rng.uniform(log_lo, log_hi)))
        cw = int(round(np.sqrt(target * ratio)))
        ch = int(round(np.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fall back to the largest centered crop with admissible aspect
    in_ratio = w / h
    if in_ratio < policy.crop_ratio[0]:
        cw = w
        ch = max(1, int(round(w / policy.crop_ratio[0])))
    elif in_ratio > policy.crop_ratio[1]:
        ch = h
        cw = max(1, int(round(h * policy.crop_ratio[1])))
    else:
        ch, cw = h, w
    top = (h - ch) // 2
    left = (w - cw) // 2
    return top, left, ch, cw


def random_resized_crop(img: Image, policy: AugmentPolicy, rng) -> Image:
    """Crop a random area in the policy scale range and resize to out_size."""
    if img.height < 2 or img.width < 2:
        raise ValueError(f"source too small to crop: {img.height}x{img.width}")
    top, left, ch, cw = _crop_geometry(img.height, img.width, policy, rng)
    patch = Image(img.data[:, top : top + ch, left : left + cw])
    return resize_bilinear(patch, policy.out_size[0], policy.out_size[1])


# ---------------------------------------------------------------------------
# point-wise color operations


def horizontal_flip(img: Image, p: float, rng) -> Image:
    if rng.random() < p:
        return Image(img.data[:, :, ::-1].copy())
    return img


def _luma(arr: np.ndarray) -> np.ndarray:
    return _LUMA[0] * arr[0] + _LUMA[1] * arr[1] + _LUMA[2] * arr[2]


def adjust_brightness(img: Image, factor: float) -> Image:
    return Image(np.clip(img.data * np.float32(factor), 0.0, 1.0))


def adjust_contrast(img: Image, factor: float) -> Image:
    mean = np.float32(_luma(img.data).mean())
    f = np.float32(factor)
    return Image(np.clip(img.data * f + mean * (1.0 - f), 0.0, 1.0))


def adjust_saturation(img: Image, factor: float) -> Image:
    gray = _luma(img.data)[None, :, :]
    f = np.float32(factor)
    return Image(np.clip(img.data * f + gray * (1.0 - f), 0.0, 1.0))


def _rgb_to_hsv(arr: np.ndarray) -> tuple:
    r, g, b = arr[0], arr[1], arr[2]
    maxc = arr.max(axis=0)
    minc = arr.min(axis=0)
    v = maxc
    delta = maxc - minc
    safe = np.where(delta > 0.0, delta, 1.0)
    s = np.where(maxc > 0.0, delta / np.where(maxc > 0.0, maxc, 1.0), 0.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0.0, (h / 6.0) % 1.0, 0.0)
    return h, s, v


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def adjust_hue(img: Image, shift: float) -> Image:
    """Rotate hue by ``shift`` (in turns, |shift| <= 0.5)."""
    if not -0.5 <= shift <= 0.5:
        raise ValueError(f"hue shift must be in [-0.5, 0.5], got {shift}")
    h, s, v = _rgb_to_hsv(img.data.astype(np.float64))
    h = (h + shift) % 1.0
    out = _hsv_to_rgb(h, s, v)
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32))


def color_distort(img: Image, policy: AugmentPolicy, rng) -> Image:
    """Brightness/contrast/saturation/hue jitter in random order.

    The whole block is applied with probability ``jitter_prob``; sub-ops
    with zero strength are skipped and consume no random draws.
    """
    if rng.random() >= policy.jitter_prob:
        return img
    b, c, s, h = policy.jitter_strengths
    out = img
    for op in rng.permutation(4):
        if op == 0 and b > 0.0:
            out = adjust_brightness(out, rng.uniform(max(0.0, 1.0 - b), 1.0 + b))
        elif op == 1 and c > 0.0:
            out = adjust_contrast(out, rng.uniform(max(0.0, 1.0 - c), 1.0 + c))
        elif op == 2 and s > 0.0:
            out = adjust_saturation(out, rng.uniform(max(0.0, 1.0 - s), 1.0 + s))
        elif op == 3 and h > 0.0:
            out = adjust_hue(out, rng.uniform(-h, h))
    return out


def to_grayscale(img: Image, p: float, rng) -> Image:
    """With probability p, replace all channels by BT.601 luma."""
    if rng.random() < p:
        gray = _luma(img.data).astype(np.float32)
        return Image(np.broadcast_to(gray, (3,) + gray.shape).copy())
    return img


# ---------------------------------------------------------------------------
# blur


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(3 sigma)."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = int(np.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(img: Image, sigma, rng=None) -> Image:
    """Separable Gaussian blur with reflect padding.

    ``sigma`` is either a scalar or a (lo, hi) range sampled uniformly
    with ``rng``.
    """
    if isinstance(sigma, (tuple, list)):
        if rng is None:
            raise ValueError("sigma range requires an rng to sample from")
        sigma = float(rng.uniform(sigma[0], sigma[1]))
    k = gaussian_kernel(float(sigma))
    # scipy's "mirror" mode reflects about the edge sample, matching
    # np.pad(mode="reflect")
    out = correlate1d(img.data, k, axis=1, mode="mirror")
    out = correlate1d(out, k, axis=2, mode="mirror")
    return Image(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# the full view pipeline


def augment(img: Image, policy: AugmentPolicy, rng) -> Image:
    """One draw of the chain crop -> flip -> color -> grayscale -> blur."""
    out = random_resized_crop(img, policy, rng)
    out = horizontal_flip(out, policy.flip_prob, rng)
    out = color_distort(out, policy, rng)
    out = to_grayscale(out, policy.grayscale_prob, rng)
    if rng.random() < policy.blur_prob:
        out = gaussian_blur(out, policy.blur_sigma, rng)
    return out


def make_views(img: Image, policy: AugmentPolicy, rng) -> tuple:
    """Two independent augmented views of one source image."""
    return augment(img, policy, rng), augment(img, policy, rng)


# ---------------------------------------------------------------------------
# file I/O


def read_image(path) -> Image:
    """Load a PNG or binary PPM file as an RGB image."""
    with PIL.Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return Image(arr.transpose(2, 0, 1))


def write_png(img: Image, path) -> None:
    PIL.Image.fromarray(img.to_u8(), mode="RGB").save(path, format="PNG")
