"""Image containers, color conversion, bicubic resampling, and fidelity metrics.

All operations are pure functions over float32 HxWxC arrays. Metric math and
resampling accumulate in float64 and only the stored pixels are float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

# BT.601 studio-swing luma coefficients for RGB in [0, 1].
_Y_COEF = (65.481, 128.553, 24.966)
_Y_OFFSET = 16.0

_COLOR_CHANNELS = {"rgb": 3, "ycbcr": 3, "y": 1}


@dataclass
class ImageBuffer:
    """An image with an explicit value domain and color space.

    pixels: HxWxC float32, values in [0, peak].
    peak: 1.0 or 255.0, the declared top of the value domain.
    color_space: "rgb", "ycbcr", or "y".
    """

    pixels: np.ndarray
    peak: float = 1.0
    color_space: str = "rgb"

    def __post_init__(self):
        if self.color_space not in _COLOR_CHANNELS:
            raise ValueError("unknown color space %r" % (self.color_space,))
        if self.peak not in (1.0, 255.0):
            raise ValueError("peak must be 1.0 or 255.0, got %r" % (self.peak,))
        px = np.asarray(self.pixels)
        if px.ndim != 3:
            raise ValueError("pixels must be HxWxC, got shape %r" % (px.shape,))
        if px.shape[2] != _COLOR_CHANNELS[self.color_space]:
            raise ValueError(
                "color space %r expects %d channels, got %d"
                % (self.color_space, _COLOR_CHANNELS[self.color_space], px.shape[2])
            )
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("empty image: shape %r" % (px.shape,))
        if px.dtype != np.float32:
            px = px.astype(np.float32)
        if not np.isfinite(px).all():
            raise ValueError("pixels contain non-finite values")
        if px.min() < 0.0 or px.max() > self.peak:
            raise ValueError(
                "pixels outside [0, %g]: min %g max %g"
                % (self.peak, px.min(), px.max())
            )
        self.pixels = np.ascontiguousarray(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def clamp_to_buffer(pixels: np.ndarray, peak: float, color_space: str) -> ImageBuffer:
    """Clamp raw float values into [0, peak] and wrap them in a buffer."""
    px = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, peak)
    return ImageBuffer(px.astype(np.float32), peak=peak, color_space=color_space)


def rgb_to_y(img: ImageBuffer) -> ImageBuffer:
    """BT.601 studio-swing luma of an RGB image in [0, 1].

    Returns a single-channel buffer in [0, 255]; the achievable range is
    [16, 235].
    """
    if img.color_space != "rgb":
        raise ValueError("rgb_to_y expects an rgb buffer, got %r" % (img.color_space,))
    if img.peak != 1.0:
        raise ValueError("rgb_to_y expects peak 1.0, got %g" % (img.peak,))
    px = img.pixels.astype(np.float64)
    y = _Y_OFFSET + _Y_COEF[0] * px[:, :, 0] + _Y_COEF[1] * px[:, :, 1] + _Y_COEF[2] * px[:, :, 2]
    return clamp_to_buffer(y[:, :, None], peak=255.0, color_space="y")


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Piecewise cubic interpolation kernel."""
    at = np.abs(t)
    at2 = at * at
    at3 = at2 * at
    inner = (a + 2.0) * at3 - (a + 3.0) * at2 + 1.0
    outer = a * at3 - 5.0 * a * at2 + 8.0 * a * at - 4.0 * a
    return np.where(at <= 1.0, inner, np.where(at < 2.0, outer, 0.0))


def _resample_axis(n_in: int, n_out: int, scale: float):
    """Tap indices and normalized weights for one axis of a separable resize.

    Half-pixel-center mapping; on downscale the kernel support widens by
    1/scale so the filter acts as an antialiasing prefilter. Taps beyond the
    signal are clamped to the edge samples.
    """
    x = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    s_eff = min(scale, 1.0)
    support = 2.0 / s_eff
    left = np.ceil(x - support).astype(np.int64)
    n_taps = int(math.ceil(2.0 * support)) + 1
    idx = left[:, None] + np.arange(n_taps, dtype=np.int64)[None, :]
    weights = _cubic_kernel((x[:, None] - idx) * s_eff)
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)
    return idx, weights


def bicubic_resize(img: ImageBuffer, scale: float) -> ImageBuffer:
    """Separable bicubic resize (a = -0.5) with edge-clamped boundaries.

    Output dimensions are floor(H * scale) x floor(W * scale). Deterministic:
    identical inputs give bit-identical outputs.
    """
    if not (scale > 0.0) or not math.isfinite(scale):
        raise ValueError("scale must be positive and finite, got %r" % (scale,))
    h, w = img.height, img.width
    out_h = int(math.floor(h * scale + 1e-9))
    out_w = int(math.floor(w * scale + 1e-9))
    if out_h < 1 or out_w < 1:
        raise ValueError(
            "scale %g collapses %dx%d below one pixel" % (scale, h, w)
        )
    px = img.pixels.astype(np.float64)
    row_idx, row_w = _resample_axis(h, out_h, scale)
    tmp = np.einsum("ot,othc->ohc", row_w, px[row_idx, :, :])
    col_idx, col_w = _resample_axis(w, out_w, scale)
    out = np.einsum("ot,hotc->hoc", col_w, tmp[:, col_idx, :])
    return clamp_to_buffer(out, peak=img.peak, color_space=img.color_space)


def psnr(a: ImageBuffer, b: ImageBuffer, shave: int = 0) -> float:
    """Peak signal-to-noise ratio in dB over the declared peak.

    Identical inputs return +inf. `shave` optionally drops a border of that
    many pixels on every side before comparing (default keeps everything).
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(
            "shape mismatch: %r vs %r" % (a.pixels.shape, b.pixels.shape)
        )
    if a.peak != b.peak:
        raise ValueError("peak mismatch: %g vs %g" % (a.peak, b.peak))
    pa = a.pixels.astype(np.float64)
    pb = b.pixels.astype(np.float64)
    if shave:
        if 2 * shave >= min(a.height, a.width):
            raise ValueError("shave %d leaves no pixels" % (shave,))
        pa = pa[shave:-shave, shave:-shave]
        pb = pb[shave:-shave, shave:-shave]
    mse = np.mean((pa - pb) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(a.peak * a.peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering with a symmetric 1-D window."""
    n = g.size
    h, w = x.shape
    rows = np.zeros((h - n + 1, w), dtype=np.float64)
    for t in range(n):
        rows += g[t] * x[t : t + h - n + 1, :]
    out = np.zeros((h - n + 1, w - n + 1), dtype=np.float64)
    for t in range(n):
        out += g[t] * rows[:, t : t + w - n + 1]
    return out


def ssim(a: ImageBuffer, b: ImageBuffer, shave: int = 0) -> float:
    """Structural similarity on single-channel [0, 255] buffers.

    11x11 Gaussian window (sigma 1.5), C1 = (0.01*255)^2, C2 = (0.03*255)^2,
    averaged over valid window positions only (no padding).
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(
            "shape mismatch: %r vs %r" % (a.pixels.shape, b.pixels.shape)
        )
    if a.channels != 1 or b.channels != 1:
        raise ValueError("ssim expects single-channel buffers")
    if a.peak != 255.0 or b.peak != 255.0:
        raise ValueError("ssim expects [0, 255] buffers")
    pa = a.pixels[:, :, 0].astype(np.float64)
    pb = b.pixels[:, :, 0].astype(np.float64)
    if shave:
        if 2 * shave >= min(a.height, a.width):
            raise ValueError("shave %d leaves no pixels" % (shave,))
        pa = pa[shave:-shave, shave:-shave]
        pb = pb[shave:-shave, shave:-shave]
    if min(pa.shape) < 11:
        raise ValueError("ssim needs at least 11x11 pixels, got %r" % (pa.shape,))
    g = _gaussian_window()
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    mu_a = _filter_valid(pa, g)
    mu_b = _filter_valid(pb, g)
    mu_aa = _filter_valid(pa * pa, g)
    mu_bb = _filter_valid(pb * pb, g)
    mu_ab = _filter_valid(pa * pb, g)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def y_psnr(a: ImageBuffer, b: ImageBuffer, shave: int = 0) -> float:
    """PSNR on the BT.601 luma of two RGB buffers in [0, 1]."""
    return psnr(rgb_to_y(a), rgb_to_y(b), shave=shave)


def y_ssim(a: ImageBuffer, b: ImageBuffer, shave: int = 0) -> float:
    """SSIM on the BT.601 luma of two RGB buffers in [0, 1]."""
    return ssim(rgb_to_y(a), rgb_to_y(b), shave=shave)


def pad_to_multiple(img: ImageBuffer, multiple: int) -> ImageBuffer:
    """Reflect-pad bottom/right so both dimensions divide `multiple`."""
    h, w = img.height, img.width
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return img
    if pad_h >= h or pad_w >= w:
        raise ValueError(
            "image %dx%d too small to reflect-pad to multiple of %d"
            % (h, w, multiple)
        )
    px = np.pad(img.pixels, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    return ImageBuffer(px, peak=img.peak, color_space=img.color_space)


def crop(img: ImageBuffer, top: int, left: int, height: int, width: int) -> ImageBuffer:
    """Axis-aligned crop; the box must lie inside the image."""
    if top < 0 or left < 0 or height < 1 or width < 1:
        raise ValueError("bad crop box")
    if top + height > img.height or left + width > img.width:
        raise ValueError(
            "crop %r exceeds image %dx%d"
            % ((top, left, height, width), img.height, img.width)
        )
    px = np.ascontiguousarray(img.pixels[top : top + height, left : left + width])
    return ImageBuffer(px, peak=img.peak, color_space=img.color_space)


def load_png(path) -> ImageBuffer:
    """Load a PNG as an RGB buffer in [0, 1] (exact division by 255)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return ImageBuffer((arr / 255.0).astype(np.float32), peak=1.0, color_space="rgb")


def save_png(img: ImageBuffer, path) -> None:
    """Write a buffer as 8-bit PNG (round half up after scaling to 255)."""
    px = img.pixels.astype(np.float64)
    if img.peak == 1.0:
        px = px * 255.0
    data = np.clip(np.floor(px + 0.5), 0.0, 255.0).astype(np.uint8)
    if img.channels == 1:
        Image.fromarray(data[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)
