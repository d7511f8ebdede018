"""Random perspective pairs for the second reconstruction pass.

A pair is produced by perturbing the four corners of the HR crop, solving the
induced homography, warping both resolutions with inverse-mapped bicubic
sampling, and keeping the original crop window. All solves and coordinate
math run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularTransformError
from .imaging import ImageBuffer, _cubic_kernel, clamp_to_buffer

SCALE_FACTOR = 4


@dataclass(frozen=True)
class PerturbationRange:
    """Closed magnitude band [lo, hi] in HR pixels for corner offsets."""

    lo: float = 5.0
    hi: float = 20.0

    def __post_init__(self):
        if not (0.0 < self.lo <= self.hi):
            raise ValueError(
                "perturbation band needs 0 < lo <= hi, got [%r, %r]"
                % (self.lo, self.hi)
            )


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, normalized so m[2, 2] == 1."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3, got %r" % (m.shape,))
        if not np.isfinite(m).all():
            raise ValueError("homography has non-finite entries")
        if m[2, 2] == 0.0:
            raise SingularTransformError("homography has zero corner element")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise SingularTransformError("homography is singular")
        object.__setattr__(self, "m", m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map Nx2 (x, y) points through the transform."""
        pts = np.asarray(points, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1), dtype=np.float64)
        hom = np.concatenate([pts, ones], axis=1) @ self.m.T
        return hom[:, :2] / hom[:, 2:3]


def sample_vertex_offsets(rng: np.random.Generator, band: PerturbationRange) -> np.ndarray:
    """Draw (4, 2) corner offsets: uniform magnitude in the band, random sign.

    Draw order is fixed (magnitudes then signs) so a seeded generator gives
    reproducible offsets.
    """
    mag = rng.uniform(band.lo, band.hi, size=(4, 2))
    sign = rng.integers(0, 2, size=(4, 2)).astype(np.float64) * 2.0 - 1.0
    return mag * sign


def solve_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Homography mapping four (x, y) source points onto four targets.

    Solves the 8-unknown linear system with m[2, 2] fixed to 1.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValueError("need exactly four source and four target points")
    a = np.zeros((8, 8), dtype=np.float64)
    b = np.zeros(8, dtype=np.float64)
    for i in range(4):
        x, y = src[i]
        u, v = dst[i]
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularTransformError(
            "degenerate correspondences: %s" % (exc,)
        ) from exc
    m = np.append(h, 1.0).reshape(3, 3)
    return Homography(m)


def warp_perspective(img: ImageBuffer, h: Homography) -> ImageBuffer:
    """Warp by inverse mapping with bicubic sampling (a = -0.5).

    Output dimensions equal input dimensions; samples outside the image are
    edge-clamped. The identity transform returns a bit-identical image.
    """
    hin = h.inverse().m
    ht, wd = img.height, img.width
    # The transform acts on half-pixel-center coordinates (pixel index + 0.5),
    # the same frame the resizer uses; this is what makes the diag(4,4,1)
    # conjugation commute with 1/4 downsampling.
    xs, ys = np.meshgrid(
        np.arange(wd, dtype=np.float64) + 0.5,
        np.arange(ht, dtype=np.float64) + 0.5,
    )
    den = hin[2, 0] * xs + hin[2, 1] * ys + hin[2, 2]
    den = np.where(np.abs(den) < 1e-12, np.copysign(1e-12, den), den)
    sx = (hin[0, 0] * xs + hin[0, 1] * ys + hin[0, 2]) / den - 0.5
    sy = (hin[1, 0] * xs + hin[1, 1] * ys + hin[1, 2]) / den - 0.5

    fx = np.floor(sx)
    fy = np.floor(sy)
    tx = sx - fx
    ty = sy - fy
    px = img.pixels.astype(np.float64)
    out = np.zeros((ht, wd, img.channels), dtype=np.float64)
    wsum = np.zeros((ht, wd), dtype=np.float64)
    for dy in range(-1, 3):
        wy = _cubic_kernel(ty - dy)
        iy = np.clip(fy.astype(np.int64) + dy, 0, ht - 1)
        for dx in range(-1, 3):
            wx = _cubic_kernel(tx - dx)
            ix = np.clip(fx.astype(np.int64) + dx, 0, wd - 1)
            w = wy * wx
            out += w[:, :, None] * px[iy, ix, :]
            wsum += w
    out /= wsum[:, :, None]
    return clamp_to_buffer(out, peak=img.peak, color_space=img.color_space)


@dataclass(frozen=True)
class PerspectivePair:
    """Consistently warped LR/HR crops plus the transforms that made them."""

    lr_warped: ImageBuffer
    hr_warped: ImageBuffer
    h_lr: Homography
    h_hr: Homography

    def __post_init__(self):
        if (
            self.hr_warped.height != SCALE_FACTOR * self.lr_warped.height
            or self.hr_warped.width != SCALE_FACTOR * self.lr_warped.width
        ):
            raise ValueError("warped pair dimensions are not 4x related")


def make_perspective_pair(
    y_lr: ImageBuffer,
    y_hr: ImageBuffer,
    rng: np.random.Generator,
    band: PerturbationRange = PerturbationRange(),
) -> PerspectivePair:
    """Warp an LR/HR crop pair by one random perspective transform.

    Corner offsets are sampled at HR resolution; the LR transform is the HR
    transform conjugated by S = diag(4, 4, 1) so both resolutions see the
    same geometric deformation.
    """
    if (
        y_hr.height != SCALE_FACTOR * y_lr.height
        or y_hr.width != SCALE_FACTOR * y_lr.width
    ):
        raise ValueError(
            "hr %dx%d is not 4x the lr %dx%d"
            % (y_hr.height, y_hr.width, y_lr.height, y_lr.width)
        )
    w, h = float(y_hr.width), float(y_hr.height)
    corners = np.array(
        [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]], dtype=np.float64
    )
    offsets = sample_vertex_offsets(rng, band)
    h_hr = solve_homography(corners, corners + offsets)
    s = np.diag([float(SCALE_FACTOR), float(SCALE_FACTOR), 1.0])
    s_inv = np.diag([1.0 / SCALE_FACTOR, 1.0 / SCALE_FACTOR, 1.0])
    h_lr = Homography(s_inv @ h_hr.m @ s)
    return PerspectivePair(
        lr_warped=warp_perspective(y_lr, h_lr),
        hr_warped=warp_perspective(y_hr, h_hr),
        h_lr=h_lr,
        h_hr=h_hr,
    )
