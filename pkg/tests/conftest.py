"""Shared fixtures: synthetic images and tiny network configs.

Synthetic content is low-frequency noise upsampled bicubically, so crops are
smooth enough for cross-scale patch matching but not degenerate. Feature
scale is the approximate size in pixels of one noise cell.
"""

import numpy as np
import pytest
import torch

from rrsr.imaging import ImageBuffer, bicubic_resize
from rrsr.network import FASConfig

torch.set_num_threads(1)


def synth_image(seed: int, height: int, width: int, feature_px: int = 8) -> ImageBuffer:
    rng = np.random.default_rng(seed)
    base = rng.random(
        (max(1, height // feature_px), max(1, width // feature_px), 3)
    ).astype(np.float32)
    up = bicubic_resize(ImageBuffer(base), float(feature_px))
    if up.height < height or up.width < width:
        raise ValueError("feature_px must divide the requested size")
    return ImageBuffer(
        np.ascontiguousarray(up.pixels[:height, :width]),
        peak=1.0,
        color_space="rgb",
    )


def brute_force_match(f_lr, f_ref, patch=3):
    """Literal O(h*w*H*W) reference matcher with explicit tie-breaks.

    Independent of the production matcher: per-position Python loops,
    per-pair normalization, tie order score > nearest offset > row-major
    reference position. Returns (offsets int64 (h,w,2), scores float64).
    """
    f_lr = np.asarray(f_lr, dtype=np.float64)
    f_ref = np.asarray(f_ref, dtype=np.float64)
    pad = patch // 2
    lr_pad = np.pad(f_lr, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    ref_pad = np.pad(f_ref, ((pad, pad), (pad, pad), (0, 0)), mode="edge")

    def vec(padded, y, x):
        v = padded[y : y + patch, x : x + patch, :].reshape(-1)
        n = np.sqrt((v * v).sum())
        return v / n if n >= 1e-12 else np.zeros_like(v)

    h, w = f_lr.shape[:2]
    rh, rw = f_ref.shape[:2]
    offsets = np.zeros((h, w, 2), dtype=np.int64)
    scores = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            u = vec(lr_pad, y, x)
            best_key = None
            best = None
            for ry in range(rh):
                for rx in range(rw):
                    s = float(u @ vec(ref_pad, ry, rx))
                    dy, dx = ry - y, rx - x
                    key = (s, -(dy * dy + dx * dx), -ry, -rx)
                    if best_key is None or key > best_key:
                        best_key = key
                        best = (dy, dx, s)
            offsets[y, x] = (best[0], best[1])
            scores[y, x] = best[2]
    return offsets, scores


def tiny_config(**overrides) -> FASConfig:
    kwargs = dict(
        n_feats=8,
        n_content_blocks=2,
        n_resblocks=2,
        num_filters=2,
        stacks_per_scale=2,
    )
    kwargs.update(overrides)
    return FASConfig(**kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
