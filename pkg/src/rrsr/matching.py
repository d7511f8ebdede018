"""Dense patch correspondence between LR features and reference features.

The matcher is a deliberately simple stand-in kept behind a provider
interface: normalized cross-correlation of patch neighborhoods, exhaustive
argmax over reference positions. Scores are computed in float64 with a fixed
reduction order so results are bit-deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import ImageBuffer, bicubic_resize, rgb_to_y

OFFSETS_MAGIC = b"RRSROFF1"

# Keeps per-chunk similarity blocks around a few hundred MB at worst.
_CHUNK_ROWS = 4096


@dataclass
class CorrespondenceMap:
    """Integer reference offsets and match scores on the LR feature grid.

    offsets[p] = (dy, dx) such that position p + (dy, dx) on the reference
    grid is the best match for p; scores[p] is its correlation in [-1, 1].
    """

    offsets: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets)
        sc = np.asarray(self.scores)
        if off.ndim != 3 or off.shape[2] != 2:
            raise ValueError("offsets must be (h, w, 2), got %r" % (off.shape,))
        if sc.shape != off.shape[:2]:
            raise ValueError(
                "scores shape %r does not match offsets %r" % (sc.shape, off.shape)
            )
        self.offsets = np.ascontiguousarray(off.astype(np.int32))
        self.scores = np.ascontiguousarray(sc.astype(np.float32))

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.offsets.shape[0], self.offsets.shape[1]


def _patch_vectors(feat: np.ndarray, patch: int) -> np.ndarray:
    """Row-major (h*w, patch*patch*c) descriptors with edge-clamp padding."""
    pad = patch // 2
    padded = np.pad(feat, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch), axis=(0, 1))
    h, w = feat.shape[0], feat.shape[1]
    return win.reshape(h * w, -1).astype(np.float64)


def _normalize_rows(vecs: np.ndarray) -> np.ndarray:
    norms = np.sqrt((vecs * vecs).sum(axis=1))
    safe = np.where(norms < 1e-12, 1.0, norms)
    out = vecs / safe[:, None]
    out[norms < 1e-12] = 0.0
    return out


def match_features(
    f_lr: np.ndarray,
    f_ref: np.ndarray,
    patch: int = 3,
    search_radius: int | None = None,
) -> CorrespondenceMap:
    """Argmax normalized cross-correlation of patch neighborhoods.

    Every LR position is matched against every reference position (or a
    (2r+1)^2 window when `search_radius` is set). Score ties resolve to the
    offset closest to zero, remaining ties to the smallest (dy, dx) pair,
    which coincides with row-major reference order.
    """
    f_lr = np.asarray(f_lr, dtype=np.float64)
    f_ref = np.asarray(f_ref, dtype=np.float64)
    if f_lr.ndim != 3 or f_ref.ndim != 3:
        raise ValueError("feature maps must be (h, w, c)")
    if f_lr.shape[2] != f_ref.shape[2]:
        raise ValueError(
            "channel mismatch: %d vs %d" % (f_lr.shape[2], f_ref.shape[2])
        )
    if patch < 1 or patch % 2 == 0:
        raise ValueError("patch must be odd and positive, got %d" % (patch,))
    h, w = f_lr.shape[:2]
    rh, rw = f_ref.shape[:2]
    lr_vecs = _normalize_rows(_patch_vectors(f_lr, patch))
    ref_vecs = _normalize_rows(_patch_vectors(f_ref, patch))

    ref_flat = np.arange(rh * rw, dtype=np.int64)
    ref_y = ref_flat // rw
    ref_x = ref_flat % rw
    pos_flat = np.arange(h * w, dtype=np.int64)
    pos_y = pos_flat // w
    pos_x = pos_flat % w

    offsets = np.zeros((h * w, 2), dtype=np.int64)
    scores = np.zeros(h * w, dtype=np.float64)
    for start in range(0, h * w, _CHUNK_ROWS):
        stop = min(start + _CHUNK_ROWS, h * w)
        sims = lr_vecs[start:stop] @ ref_vecs.T
        dy = ref_y[None, :] - pos_y[start:stop, None]
        dx = ref_x[None, :] - pos_x[start:stop, None]
        if search_radius is not None:
            outside = (np.abs(dy) > search_radius) | (np.abs(dx) > search_radius)
            if outside.all(axis=1).any():
                raise ValueError(
                    "search_radius %d leaves some positions without candidates"
                    % (search_radius,)
                )
            sims = np.where(outside, -np.inf, sims)
        best = sims.max(axis=1)
        tied = sims == best[:, None]
        rank = dy * dy + dx * dx
        rank = np.where(tied, rank, np.iinfo(np.int64).max)
        nearest = rank.min(axis=1)
        pick = (rank == nearest[:, None]).argmax(axis=1)
        offsets[start:stop, 0] = dy[np.arange(stop - start), pick]
        offsets[start:stop, 1] = dx[np.arange(stop - start), pick]
        scores[start:stop] = sims[np.arange(stop - start), pick]
    return CorrespondenceMap(
        offsets=offsets.reshape(h, w, 2), scores=scores.reshape(h, w)
    )


def scale_offsets(cmap: CorrespondenceMap, s: int) -> CorrespondenceMap:
    """Lift a 1x correspondence map to an s-times-denser grid.

    Offsets multiply by s and replicate to the nearest coarse cell; scores
    replicate unchanged. In-bounds offsets stay in-bounds on the scaled
    reference grid.
    """
    if s not in (1, 2, 4):
        raise ValueError("scale must be 1, 2, or 4, got %r" % (s,))
    if s == 1:
        return CorrespondenceMap(cmap.offsets.copy(), cmap.scores.copy())
    off = np.repeat(np.repeat(cmap.offsets * s, s, axis=0), s, axis=1)
    sc = np.repeat(np.repeat(cmap.scores, s, axis=0), s, axis=1)
    return CorrespondenceMap(offsets=off, scores=sc)


def write_offsets(cmap: CorrespondenceMap, path) -> None:
    """Serialize a correspondence map (little-endian, fixed layout)."""
    h, w = cmap.grid_shape
    payload = [
        OFFSETS_MAGIC,
        struct.pack("<II", h, w),
        cmap.offsets.astype("<i4").tobytes(),
        cmap.scores.astype("<f4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(payload))


def read_offsets(path) -> CorrespondenceMap:
    """Inverse of `write_offsets`; raises ValueError on a bad header."""
    raw = Path(path).read_bytes()
    if raw[: len(OFFSETS_MAGIC)] != OFFSETS_MAGIC:
        raise ValueError("%s is not an offsets dump (bad magic)" % (path,))
    h, w = struct.unpack_from("<II", raw, len(OFFSETS_MAGIC))
    head = len(OFFSETS_MAGIC) + 8
    n_off = h * w * 2 * 4
    n_sc = h * w * 4
    if len(raw) != head + n_off + n_sc:
        raise ValueError("%s has truncated payload" % (path,))
    offsets = np.frombuffer(raw, dtype="<i4", count=h * w * 2, offset=head)
    scores = np.frombuffer(raw, dtype="<f4", count=h * w, offset=head + n_off)
    return CorrespondenceMap(
        offsets=offsets.reshape(h, w, 2).copy(), scores=scores.reshape(h, w).copy()
    )


def luminance_features(img: ImageBuffer) -> np.ndarray:
    """Single-channel match features: luma scaled to [0, 1]."""
    if img.color_space == "rgb":
        return (rgb_to_y(img).pixels / 255.0).astype(np.float64)
    return (img.pixels / img.peak).astype(np.float64)


class PatchMatcher:
    """Correspondence provider: features + NCC matching at the 1x LR grid.

    mode "pixels" uses raw luminance patches (training-free, deterministic);
    mode "encoder" delegates to a supplied feature callable so the restoration
    network's own 1x features can be matched instead.
    """

    def __init__(
        self,
        patch: int = 3,
        mode: str = "pixels",
        encoder=None,
        search_radius: int | None = None,
    ):
        if mode not in ("pixels", "encoder"):
            raise ValueError("matcher mode must be 'pixels' or 'encoder'")
        if mode == "encoder" and encoder is None:
            raise ValueError("encoder mode needs a feature callable")
        self.patch = patch
        self.mode = mode
        self.encoder = encoder
        self.search_radius = search_radius

    def features(self, img: ImageBuffer) -> np.ndarray:
        if self.mode == "pixels":
            return luminance_features(img)
        return np.asarray(self.encoder(img), dtype=np.float64)

    def correspondence(self, lr: ImageBuffer, ref: ImageBuffer) -> CorrespondenceMap:
        ref_small = bicubic_resize(ref, 0.25)
        return match_features(
            self.features(lr),
            self.features(ref_small),
            patch=self.patch,
            search_radius=self.search_radius,
        )
