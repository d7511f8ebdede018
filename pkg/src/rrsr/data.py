"""Training pair datasets, patch sampling, augmentation, reference stitching.

On-disk layout for training pairs: sibling files `<stem>_hr.png` and
`<stem>_ref.png` in one directory. A manifest file (one `hr_path<TAB>ref_path`
per line, paths relative to the manifest) is accepted as an alternative.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MalformedDatasetError
from .imaging import ImageBuffer, bicubic_resize, crop, load_png

PATCH_HR = 160
PATCH_LR = 40
SCALE_FACTOR = 4


def load_pair_dataset(root) -> list[tuple[Path, Path]]:
    """Collect (hr, ref) path pairs from a sibling-file directory.

    Every `*_hr.png` must have a `*_ref.png` sibling and vice versa; an
    orphan raises a malformed-dataset error naming the file. Pairs come back
    sorted by stem.
    """
    root = Path(root)
    if not root.is_dir():
        raise MalformedDatasetError("dataset root %s is not a directory" % (root,))
    hr_stems = {p.name[: -len("_hr.png")]: p for p in root.glob("*_hr.png")}
    ref_stems = {p.name[: -len("_ref.png")]: p for p in root.glob("*_ref.png")}
    for stem in sorted(hr_stems.keys() | ref_stems.keys()):
        if stem not in ref_stems:
            raise MalformedDatasetError(
                "missing reference sibling for %s" % (hr_stems[stem],)
            )
        if stem not in hr_stems:
            raise MalformedDatasetError(
                "missing target sibling for %s" % (ref_stems[stem],)
            )
    return [(hr_stems[s], ref_stems[s]) for s in sorted(hr_stems)]


def load_manifest(path) -> list[tuple[Path, Path]]:
    """Read tab-separated hr/ref path pairs; relative paths resolve against
    the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise MalformedDatasetError("manifest %s does not exist" % (path,))
    base = path.parent
    pairs = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedDatasetError(
                "%s line %d: expected hr<TAB>ref, got %r" % (path, ln, line)
            )
        hr, ref = ((base / p) if not Path(p).is_absolute() else Path(p) for p in parts)
        for p in (hr, ref):
            if not p.is_file():
                raise MalformedDatasetError("%s line %d: %s missing" % (path, ln, p))
        pairs.append((hr, ref))
    if not pairs:
        raise MalformedDatasetError("manifest %s lists no pairs" % (path,))
    return pairs


class PairDataset:
    """Sequence of (hr, ref) ImageBuffers backed by PNG files on disk."""

    def __init__(self, pairs: list[tuple[Path, Path]]):
        if not pairs:
            raise MalformedDatasetError("empty pair list")
        self.pairs = list(pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> tuple[ImageBuffer, ImageBuffer]:
        hr, ref = self.pairs[i]
        return load_png(hr), load_png(ref)


def dihedral_transform(pixels: np.ndarray, op: int) -> np.ndarray:
    """Apply one of the 8 square symmetries to an HxWxC array.

    Ops 0..3 rotate counter-clockwise by 90*op degrees; ops 4..7 mirror
    horizontally first. Pure index permutation, so exact and invertible.
    """
    if not 0 <= op < 8:
        raise ValueError("dihedral op must be in 0..7, got %r" % (op,))
    out = pixels
    if op >= 4:
        out = out[:, ::-1, :]
    out = np.rot90(out, k=op % 4, axes=(0, 1))
    return np.ascontiguousarray(out)


def inverse_dihedral(op: int) -> int:
    """The op that undoes `dihedral_transform(_, op)`."""
    if not 0 <= op < 8:
        raise ValueError("dihedral op must be in 0..7, got %r" % (op,))
    if op < 4:
        return (4 - op) % 4
    return op


@dataclass
class TrainSample:
    """One training example: target crop plus reference crop, both scales."""

    x_hr: ImageBuffer
    x_lr: ImageBuffer
    y_hr: ImageBuffer
    y_lr: ImageBuffer

    def __post_init__(self):
        for hr, lr in ((self.x_hr, self.x_lr), (self.y_hr, self.y_lr)):
            if (
                hr.height != SCALE_FACTOR * lr.height
                or hr.width != SCALE_FACTOR * lr.width
            ):
                raise ValueError("train sample crops are not 4x related")


def make_train_sample(
    hr_img: ImageBuffer,
    ref_img: ImageBuffer,
    rng: np.random.Generator,
    patch_hr: int = PATCH_HR,
    augment: bool = True,
) -> TrainSample:
    """Cut aligned target/reference crops and derive their LR counterparts.

    Crop positions and the two dihedral ops (target and reference augmented
    independently) come from `rng` in a fixed draw order, so a seeded
    generator reproduces the sample. LR sides are the bicubic 1/4 downscales
    of the chosen HR crops.
    """
    if patch_hr % SCALE_FACTOR != 0:
        raise ValueError("patch_hr must be divisible by 4, got %d" % (patch_hr,))
    for name, img in (("hr", hr_img), ("ref", ref_img)):
        if img.height < patch_hr or img.width < patch_hr:
            raise ValueError(
                "%s image %dx%d smaller than patch %d"
                % (name, img.height, img.width, patch_hr)
            )
    ty = int(rng.integers(0, hr_img.height - patch_hr + 1))
    tx = int(rng.integers(0, hr_img.width - patch_hr + 1))
    ry = int(rng.integers(0, ref_img.height - patch_hr + 1))
    rx = int(rng.integers(0, ref_img.width - patch_hr + 1))
    x_hr = crop(hr_img, ty, tx, patch_hr, patch_hr)
    y_hr = crop(ref_img, ry, rx, patch_hr, patch_hr)
    if augment:
        op_t = int(rng.integers(0, 8))
        op_r = int(rng.integers(0, 8))
        x_hr = ImageBuffer(
            dihedral_transform(x_hr.pixels, op_t), x_hr.peak, x_hr.color_space
        )
        y_hr = ImageBuffer(
            dihedral_transform(y_hr.pixels, op_r), y_hr.peak, y_hr.color_space
        )
    return TrainSample(
        x_hr=x_hr,
        x_lr=bicubic_resize(x_hr, 1.0 / SCALE_FACTOR),
        y_hr=y_hr,
        y_lr=bicubic_resize(y_hr, 1.0 / SCALE_FACTOR),
    )


def stitch_references(refs: list[ImageBuffer], cell: int = 500, count: int = 5) -> ImageBuffer:
    """Anchor each reference at the top-left of its own cell on one canvas.

    The canvas is `cell` tall and `cell * count` wide, zero-filled;
    reference i occupies rows [0, H_i) and columns [cell*i, cell*i + W_i).
    """
    if len(refs) != count:
        raise MalformedDatasetError(
            "expected %d references, got %d" % (count, len(refs))
        )
    peak = refs[0].peak
    channels = refs[0].channels
    space = refs[0].color_space
    canvas = np.zeros((cell, cell * count, channels), dtype=np.float32)
    for i, ref in enumerate(refs):
        if ref.peak != peak or ref.color_space != space:
            raise MalformedDatasetError("reference %d has inconsistent format" % (i,))
        if ref.height > cell or ref.width > cell:
            raise MalformedDatasetError(
                "reference %d is %dx%d, larger than the %d cell"
                % (i, ref.height, ref.width, cell)
            )
        canvas[: ref.height, cell * i : cell * i + ref.width, :] = ref.pixels
    return ImageBuffer(canvas, peak=peak, color_space=space)
