"""Benchmark adapters and Y-channel PSNR/SSIM reporting.

HR images are reflect-padded to multiples of 4 before degradation so the
network's stride contract holds; metrics are computed on the unpadded region.
Evaluation layout on disk: `<stem>_0.png` is the target and `<stem>_1.png`
through `<stem>_5.png` are its references (the five-reference convention).
Single-reference directories reuse the training sibling layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import load_pair_dataset, stitch_references
from .errors import MalformedDatasetError
from .imaging import (
    ImageBuffer,
    bicubic_resize,
    crop,
    load_png,
    pad_to_multiple,
    rgb_to_y,
    psnr,
    ssim,
)

SCALE_FACTOR = 4


@dataclass
class EvalSample:
    name: str
    hr: ImageBuffer
    lr: ImageBuffer
    ref: ImageBuffer

    def __post_init__(self):
        if self.ref.height % SCALE_FACTOR or self.ref.width % SCALE_FACTOR:
            raise ValueError(
                "reference %s dims must be divisible by %d" % (self.name, SCALE_FACTOR)
            )


@dataclass
class ImageResult:
    name: str
    psnr: float | None = None
    ssim: float | None = None
    error: str | None = None


@dataclass
class MetricsReport:
    dataset: str
    checkpoint_id: str
    per_image: list[ImageResult] = field(default_factory=list)

    def _values(self, key: str) -> list[float]:
        return [getattr(r, key) for r in self.per_image if r.error is None]

    @property
    def mean_psnr(self) -> float | None:
        vals = self._values("psnr")
        return float(np.mean(vals)) if vals else None

    @property
    def mean_ssim(self) -> float | None:
        vals = self._values("ssim")
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "checkpoint": self.checkpoint_id,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "images": [
                {
                    "name": r.name,
                    "psnr": r.psnr,
                    "ssim": r.ssim,
                    "error": r.error,
                }
                for r in self.per_image
            ],
        }

    def to_json(self) -> str:
        def _enc(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            return v

        d = self.to_dict()
        d["mean_psnr"] = _enc(d["mean_psnr"])
        for img in d["images"]:
            img["psnr"] = _enc(img["psnr"])
        return json.dumps(d, indent=2)

    def format_table(self) -> str:
        lines = ["%-28s %10s %8s" % ("image", "psnr", "ssim")]
        for r in self.per_image:
            if r.error is not None:
                lines.append("%-28s %19s" % (r.name, "error: " + r.error[:40]))
            else:
                lines.append("%-28s %10.2f %8.3f" % (r.name, r.psnr, r.ssim))
        mp, ms = self.mean_psnr, self.mean_ssim
        lines.append(
            "%-28s %10s %8s"
            % (
                "mean",
                "%.2f" % mp if mp is not None else "n/a",
                "%.3f" % ms if ms is not None else "n/a",
            )
        )
        return "\n".join(lines)


def evaluate(infer_fn, samples: list[EvalSample], dataset: str = "",
             checkpoint_id: str = "", shave: int = 0) -> MetricsReport:
    """Score each sample's reconstruction against its HR target.

    `infer_fn(lr, ref) -> ImageBuffer` at 4x the LR dims. Per-image failures
    are recorded and excluded from the means. Results depend only on the
    per-sample computation, so ordering never changes the numbers.
    """
    report = MetricsReport(dataset=dataset, checkpoint_id=checkpoint_id)
    for s in samples:
        try:
            sr = infer_fn(s.lr, s.ref)
            sr = crop(sr, 0, 0, s.hr.height, s.hr.width)
            ya = rgb_to_y(sr)
            yb = rgb_to_y(s.hr)
            report.per_image.append(
                ImageResult(
                    name=s.name,
                    psnr=psnr(ya, yb, shave=shave),
                    ssim=ssim(ya, yb, shave=shave),
                )
            )
        except Exception as exc:  # noqa: BLE001 - recorded per image
            report.per_image.append(ImageResult(name=s.name, error=str(exc)))
    return report


def degrade(hr: ImageBuffer) -> tuple[ImageBuffer, ImageBuffer]:
    """Reflect-pad to a multiple of 4 and bicubic-downscale by 1/4."""
    padded = pad_to_multiple(hr, SCALE_FACTOR)
    return padded, bicubic_resize(padded, 1.0 / SCALE_FACTOR)


def build_five_ref_eval(root, cell: int = 500) -> list[EvalSample]:
    """Targets with five stitched references on one canvas per sample."""
    root = Path(root)
    if not root.is_dir():
        raise MalformedDatasetError("eval root %s is not a directory" % (root,))
    stems: dict[str, dict[int, Path]] = {}
    for p in sorted(root.glob("*_*.png")):
        stem, _, tag = p.stem.rpartition("_")
        if not stem or not tag.isdigit():
            continue
        stems.setdefault(stem, {})[int(tag)] = p
    if not stems:
        raise MalformedDatasetError("no <stem>_<k>.png files under %s" % (root,))
    samples = []
    for stem in sorted(stems):
        have = stems[stem]
        if sorted(have) != [0, 1, 2, 3, 4, 5]:
            raise MalformedDatasetError(
                "%s needs exactly _0 through _5, found %r" % (stem, sorted(have))
            )
        hr = load_png(have[0])
        refs = [load_png(have[k]) for k in range(1, 6)]
        canvas = stitch_references(refs, cell=cell, count=5)
        _, lr = degrade(hr)
        samples.append(EvalSample(name=stem, hr=hr, lr=lr, ref=canvas))
    return samples


def build_pair_eval(root) -> list[EvalSample]:
    """Single-reference eval over the sibling `_hr`/`_ref` layout."""
    samples = []
    for hr_path, ref_path in load_pair_dataset(root):
        hr = load_png(hr_path)
        ref = pad_to_multiple(load_png(ref_path), SCALE_FACTOR)
        _, lr = degrade(hr)
        name = hr_path.name[: -len("_hr.png")]
        samples.append(EvalSample(name=name, hr=hr, lr=lr, ref=ref))
    return samples


def _hr_only_paths(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise MalformedDatasetError("eval root %s is not a directory" % (root,))
    paths = sorted(root.glob("*.png"))
    if not paths:
        raise MalformedDatasetError("no *.png files under %s" % (root,))
    return paths


def build_self_ref_eval(root) -> list[EvalSample]:
    """No-reference benchmarks: the LR image doubles as its own reference."""
    samples = []
    for p in _hr_only_paths(root):
        hr = load_png(p)
        _, lr = degrade(hr)
        ref = pad_to_multiple(lr, SCALE_FACTOR)
        samples.append(EvalSample(name=p.stem, hr=hr, lr=lr, ref=ref))
    return samples


def build_random_ref_eval(root, seed: int = 0) -> list[EvalSample]:
    """Each target gets another image from the same directory as reference."""
    paths = _hr_only_paths(root)
    if len(paths) < 2:
        raise MalformedDatasetError("random-ref mode needs at least two images")
    rng = np.random.default_rng(seed)
    samples = []
    for i, p in enumerate(paths):
        j = int(rng.integers(0, len(paths) - 1))
        if j >= i:
            j += 1
        hr = load_png(p)
        ref = pad_to_multiple(load_png(paths[j]), SCALE_FACTOR)
        _, lr = degrade(hr)
        samples.append(EvalSample(name=p.stem, hr=hr, lr=lr, ref=ref))
    return samples


def bicubic_baseline(lr: ImageBuffer, ref: ImageBuffer) -> ImageBuffer:
    """Reference-free baseline: plain bicubic 4x upscaling of the input."""
    return bicubic_resize(lr, float(SCALE_FACTOR))
