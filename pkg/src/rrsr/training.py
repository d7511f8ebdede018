"""Reciprocal two-pass training.

Pass 1 reconstructs the target from its LR input and the HR reference. Pass 2
reuses the same network to reconstruct a perspective-warped copy of the
reference, taking the pass-1 output as its reference image without detaching,
so the second objective backpropagates through the first reconstruction. The
perspective warp is what keeps pass 2 from collapsing into a reference
auto-encoder.
"""

from __future__ import annotations

import json
import math
import time
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import (
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from .data import TrainSample, make_train_sample
from .errors import FeatureExtractorMissingError, TrainingDivergenceError
from .geometry import PerturbationRange, make_perspective_pair
from .imaging import ImageBuffer

LOG_KEYS = ("iter", "rec", "rtrr", "per", "adv", "total", "lr", "seconds")


@dataclass
class LossWeights:
    """Scalars for the weighted total objective."""

    lambda_rec: float = 1.0
    lambda_rtrr: float = 0.4
    lambda_per: float = 1e-4
    lambda_adv: float = 1e-6

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (v >= 0.0 and math.isfinite(v)):
                raise ValueError("%s must be finite and >= 0, got %r" % (name, v))


@dataclass
class LossBundle:
    """Per-term scalars plus their weighted total for one step."""

    rec: float
    rtrr: float
    per: float
    adv: float
    total: float

    def finite(self) -> bool:
        return all(
            math.isfinite(v) for v in (self.rec, self.rtrr, self.per, self.adv, self.total)
        )


@dataclass
class TrainConfig:
    iterations: int = 255000
    batch_size: int = 9
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    enable_rtrr: bool = True
    enable_pt: bool = True
    perturb_lo: float = 5.0
    perturb_hi: float = 20.0
    patch_hr: int = 160
    augment: bool = True
    profile: str = "full"
    checkpoint_interval: int = 5000
    log_interval: int = 50
    lr_decay_step: int = 0
    lr_decay_gamma: float = 0.5
    gp_weight: float = 10.0

    def __post_init__(self):
        if self.profile not in ("full", "desk"):
            raise ValueError("profile must be 'full' or 'desk', got %r" % (self.profile,))
        for name in ("iterations", "batch_size", "checkpoint_interval", "log_interval"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError("%s must be a positive integer, got %r" % (name, v))
        if not (0.0 < self.lr and math.isfinite(self.lr)):
            raise ValueError("lr must be positive, got %r" % (self.lr,))
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ValueError("%s must be in [0, 1), got %r" % (name, v))
        if self.patch_hr % 4 != 0 or self.patch_hr < 8:
            raise ValueError("patch_hr must be a multiple of 4 and >= 8")
        if self.lr_decay_step < 0:
            raise ValueError("lr_decay_step must be >= 0")

    def perturbation(self) -> PerturbationRange:
        return PerturbationRange(self.perturb_lo, self.perturb_hi)

    def lr_at(self, iteration: int) -> float:
        if self.lr_decay_step <= 0:
            return self.lr
        return self.lr * self.lr_decay_gamma ** (iteration // self.lr_decay_step)


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible numpy stream for one concern."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("ascii"))])


def reconstruction_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute error; shapes must match exactly."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch: %r vs %r" % (tuple(a.shape), tuple(b.shape)))
    return (a - b).abs().mean()


def perceptual_loss(sr: torch.Tensor, hr: torch.Tensor, extractor) -> torch.Tensor:
    """Mean over the batch of the Frobenius norm of the deep-feature residual."""
    f_sr = extractor(sr)
    with torch.no_grad():
        f_hr = extractor(hr)
    diff = (f_sr - f_hr).reshape(sr.shape[0], -1)
    return torch.linalg.vector_norm(diff, dim=1).mean()


class VGGFeatures(nn.Module):
    """Pretrained deep features for the full-profile perceptual term."""

    def __init__(self, layer: str = "relu5_1"):
        super().__init__()
        cut = {"relu1_1": 2, "relu2_1": 7, "relu3_1": 12, "relu4_1": 21, "relu5_1": 30}
        if layer not in cut:
            raise ValueError("unknown layer %r" % (layer,))
        try:
            from torchvision.models import VGG19_Weights, vgg19

            net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise FeatureExtractorMissingError(
                "pretrained feature extractor unavailable: %s" % (exc,)
            ) from exc
        self.features = net.features[: cut[layer]].eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def forward(self, x):
        return self.features((x - self.mean) / self.std)


class Critic(nn.Module):
    """Small strided-conv critic returning one unbounded score per sample."""

    def __init__(self, base: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base, 2 * base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * base, 4 * base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * base, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x).mean(dim=(1, 2, 3))


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """WGAN-GP penalty on random convex combinations of real and fake."""
    mixed = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    scores = critic(mixed)
    grads = torch.autograd.grad(scores.sum(), mixed, create_graph=True)[0]
    norms = grads.reshape(grads.shape[0], -1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def adversarial_losses(
    sr: torch.Tensor,
    hr: torch.Tensor,
    critic: Critic,
    gp_weight: float = 10.0,
    eps: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator and critic objectives (critic sees the detached output)."""
    g_loss = -critic(sr).mean()
    fake = sr.detach()
    if eps is None:
        eps = torch.rand(sr.shape[0], 1, 1, 1, dtype=sr.dtype, device=sr.device)
    penalty = gradient_penalty(critic, hr, fake, eps)
    d_loss = critic(fake).mean() - critic(hr).mean() + gp_weight * penalty
    return g_loss, d_loss


@dataclass
class Batch:
    x_lr: torch.Tensor
    x_hr: torch.Tensor
    y_lr: torch.Tensor
    y_hr: torch.Tensor


def _to_tensor(img: ImageBuffer, dtype) -> torch.Tensor:
    return torch.from_numpy(img.pixels).permute(2, 0, 1).to(dtype)


def stack_samples(samples: list[TrainSample], dtype=torch.float32) -> Batch:
    return Batch(
        x_lr=torch.stack([_to_tensor(s.x_lr, dtype) for s in samples]),
        x_hr=torch.stack([_to_tensor(s.x_hr, dtype) for s in samples]),
        y_lr=torch.stack([_to_tensor(s.y_lr, dtype) for s in samples]),
        y_hr=torch.stack([_to_tensor(s.y_hr, dtype) for s in samples]),
    )


def make_pair_batch(
    samples: list[TrainSample],
    rng: np.random.Generator,
    band: PerturbationRange,
    enable_pt: bool,
    dtype=torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Perspective-warped (lr, hr) reference tensors for the second pass.

    With the transform disabled the reference crops pass through unwarped,
    which is the collapse configuration the warp exists to avoid.
    """
    lrs, hrs = [], []
    for s in samples:
        if enable_pt:
            pair = make_perspective_pair(s.y_lr, s.y_hr, rng, band)
            lrs.append(_to_tensor(pair.lr_warped, dtype))
            hrs.append(_to_tensor(pair.hr_warped, dtype))
        else:
            lrs.append(_to_tensor(s.y_lr, dtype))
            hrs.append(_to_tensor(s.y_hr, dtype))
    return torch.stack(lrs), torch.stack(hrs)


def rtrr_losses(
    model,
    batch: Batch,
    weights: LossWeights,
    pair: tuple[torch.Tensor, torch.Tensor] | None = None,
    detach_reference: bool = False,
    offsets1: torch.Tensor | None = None,
    offsets2: torch.Tensor | None = None,
    perceptual=None,
    critic: Critic | None = None,
    gp_weight: float = 10.0,
    adv_eps: torch.Tensor | None = None,
    debug: bool = False,
):
    """Weighted two-pass objective.

    Returns (total tensor, critic-loss tensor or None, LossBundle). When
    `pair` is None only pass 1 runs and the rtrr term is zero. `offsets1` and
    `offsets2` pin the correspondence maps, which keeps the objective smooth
    for finite-difference checks.
    """
    x_sr = model(batch.x_lr, batch.y_hr, offsets=offsets1)
    rec = reconstruction_loss(batch.x_hr, x_sr)
    zero = x_sr.new_zeros(())
    rtrr = zero
    if pair is not None:
        p_lr, p_hr = pair
        reference = x_sr.detach() if detach_reference else x_sr
        if debug and not detach_reference:
            assert reference is x_sr and reference.requires_grad
        y_sr_p = model(p_lr, reference, offsets=offsets2)
        rtrr = reconstruction_loss(p_hr, y_sr_p)
    per = zero
    if weights.lambda_per > 0.0:
        if perceptual is None:
            raise FeatureExtractorMissingError(
                "lambda_per > 0 but no feature extractor was provided"
            )
        per = perceptual_loss(x_sr, batch.x_hr, perceptual)
    adv = zero
    d_loss = None
    if weights.lambda_adv > 0.0:
        if critic is None:
            raise ValueError("lambda_adv > 0 but no critic was provided")
        adv, d_loss = adversarial_losses(
            x_sr, batch.x_hr, critic, gp_weight=gp_weight, eps=adv_eps
        )
    total = (
        weights.lambda_rec * rec
        + weights.lambda_rtrr * rtrr
        + weights.lambda_per * per
        + weights.lambda_adv * adv
    )
    bundle = LossBundle(
        rec=float(rec.detach()),
        rtrr=float(rtrr.detach()),
        per=float(per.detach()),
        adv=float(adv.detach()),
        total=float(total.detach()),
    )
    return total, d_loss, bundle


def rtrr_step(
    model,
    samples: list[TrainSample],
    rng: np.random.Generator,
    weights: LossWeights,
    enable_rtrr: bool = True,
    enable_pt: bool = True,
    band: PerturbationRange = PerturbationRange(),
    detach_reference: bool = False,
    perceptual=None,
    critic: Critic | None = None,
    gp_weight: float = 10.0,
    adv_eps: torch.Tensor | None = None,
    debug: bool = False,
) -> tuple[LossBundle, torch.Tensor | None]:
    """One gradient accumulation: forward both passes and backward the total.

    Returns the loss bundle and the critic loss tensor (not backwarded here;
    the caller owns the critic's optimizer).
    """
    dtype = next(model.parameters()).dtype
    batch = stack_samples(samples, dtype)
    run_second_pass = enable_rtrr and weights.lambda_rtrr > 0.0
    pair = None
    if run_second_pass:
        pair = make_pair_batch(samples, rng, band, enable_pt, dtype)
    total, d_loss, bundle = rtrr_losses(
        model,
        batch,
        weights,
        pair=pair,
        detach_reference=detach_reference,
        perceptual=perceptual,
        critic=critic,
        gp_weight=gp_weight,
        adv_eps=adv_eps,
        debug=debug,
    )
    total.backward()
    return bundle, d_loss


class InMemoryPairs:
    """Training dataset already resident as ImageBuffer pairs."""

    def __init__(self, items: list[tuple[ImageBuffer, ImageBuffer]]):
        if not items:
            raise ValueError("empty dataset")
        self.items = list(items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def train_loop(
    model,
    dataset,
    cfg: TrainConfig,
    weights: LossWeights,
    out_dir,
    config_echo: dict | None = None,
    resume_from=None,
    perceptual=None,
    critic: Critic | None = None,
) -> dict:
    """Run the optimization with periodic JSON-lines logging and checkpoints.

    Each log record reports losses averaged over the iterations since the
    previous record, so a moving average of the log covers every iteration
    rather than point samples. Sampling, augmentation, and warps each draw
    from their own seeded stream; the streams' states (and any partial log
    window) ride in every checkpoint, so resuming reproduces the
    uninterrupted run bit for bit (wall-clock seconds aside). A non-finite
    loss aborts with the last written checkpoint left on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_echo = config_echo or {}
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    critic_opt = None
    if critic is not None and weights.lambda_adv > 0.0:
        critic_opt = torch.optim.Adam(
            critic.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2)
        )
    rng_data = named_stream(cfg.seed, "data")
    rng_geom = named_stream(cfg.seed, "geometry")
    rng_adv = named_stream(cfg.seed, "adversarial")

    start_iter = 0
    log_path = out_dir / "metrics.jsonl"
    win = {"rec": 0.0, "rtrr": 0.0, "per": 0.0, "adv": 0.0, "total": 0.0}
    win_n = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        restore_model(ckpt, model)
        restore_optimizer(ckpt, optimizer, model)
        rng = ckpt.manifest["rng"]
        rng_data.bit_generator.state = rng["data"]
        rng_geom.bit_generator.state = rng["geometry"]
        rng_adv.bit_generator.state = rng["adversarial"]
        window = ckpt.manifest.get("log_window")
        if window:
            win.update(window["sums"])
            win_n = int(window["count"])
        start_iter = ckpt.iteration
        log_mode = "a"
    else:
        log_mode = "w"

    band = cfg.perturbation()
    t0 = time.monotonic()
    last_checkpoint = Path(resume_from) if resume_from is not None else None

    def write_checkpoint(iteration: int) -> Path:
        path = out_dir / ("ckpt_%08d.ckpt" % iteration)
        save_checkpoint(
            path,
            model,
            config=config_echo,
            iteration=iteration,
            optimizer=optimizer,
            rng_states={
                "data": rng_data.bit_generator.state,
                "geometry": rng_geom.bit_generator.state,
                "adversarial": rng_adv.bit_generator.state,
            },
            extras={"log_window": {"sums": dict(win), "count": win_n}},
        )
        return path

    model.train()
    with open(log_path, log_mode) as log:
        for it in range(start_iter + 1, cfg.iterations + 1):
            lr_now = cfg.lr_at(it - 1)
            for group in optimizer.param_groups:
                group["lr"] = lr_now
            idx = rng_data.integers(0, len(dataset), size=cfg.batch_size)
            samples = []
            for i in idx:
                hr, ref = dataset[int(i)]
                samples.append(
                    make_train_sample(
                        hr, ref, rng_data, patch_hr=cfg.patch_hr, augment=cfg.augment
                    )
                )
            adv_eps = None
            if critic_opt is not None:
                eps = rng_adv.uniform(size=(len(samples), 1, 1, 1))
                adv_eps = torch.from_numpy(eps).to(next(model.parameters()).dtype)
            optimizer.zero_grad(set_to_none=True)
            bundle, d_loss = rtrr_step(
                model,
                samples,
                rng_geom,
                weights,
                enable_rtrr=cfg.enable_rtrr,
                enable_pt=cfg.enable_pt,
                band=band,
                perceptual=perceptual,
                critic=critic,
                gp_weight=cfg.gp_weight,
                adv_eps=adv_eps,
            )
            if not bundle.finite():
                raise TrainingDivergenceError(
                    "non-finite loss at iteration %d (last checkpoint: %s)"
                    % (it, last_checkpoint)
                )
            optimizer.step()
            if critic_opt is not None and d_loss is not None:
                critic_opt.zero_grad(set_to_none=True)
                d_loss.backward()
                critic_opt.step()
            win["rec"] += bundle.rec
            win["rtrr"] += bundle.rtrr
            win["per"] += bundle.per
            win["adv"] += bundle.adv
            win["total"] += bundle.total
            win_n += 1
            if it % cfg.log_interval == 0 or it == cfg.iterations:
                record = {
                    "iter": it,
                    "rec": win["rec"] / win_n,
                    "rtrr": win["rtrr"] / win_n,
                    "per": win["per"] / win_n,
                    "adv": win["adv"] / win_n,
                    "total": win["total"] / win_n,
                    "lr": lr_now,
                    "seconds": time.monotonic() - t0,
                }
                log.write(json.dumps(record) + "\n")
                log.flush()
                for k in win:
                    win[k] = 0.0
                win_n = 0
            if it % cfg.checkpoint_interval == 0 or it == cfg.iterations:
                last_checkpoint = write_checkpoint(it)
    return {
        "iterations": cfg.iterations,
        "last_checkpoint": str(last_checkpoint),
        "log": str(log_path),
    }
