"""Reference-based SR network: progressive feature alignment and selection.

The decoder runs at 1x, 2x, and 4x of the LR grid. Each alignment/selection
block gathers reference features with integer pre-offsets from the matcher,
refines them with a modulated deformable conv whose residual offsets and
masks are predicted from the roughly aligned content, then fuses the merged
features through a routed filter bank and residual blocks.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import deform_conv2d

from .imaging import ImageBuffer, clamp_to_buffer
from .matching import CorrespondenceMap, PatchMatcher

SCALE_FACTOR = 4

FeaturePyramid = namedtuple("FeaturePyramid", ["f1", "f2", "f4"])


@dataclass
class FASConfig:
    """Architecture knobs for the alignment/selection network."""

    n_feats: int = 64
    n_content_blocks: int = 8
    n_resblocks: int = 5
    num_filters: int = 16
    stacks_per_scale: int = 3
    enable_ras: bool = True
    enable_pfa: bool = True
    global_residual: bool = True
    match_mode: str = "pixels"
    match_patch: int = 3
    match_radius: int | None = None

    def __post_init__(self):
        for name in (
            "n_feats",
            "n_content_blocks",
            "n_resblocks",
            "num_filters",
            "stacks_per_scale",
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError("%s must be a positive integer, got %r" % (name, v))
        if self.match_mode not in ("pixels", "encoder"):
            raise ValueError("match_mode must be 'pixels' or 'encoder'")
        if self.match_patch < 1 or self.match_patch % 2 == 0:
            raise ValueError("match_patch must be odd and positive")


def default_conv(in_c: int, out_c: int, kernel_size: int = 3) -> nn.Conv2d:
    return nn.Conv2d(in_c, out_c, kernel_size, padding=kernel_size // 2)


class ResidualBlock(nn.Module):
    def __init__(self, n_feats: int):
        super().__init__()
        self.conv1 = default_conv(n_feats, n_feats)
        self.conv2 = default_conv(n_feats, n_feats)

    def forward(self, x):
        res = self.conv2(F.relu(self.conv1(x)))
        return x + res


class ContentExtractor(nn.Module):
    """LR content features at the 1x grid."""

    def __init__(self, n_feats: int, n_blocks: int):
        super().__init__()
        self.head = default_conv(3, n_feats)
        self.body = nn.Sequential(*[ResidualBlock(n_feats) for _ in range(n_blocks)])
        self.tail = default_conv(n_feats, n_feats)

    def forward(self, x):
        x = F.leaky_relu(self.head(x), negative_slope=0.1)
        return x + self.tail(self.body(x))


class ReferenceEncoder(nn.Module):
    """Trainable reference pyramid at 1x, 2x, and 4x of the LR grid.

    The input reference sits at 4x, so f4 keeps full resolution and two
    stride-2 stages produce f2 and f1.
    """

    def __init__(self, n_feats: int):
        super().__init__()
        self.head = default_conv(3, n_feats)
        self.block4 = ResidualBlock(n_feats)
        self.down2 = nn.Conv2d(n_feats, n_feats, 3, stride=2, padding=1)
        self.block2 = ResidualBlock(n_feats)
        self.down1 = nn.Conv2d(n_feats, n_feats, 3, stride=2, padding=1)
        self.block1 = ResidualBlock(n_feats)

    def forward(self, ref) -> FeaturePyramid:
        f4 = self.block4(F.leaky_relu(self.head(ref), negative_slope=0.1))
        f2 = self.block2(F.leaky_relu(self.down2(f4), negative_slope=0.1))
        f1 = self.block1(F.leaky_relu(self.down1(f2), negative_slope=0.1))
        return FeaturePyramid(f1=f1, f2=f2, f4=f4)


def gather_reference(f_ref: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """Index reference features onto the LR-side grid with integer offsets.

    f_ref: (B, C, H, W); offsets: (B, h, w, 2) with (dy, dx) such that every
    (y, x) + offsets[b, y, x] lands inside the reference grid. Differentiable
    with respect to f_ref.
    """
    b, _, rh, rw = f_ref.shape
    if offsets.shape[0] != b or offsets.shape[3] != 2:
        raise ValueError("offsets shape %r does not fit batch" % (offsets.shape,))
    h, w = offsets.shape[1], offsets.shape[2]
    device = f_ref.device
    base_y = torch.arange(h, device=device).view(1, h, 1)
    base_x = torch.arange(w, device=device).view(1, 1, w)
    iy = base_y + offsets[:, :, :, 0]
    ix = base_x + offsets[:, :, :, 1]
    if iy.min() < 0 or ix.min() < 0 or iy.max() >= rh or ix.max() >= rw:
        raise ValueError("offsets point outside the reference grid")
    bi = torch.arange(b, device=device).view(b, 1, 1).expand(b, h, w)
    gathered = f_ref[bi, :, iy, ix]
    return gathered.permute(0, 3, 1, 2).contiguous()


def upscale_offset_grid(offsets: torch.Tensor, s: int) -> torch.Tensor:
    """Offsets at 1x lifted to the s-times grid: multiply and replicate."""
    if s == 1:
        return offsets
    return offsets.repeat_interleave(s, dim=1).repeat_interleave(s, dim=2) * s


class ModulatedDeformAlign(nn.Module):
    """Learned residual alignment on top of gathered reference features.

    A two-conv head looks at (LR features, gathered reference features) and
    predicts per-tap residual offsets plus sigmoid modulation masks; sampling
    happens at pre-offset + residual. The head's last conv starts at zero so
    training begins from the plain gathered alignment.
    """

    def __init__(self, n_feats: int, kernel_size: int = 3):
        super().__init__()
        self.kernel_size = kernel_size
        taps = kernel_size * kernel_size
        self.conv = default_conv(n_feats, n_feats, kernel_size)
        self.head1 = default_conv(2 * n_feats, n_feats)
        self.head2 = default_conv(n_feats, 3 * taps)
        nn.init.zeros_(self.head2.weight)
        nn.init.zeros_(self.head2.bias)

    def sample(self, g, offsets, mask):
        """Modulated deformable sampling with this block's kernel.

        offsets: (B, 2*taps, H, W), channel 2i the dy and 2i+1 the dx of tap
        i; mask: (B, taps, H, W) in [0, 1]. Zero offsets with unit masks
        reduce to the plain convolution.
        """
        return deform_conv2d(
            g,
            offsets,
            self.conv.weight,
            self.conv.bias,
            padding=self.kernel_size // 2,
            mask=mask,
        )

    def forward(self, g, f_lr):
        taps = self.kernel_size * self.kernel_size
        head = self.head2(F.leaky_relu(self.head1(torch.cat([f_lr, g], dim=1)),
                                       negative_slope=0.1))
        offsets = head[:, : 2 * taps]
        mask = torch.sigmoid(head[:, 2 * taps :])
        return self.sample(g, offsets, mask)


class FilterBank(nn.Module):
    """Reference-aware selection: route a bank of conv kernels per sample.

    alpha = sigmoid(fc(gap(x))); the kernels are mixed first and the merged
    features are convolved once with the mixed kernel, which matches summing
    the per-kernel responses.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 num_filters: int = 16, kernel_size: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.num_filters = num_filters
        self.kernel_size = kernel_size
        scale = (in_channels * kernel_size * kernel_size) ** -0.5
        self.kernels = nn.Parameter(
            torch.randn(num_filters, out_channels, in_channels,
                        kernel_size, kernel_size) * scale
        )
        self.fc = nn.Linear(in_channels, num_filters)

    def routing(self, x) -> torch.Tensor:
        return torch.sigmoid(self.fc(x.mean(dim=(2, 3))))

    def forward(self, x, alpha=None):
        if alpha is None:
            alpha = self.routing(x)
        b, _, h, w = x.shape
        mixed = torch.einsum("bk,koihw->boihw", alpha, self.kernels)
        out = F.conv2d(
            x.reshape(1, b * self.in_channels, h, w),
            mixed.reshape(b * self.out_channels, self.in_channels,
                          self.kernel_size, self.kernel_size),
            padding=self.kernel_size // 2,
            groups=b,
        )
        return out.reshape(b, self.out_channels, h, w)


class FASBlock(nn.Module):
    """Align reference features, select from the merge, fuse residually."""

    def __init__(self, n_feats: int, cfg: FASConfig):
        super().__init__()
        self.align = ModulatedDeformAlign(n_feats)
        if cfg.enable_ras:
            self.select = FilterBank(2 * n_feats, n_feats, cfg.num_filters)
        else:
            self.select = nn.Conv2d(2 * n_feats, n_feats, 1)
        self.blocks = nn.Sequential(
            *[ResidualBlock(n_feats) for _ in range(cfg.n_resblocks)]
        )

    def forward(self, f_lr, f_ref, offsets):
        g = gather_reference(f_ref, offsets)
        aligned = self.align(g, f_lr)
        merged = torch.cat([aligned, f_lr], dim=1)
        fused = self.blocks(self.select(merged))
        return fused + f_lr


class Upsampler(nn.Module):
    def __init__(self, n_feats: int):
        super().__init__()
        self.conv = default_conv(n_feats, 4 * n_feats)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x):
        return F.leaky_relu(self.shuffle(self.conv(x)), negative_slope=0.1)


class RefSRNetwork(nn.Module):
    """Full 4x reference-based SR model.

    Decoder: one alignment/selection block at 1x, then for each of 2x and 4x
    an upsample followed by a chain of blocks (`stacks_per_scale` when the
    progressive stack is enabled, otherwise one).
    """

    def __init__(self, cfg: FASConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.n_feats
        stacks = cfg.stacks_per_scale if cfg.enable_pfa else 1
        self.content = ContentExtractor(c, cfg.n_content_blocks)
        self.ref_encoder = ReferenceEncoder(c)
        self.fas1 = FASBlock(c, cfg)
        self.up2 = Upsampler(c)
        self.fas2 = nn.ModuleList([FASBlock(c, cfg) for _ in range(stacks)])
        self.up4 = Upsampler(c)
        self.fas4 = nn.ModuleList([FASBlock(c, cfg) for _ in range(stacks)])
        self.recon = default_conv(c, 3)
        if cfg.match_mode == "encoder":
            self.matcher = PatchMatcher(
                patch=cfg.match_patch,
                mode="encoder",
                encoder=self._encode_for_matching,
                search_radius=cfg.match_radius,
            )
        else:
            self.matcher = PatchMatcher(
                patch=cfg.match_patch, search_radius=cfg.match_radius
            )

    def fas_block_count(self) -> int:
        return 1 + len(self.fas2) + len(self.fas4)

    def _encode_for_matching(self, img: ImageBuffer) -> np.ndarray:
        dev = self.recon.weight.device
        dt = self.recon.weight.dtype
        x = torch.from_numpy(img.pixels).permute(2, 0, 1)[None].to(dev, dt)
        with torch.no_grad():
            feat = self.content(x)
        return feat[0].permute(1, 2, 0).cpu().numpy()

    def correspondence(self, lr: ImageBuffer, ref: ImageBuffer) -> CorrespondenceMap:
        return self.matcher.correspondence(lr, ref)

    def compute_offsets(self, x_lr: torch.Tensor, y_ref: torch.Tensor) -> torch.Tensor:
        """Per-sample integer pre-offsets on the 1x grid (no gradients)."""
        maps = []
        for i in range(x_lr.shape[0]):
            lr_img = _tensor_to_buffer(x_lr[i])
            ref_img = _tensor_to_buffer(y_ref[i])
            maps.append(self.correspondence(lr_img, ref_img).offsets)
        out = torch.from_numpy(np.stack(maps).astype(np.int64))
        return out.to(x_lr.device)

    def forward(self, x_lr, y_ref, offsets=None):
        if y_ref.shape[2] % SCALE_FACTOR or y_ref.shape[3] % SCALE_FACTOR:
            raise ValueError(
                "reference dims %r must be divisible by %d"
                % (tuple(y_ref.shape[2:]), SCALE_FACTOR)
            )
        if offsets is None:
            offsets = self.compute_offsets(x_lr, y_ref)
        if offsets.shape[1:3] != x_lr.shape[2:4]:
            raise ValueError(
                "offsets grid %r does not match input %r"
                % (tuple(offsets.shape[1:3]), tuple(x_lr.shape[2:4]))
            )
        f = self.content(x_lr)
        pyr = self.ref_encoder(y_ref)
        x = self.fas1(f, pyr.f1, offsets)
        x = self.up2(x)
        off2 = upscale_offset_grid(offsets, 2)
        for blk in self.fas2:
            x = blk(x, pyr.f2, off2)
        x = self.up4(x)
        off4 = upscale_offset_grid(offsets, 4)
        for blk in self.fas4:
            x = blk(x, pyr.f4, off4)
        out = self.recon(x)
        if self.cfg.global_residual:
            out = out + F.interpolate(
                x_lr, scale_factor=SCALE_FACTOR, mode="bicubic", align_corners=False
            )
        if not self.training:
            out = out.clamp(0.0, 1.0)
        return out


def _tensor_to_buffer(t: torch.Tensor) -> ImageBuffer:
    arr = t.detach().cpu().to(torch.float64).permute(1, 2, 0).numpy()
    return clamp_to_buffer(arr, peak=1.0, color_space="rgb")


def buffer_to_tensor(img: ImageBuffer, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(img.pixels).permute(2, 0, 1)[None].to(dtype)


def super_resolve(model: RefSRNetwork, lr: ImageBuffer, ref: ImageBuffer) -> ImageBuffer:
    """Run one LR/reference pair through the model in eval mode."""
    if lr.color_space != "rgb" or ref.color_space != "rgb":
        raise ValueError("super_resolve expects rgb buffers")
    dt = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(buffer_to_tensor(lr, dt), buffer_to_tensor(ref, dt))
    finally:
        if was_training:
            model.train()
    return _tensor_to_buffer(out[0])
