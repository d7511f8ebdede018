"""Command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 data or checkpoint
error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation, matching
from .checkpoint import load_checkpoint, restore_model
from .config import load_run_config, resolved_dict, write_resolved
from .data import PairDataset, load_manifest, load_pair_dataset
from .errors import (
    CheckpointFormatError,
    ConfigError,
    FeatureExtractorMissingError,
    MalformedDatasetError,
    SingularTransformError,
    TrainingDivergenceError,
)
from .geometry import PerturbationRange, make_perspective_pair, solve_homography
from .imaging import (
    ImageBuffer,
    bicubic_resize,
    crop,
    load_png,
    pad_to_multiple,
    psnr,
    save_png,
    ssim,
)
from .network import FASConfig, RefSRNetwork, super_resolve
from .training import Critic, VGGFeatures, train_loop

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rrsr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the two-pass training loop")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY.PATH=VALUE",
        help="dotted override, wins over the file",
    )
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="score a checkpoint on a benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--dataset",
        required=True,
        choices=["pairs", "cufed5", "self", "random-ref"],
    )
    p.add_argument("--root", required=True, help="benchmark directory")
    p.add_argument("--out", default="eval_out", help="report directory")
    p.add_argument("--seed", type=int, default=0, help="random-ref pairing seed")
    p.add_argument("--shave", type=int, default=0, help="border pixels to ignore")

    p = sub.add_parser("infer", help="super-resolve one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lr", required=True, help="low-resolution input PNG")
    p.add_argument("--ref", required=True, help="reference PNG")
    p.add_argument("--out", required=True, help="output PNG")

    sub.add_parser("selftest", help="run fast invariant checks")

    p = sub.add_parser("dump-offsets", help="write the correspondence map")
    p.add_argument("--lr", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=3)

    p = sub.add_parser("dump-warp", help="write a warped pair for inspection")
    p.add_argument("--hr", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lo", type=float, default=5.0)
    p.add_argument("--hi", type=float, default=20.0)
    return parser


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    echo_path = write_resolved(cfg, cfg.out_dir)
    print("resolved config: %s" % echo_path)
    if cfg.data_root and cfg.data_manifest:
        raise ConfigError("set only one of data.root and data.manifest")
    if cfg.data_root:
        dataset = PairDataset(load_pair_dataset(cfg.data_root))
    elif cfg.data_manifest:
        dataset = PairDataset(load_manifest(cfg.data_manifest))
    else:
        raise ConfigError("data.root or data.manifest is required to train")
    torch.manual_seed(cfg.training.seed)
    model = RefSRNetwork(cfg.network)
    perceptual = VGGFeatures() if cfg.losses.lambda_per > 0.0 else None
    critic = Critic() if cfg.losses.lambda_adv > 0.0 else None
    summary = train_loop(
        model,
        dataset,
        cfg.training,
        cfg.losses,
        cfg.out_dir,
        config_echo=resolved_dict(cfg),
        resume_from=args.resume,
        perceptual=perceptual,
        critic=critic,
    )
    print(json.dumps(summary))
    return EXIT_OK


def _model_from_checkpoint(path) -> tuple[RefSRNetwork, dict]:
    ckpt = load_checkpoint(path)
    net_cfg = ckpt.config.get("network")
    if not isinstance(net_cfg, dict):
        raise CheckpointFormatError("%s carries no network config" % (path,))
    if net_cfg.get("match_radius", None) == 0:
        net_cfg = dict(net_cfg, match_radius=None)
    model = RefSRNetwork(FASConfig(**net_cfg))
    restore_model(ckpt, model)
    model.eval()
    return model, ckpt.manifest


def _cmd_eval(args) -> int:
    model, _ = _model_from_checkpoint(args.checkpoint)
    builders = {
        "pairs": lambda: evaluation.build_pair_eval(args.root),
        "cufed5": lambda: evaluation.build_five_ref_eval(args.root),
        "self": lambda: evaluation.build_self_ref_eval(args.root),
        "random-ref": lambda: evaluation.build_random_ref_eval(args.root, args.seed),
    }
    samples = builders[args.dataset]()
    report = evaluation.evaluate(
        lambda lr, ref: super_resolve(model, lr, ref),
        samples,
        dataset=args.dataset,
        checkpoint_id=str(args.checkpoint),
        shave=args.shave,
    )
    print(report.format_table())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    print("report: %s" % (out / "report.json"))
    return EXIT_OK


def _cmd_infer(args) -> int:
    model, _ = _model_from_checkpoint(args.checkpoint)
    lr = load_png(_require_file(args.lr))
    ref = pad_to_multiple(load_png(_require_file(args.ref)), 4)
    sr = super_resolve(model, lr, ref)
    save_png(sr, args.out)
    print("wrote %s" % (args.out,))
    return EXIT_OK


def _cmd_dump_offsets(args) -> int:
    lr = load_png(_require_file(args.lr))
    ref = pad_to_multiple(load_png(_require_file(args.ref)), 4)
    matcher = matching.PatchMatcher(patch=args.patch)
    cmap = matcher.correspondence(lr, ref)
    matching.write_offsets(cmap, args.out)
    print("wrote %s (%dx%d grid)" % (args.out, *cmap.grid_shape))
    return EXIT_OK


def _cmd_dump_warp(args) -> int:
    hr = load_png(_require_file(args.hr))
    h4 = (hr.height // 4) * 4
    w4 = (hr.width // 4) * 4
    if h4 < 8 or w4 < 8:
        raise MalformedDatasetError("%s is too small to warp" % (args.hr,))
    hr = crop(hr, 0, 0, h4, w4)
    lr = bicubic_resize(hr, 0.25)
    rng = np.random.default_rng(args.seed)
    pair = make_perspective_pair(lr, hr, rng, PerturbationRange(args.lo, args.hi))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_png(lr, out / "lr.png")
    save_png(hr, out / "hr.png")
    save_png(pair.lr_warped, out / "lr_warped.png")
    save_png(pair.hr_warped, out / "hr_warped.png")
    print("wrote warped pair under %s" % (out,))
    return EXIT_OK


def _require_file(path) -> Path:
    # A bad path argument is a usage error, not a data error: the file was
    # never opened, so there is nothing malformed to report.
    p = Path(path)
    if not p.is_file():
        raise ConfigError("input file %s does not exist" % (p,))
    return p


def _selftest_checks():
    import torch.nn.functional as F

    from .network import FilterBank, ModulatedDeformAlign

    def check_mixing():
        torch.manual_seed(0)
        bank = FilterBank(6, 4, num_filters=4).double()
        x = torch.randn(2, 6, 9, 9, dtype=torch.float64)
        alpha = torch.rand(2, 4, dtype=torch.float64)
        with torch.no_grad():
            mixed = bank(x, alpha)
            by_sum = sum(
                alpha[:, k].view(2, 1, 1, 1)
                * F.conv2d(x, bank.kernels[k], padding=1)
                for k in range(4)
            )
        return float((mixed - by_sum).abs().max()) <= 1e-8

    def check_degenerate_alignment():
        torch.manual_seed(1)
        align = ModulatedDeformAlign(5)
        g = torch.randn(2, 5, 11, 11)
        zeros = torch.zeros(2, 18, 11, 11)
        ones = torch.ones(2, 9, 11, 11)
        with torch.no_grad():
            got = align.sample(g, zeros, ones)
            want = F.conv2d(g, align.conv.weight, align.conv.bias, padding=1)
        return float((got - want).abs().max()) <= 1e-4

    def check_homography():
        rng = np.random.default_rng(2)
        for _ in range(20):
            src = np.array([[0.0, 0.0], [159.0, 0.0], [159.0, 159.0], [0.0, 159.0]])
            dst = src + rng.uniform(-20.0, 20.0, size=(4, 2))
            try:
                h = solve_homography(src, dst)
            except SingularTransformError:
                return False
            if np.abs(h.apply(src) - dst).max() > 1e-8:
                return False
        return True

    def check_metrics():
        base = np.full((16, 16, 1), 100.0, dtype=np.float32)
        a = ImageBuffer(base, peak=255.0, color_space="y")
        b = ImageBuffer(base + 1.0, peak=255.0, color_space="y")
        c = ImageBuffer(base + 16.0, peak=255.0, color_space="y")
        ok = abs(psnr(a, b) - 48.1308) <= 1e-3
        ok = ok and abs(psnr(a, c) - 24.0484) <= 1e-3
        ok = ok and psnr(a, a) == math.inf
        ok = ok and ssim(a, a) == 1.0
        return ok

    def check_bicubic_ramp():
        w = 32
        ramp = np.tile(np.arange(w, dtype=np.float32)[None, :, None], (8, 1, 1))
        img = ImageBuffer(ramp / (w - 1), peak=1.0, color_space="y")
        half = bicubic_resize(img, 0.5)
        expected = (2.0 * np.arange(w // 2) + 0.5) / (w - 1)
        got = half.pixels[2, :, 0]
        return float(np.abs(got[2:-2] - expected[2:-2]).max()) <= 1e-5

    return [
        ("kernel mixing identity", check_mixing),
        ("deformable degeneracy", check_degenerate_alignment),
        ("homography residual", check_homography),
        ("metric oracles", check_metrics),
        ("bicubic ramp reproduction", check_bicubic_ramp),
    ]


def _cmd_selftest(_args) -> int:
    failures = 0
    for name, fn in _selftest_checks():
        try:
            ok = fn()
        except Exception as exc:  # noqa: BLE001 - reported as a failure
            ok = False
            print("FAIL %s (%s)" % (name, exc))
            failures += 1
            continue
        print("%s %s" % ("PASS" if ok else "FAIL", name))
        failures += 0 if ok else 1
    return EXIT_OK if failures == 0 else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "infer": _cmd_infer,
        "selftest": _cmd_selftest,
        "dump-offsets": _cmd_dump_offsets,
        "dump-warp": _cmd_dump_warp,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print("config error: %s" % (exc,), file=sys.stderr)
        return EXIT_USAGE
    except (
        MalformedDatasetError,
        CheckpointFormatError,
        FeatureExtractorMissingError,
        FileNotFoundError,
    ) as exc:
        print("data error: %s" % (exc,), file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergenceError as exc:
        print("diverged: %s" % (exc,), file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
