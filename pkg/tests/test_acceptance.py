"""Acceptance gate: ten end-to-end checks, one verdict line each.

Run order matters only for readability; every test is self-contained. The
desk-scale fixture (tests 08 and 10) trains three short runs on synthetic
images and dominates the suite's wall time (~25-30 min single-threaded);
everything else is property-level and finishes in seconds to a few minutes.
"""

import json
import time

import numpy as np
import pytest
import toml
import torch
import torch.nn.functional as F

from conftest import brute_force_match, synth_image
from rrsr.checkpoint import load_checkpoint
from rrsr.config import load_run_config, resolved_dict
from rrsr.data import make_train_sample, stitch_references
from rrsr.geometry import (
    PerturbationRange,
    make_perspective_pair,
    sample_vertex_offsets,
)
from rrsr.imaging import ImageBuffer, bicubic_resize, psnr, rgb_to_y, ssim
from rrsr.matching import match_features
from rrsr.network import (
    FASConfig,
    FilterBank,
    ModulatedDeformAlign,
    RefSRNetwork,
    super_resolve,
)
from rrsr.training import (
    Batch,
    InMemoryPairs,
    LossWeights,
    TrainConfig,
    rtrr_losses,
    rtrr_step,
    train_loop,
)

DESK_WEIGHTS = LossWeights(lambda_per=0.0, lambda_adv=0.0)


def _verdict(tag: str, ok: bool, detail: str) -> None:
    print("[%s] %s — %s" % ("PASS" if ok else "FAIL", tag, detail))
    assert ok, "%s: %s" % (tag, detail)


def test_01_kernel_mixing_identity():
    """Routing a filter bank equals routing its per-kernel responses."""
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst32, worst64 = 0.0, 0.0
    for i in range(100):
        k_count = (1, 2, 16)[i % 3]
        cin = int(rng.integers(1, 7))
        cout = int(rng.integers(1, 7))
        h = int(rng.integers(5, 13))
        w = int(rng.integers(5, 13))
        torch.manual_seed(1000 + i)
        bank32 = FilterBank(cin, cout, num_filters=k_count)
        bank64 = FilterBank(cin, cout, num_filters=k_count).double()
        with torch.no_grad():
            bank64.kernels.copy_(bank32.kernels.double())
        g = torch.Generator().manual_seed(i)
        x32 = torch.randn(1, cin, h, w, generator=g)
        alpha32 = torch.rand(1, k_count, generator=g)
        pad = bank32.kernels.shape[-1] // 2
        for bank, x, alpha, bits in (
            (bank32, x32, alpha32, 32),
            (bank64, x32.double(), alpha32.double(), 64),
        ):
            with torch.no_grad():
                mixed = bank(x, alpha)
                by_sum = sum(
                    alpha[0, k] * F.conv2d(x, bank.kernels[k], padding=pad)
                    for k in range(k_count)
                )
            gap = float((mixed - by_sum).abs().max())
            if bits == 32:
                worst32 = max(worst32, gap)
            else:
                worst64 = max(worst64, gap)
    dt = time.time() - t0
    ok = worst32 <= 1e-4 and worst64 <= 1e-8 and dt < 10
    _verdict(
        "01 kernel-mixing identity",
        ok,
        "100 draws, K in {1,2,16}: max gap fp32 %.2e (<=1e-4), fp64 %.2e (<=1e-8), %.1fs (<10s)"
        % (worst32, worst64, dt),
    )


def test_02_deformable_degeneracy():
    """Zero offsets and unit gates reduce deformable sampling to plain conv."""
    t0 = time.time()
    rng = np.random.default_rng(22)
    worst = 0.0
    for i in range(20):
        c = int(rng.integers(2, 9))
        h = int(rng.integers(6, 15))
        w = int(rng.integers(6, 15))
        torch.manual_seed(2000 + i)
        align = ModulatedDeformAlign(c)
        g = torch.Generator().manual_seed(i)
        x = torch.randn(1, c, h, w, generator=g)
        taps = align.kernel_size * align.kernel_size
        with torch.no_grad():
            got = align.sample(x, torch.zeros(1, 2 * taps, h, w), torch.ones(1, taps, h, w))
            want = F.conv2d(x, align.conv.weight, align.conv.bias, padding=1)
        worst = max(worst, float((got - want).abs().max()))
    dt = time.time() - t0
    ok = worst <= 1e-4 and dt < 5
    _verdict(
        "02 deformable degeneracy",
        ok,
        "20 inputs: max |deform - conv| %.2e (<=1e-4), %.1fs (<5s)" % (worst, dt),
    )


def _audit_point(torch_seed=3):
    """Tiny two-pass setup at a generic parameter point, in float64.

    The alignment heads are zero-initialized, which makes the untrained model
    a saddle where half the gradients vanish identically; the audit therefore
    perturbs every parameter and biases the offset heads off zero before
    measuring. Pre-offsets are pinned once so the objective stays smooth in
    the parameters.
    """
    torch.manual_seed(torch_seed)
    rng = np.random.default_rng(50)
    cfg = FASConfig(
        n_feats=8, n_content_blocks=2, n_resblocks=2, num_filters=2, stacks_per_scale=2
    )
    model = RefSRNetwork(cfg).double()
    g = torch.Generator().manual_seed(torch_seed + 1000)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
        for m in model.modules():
            if isinstance(m, ModulatedDeformAlign):
                taps = m.kernel_size * m.kernel_size
                m.head2.bias[: 2 * taps] += 0.37

    def rand_img(size):
        base = rng.random((size // 8, size // 8, 3)).astype(np.float32)
        return bicubic_resize(ImageBuffer(base), 8.0)

    def to_t(bufs):
        return torch.from_numpy(
            np.stack([b.pixels.transpose(2, 0, 1) for b in bufs])
        ).double()

    xs, ys = [rand_img(64)], [rand_img(64)]
    batch = Batch(
        x_lr=to_t([bicubic_resize(b, 0.25) for b in xs]),
        x_hr=to_t(xs),
        y_lr=to_t([bicubic_resize(b, 0.25) for b in ys]),
        y_hr=to_t(ys),
    )
    pr = make_perspective_pair(bicubic_resize(ys[0], 0.25), ys[0], rng)
    pair = (to_t([pr.lr_warped]), to_t([pr.hr_warped]))
    off1 = model.compute_offsets(batch.x_lr, batch.y_hr)
    with torch.no_grad():
        x_sr0 = model(batch.x_lr, batch.y_hr, offsets=off1)
    off2 = model.compute_offsets(pair[0], x_sr0.clamp(0.0, 1.0))
    return model, batch, pair, off1, off2


def test_03_gradient_audit():
    """Backprop through both passes agrees with central finite differences."""
    t0 = time.time()
    model, batch, pair, off1, off2 = _audit_point()

    def objective():
        total, _, _ = rtrr_losses(
            model, batch, DESK_WEIGHTS, pair=pair, offsets1=off1, offsets2=off2
        )
        return total

    model.zero_grad()
    objective().backward()
    grads = {n: p.grad.clone() for n, p in model.named_parameters()}
    dead = [n for n, gr in grads.items() if float(gr.abs().max()) == 0.0]

    # One directional probe per parameter tensor, along its own gradient.
    # Bilinear sampling makes the loss piecewise-smooth; when a probe lands
    # on a kink the base point is shifted by 3h along the same direction
    # (with the analytic derivative recomputed there) before giving up.
    h = 1e-4
    rels = []
    for name, p in model.named_parameters():
        norm = float(grads[name].norm())
        if norm == 0.0:
            rels.append(float("inf"))
            continue
        u = grads[name] / norm
        best = float("inf")
        for k in range(4):
            with torch.no_grad():
                p.add_(3 * h * k * u)
            if k == 0:
                d_an = float(grads[name].flatten() @ u.flatten())
            else:
                model.zero_grad()
                objective().backward()
                d_an = float(p.grad.flatten() @ u.flatten())
            with torch.no_grad():
                p.add_(h * u)
                lp = float(objective())
                p.add_(-2 * h * u)
                lm = float(objective())
                p.add_(h * u)
                p.add_(-3 * h * k * u)
            d_fd = (lp - lm) / (2 * h)
            rel = abs(d_an - d_fd) / max(abs(d_an), abs(d_fd), 1e-12)
            best = min(best, rel)
            if rel <= 1e-3:
                break
        rels.append(best)
    rels = np.asarray(rels)
    frac_ok = float((rels <= 1e-3).mean())
    dt = time.time() - t0
    ok = frac_ok >= 0.99 and not dead and dt < 300
    _verdict(
        "03 gradient audit",
        ok,
        "%d tensors: %.1f%% within 1e-3 (worst %.2e), zero-grad tensors %d, %.0fs (<300s)"
        % (len(rels), 100 * frac_ok, float(rels.max()), len(dead), dt),
    )


def test_04_second_pass_gradients_flow_through_first_pass():
    """Detaching the first pass's output measurably changes the gradient."""
    t0 = time.time()
    model, batch, pair, off1, off2 = _audit_point()

    def grad_vec(**kwargs):
        model.zero_grad(set_to_none=True)
        total, _, _ = rtrr_losses(model, batch, DESK_WEIGHTS, offsets1=off1, **kwargs)
        total.backward()
        return torch.cat(
            [
                (p.grad if p.grad is not None else torch.zeros_like(p)).flatten()
                for p in model.parameters()
            ]
        ).clone()

    g_single = grad_vec(pair=None)
    g_detached = grad_vec(pair=pair, offsets2=off2, detach_reference=True)
    g_full = grad_vec(pair=pair, offsets2=off2)

    def cosine(a, b):
        return float((a @ b) / (a.norm() * b.norm()))

    cos = (
        cosine(g_single, g_detached),
        cosine(g_single, g_full),
        cosine(g_detached, g_full),
    )
    dt = time.time() - t0
    ok = all(c < 0.999 for c in cos) and dt < 60
    _verdict(
        "04 two-pass gradient coupling",
        ok,
        "pairwise cosines %.5f / %.5f / %.5f (each <0.999), %.1fs (<60s)"
        % (cos + (dt,)),
    )


def test_05_perspective_pair_contract():
    """Warped pairs keep magnitudes in band, tiny residuals, 4x consistency."""
    t0 = time.time()
    bases = []
    for i in range(4):
        r = np.random.default_rng(500 + i)
        hr = bicubic_resize(ImageBuffer(r.random((10, 10, 3)).astype(np.float32)), 16.0)
        bases.append((bicubic_resize(hr, 0.25), hr))
    corners = np.array([[0.0, 0.0], [160.0, 0.0], [160.0, 160.0], [0.0, 160.0]])
    rng = np.random.default_rng(77)
    mag_lo, mag_hi = np.inf, 0.0
    worst_resid, worst_mean = 0.0, 0.0
    for i in range(1000):
        lr, hr = bases[i % 4]
        replay = np.random.default_rng()
        replay.bit_generator.state = rng.bit_generator.state
        pair = make_perspective_pair(lr, hr, rng)
        offs = sample_vertex_offsets(replay, PerturbationRange())
        mags = np.abs(offs)
        mag_lo = min(mag_lo, float(mags.min()))
        mag_hi = max(mag_hi, float(mags.max()))
        resid = float(np.abs(pair.h_hr.apply(corners) - (corners + offs)).max())
        worst_resid = max(worst_resid, resid)
        down = bicubic_resize(pair.hr_warped, 0.25)
        diff = np.abs(
            down.pixels[8:-8, 8:-8].astype(np.float64)
            - pair.lr_warped.pixels[8:-8, 8:-8].astype(np.float64)
        ).mean()
        worst_mean = max(worst_mean, float(diff))
    dt = time.time() - t0
    ok = (
        mag_lo >= 5.0 - 1e-9
        and mag_hi <= 20.0 + 1e-9
        and worst_resid <= 1e-8
        and worst_mean <= 3.0 / 255.0
        and dt < 120
    )
    _verdict(
        "05 perspective-pair contract",
        ok,
        "1000 pairs: magnitudes [%.3f, %.3f] within [5,20], residual %.2e (<=1e-8), "
        "downsample mean %.5f (<=%.5f), %.0fs (<120s)"
        % (mag_lo, mag_hi, worst_resid, worst_mean, 3.0 / 255.0, dt),
    )


def test_06_matching_oracle():
    """Chunked matcher equals the quartic brute-force matcher bit for bit."""
    t0 = time.time()
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(50):
        h = int(rng.integers(5, 17))
        w = int(rng.integers(5, 17))
        hr_ = int(rng.integers(5, 17))
        wr_ = int(rng.integers(5, 17))
        c = int(rng.integers(1, 4))
        f_lr = rng.random((h, w, c))
        f_ref = rng.random((hr_, wr_, c))
        got = match_features(f_lr, f_ref)
        want_off, want_sc = brute_force_match(f_lr, f_ref)
        if not (
            np.array_equal(got.offsets, want_off)
            and np.array_equal(got.scores, want_sc.astype(np.float32))
        ):
            mismatches += 1
    f = np.random.default_rng(7).random((16, 16, 2))
    got = match_features(f, np.roll(f, (3, 5), axis=(0, 1)))
    # interior: away from the wrap seam, the halo, and the far border
    roll_ok = bool(np.all(got.offsets[1:12, 1:10] == np.array([3, 5])))
    dt = time.time() - t0
    ok = mismatches == 0 and roll_ok and dt < 60
    _verdict(
        "06 matching oracle",
        ok,
        "50 pairs: %d mismatches (offsets+scores, exact), rolled-copy interiors %s, %.1fs (<60s)"
        % (mismatches, "recovered" if roll_ok else "NOT recovered", dt),
    )


def test_07_metric_oracles():
    """Closed-form metric values and the five-reference canvas size."""
    t0 = time.time()
    base = np.full((16, 16, 1), 100.0, dtype=np.float32)
    a = ImageBuffer(base, peak=255.0, color_space="y")
    b = ImageBuffer(base + 1.0, peak=255.0, color_space="y")
    off_by_one = psnr(a, b)
    self_ssim = ssim(a, a)
    refs = [
        synth_image(700, 480, 480, feature_px=8),
        synth_image(701, 256, 320, feature_px=8),
        synth_image(702, 320, 256, feature_px=8),
        synth_image(703, 496, 320, feature_px=8),
        synth_image(704, 320, 496, feature_px=8),
    ]
    canvas = stitch_references(refs, cell=500, count=5)
    dt = time.time() - t0
    ok = (
        abs(off_by_one - 48.1308) <= 1e-3
        and self_ssim == 1.0
        and (canvas.height, canvas.width) == (500, 2500)
        and dt < 10
    )
    _verdict(
        "07 metric oracles",
        ok,
        "off-by-one PSNR %.4f dB (48.1308 +/- 1e-3), SSIM(a,a) %.1f, canvas %dx%d (2500x500), %.1fs (<10s)"
        % (off_by_one, self_ssim, canvas.width, canvas.height, dt),
    )


# ---------------------------------------------------------------------------
# Desk-scale runs shared by tests 08 and 10.

DESK_NETWORK = FASConfig(
    n_feats=8, n_content_blocks=2, n_resblocks=2, num_filters=4, stacks_per_scale=2
)


def _desk_images():
    out = []
    for i in range(8):
        r = np.random.default_rng(1000 + i)
        base = r.random((40, 40, 3)).astype(np.float32)
        out.append(bicubic_resize(ImageBuffer(base), 4.0))
    return out


def _run_desk(out_dir, resume_from=None):
    cfg = TrainConfig(
        iterations=2000,
        batch_size=2,
        patch_hr=48,
        lr=1e-4,
        seed=123,
        checkpoint_interval=1000,
        log_interval=10,
        profile="desk",
    )
    torch.manual_seed(7)
    model = RefSRNetwork(DESK_NETWORK)
    dataset = InMemoryPairs([(img, img) for img in _desk_images()])
    train_loop(model, dataset, cfg, DESK_WEIGHTS, out_dir, resume_from=resume_from)
    return model


def _read_log(out_dir):
    records = []
    with open(out_dir / "metrics.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            rec.pop("seconds")
            records.append(rec)
    return records


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    seconds = {}
    t0 = time.time()
    model = _run_desk(root / "a")
    seconds["a"] = time.time() - t0
    t0 = time.time()
    _run_desk(root / "b")
    seconds["b"] = time.time() - t0
    t0 = time.time()
    _run_desk(root / "c", resume_from=root / "a" / "ckpt_00001000.ckpt")
    seconds["c"] = time.time() - t0
    return {"root": root, "model": model, "seconds": seconds}


def test_08_desk_overfit_smoke(desk_runs):
    """2000 desk iterations on 8 self-referenced images beat bicubic."""
    model = desk_runs["model"]
    model_db, base_db = [], []
    for img in _desk_images():
        lr = bicubic_resize(img, 0.25)
        sr = super_resolve(model, lr, img)
        up = bicubic_resize(lr, 4.0)
        model_db.append(psnr(rgb_to_y(sr), rgb_to_y(img)))
        base_db.append(psnr(rgb_to_y(up), rgb_to_y(img)))
    gain = float(np.mean(model_db) - np.mean(base_db))

    # Records are means over 10-iteration windows, so 20 consecutive records
    # average exactly 200 iterations. "Monotone decreasing" for a stochastic
    # mini-batch loss: net drop, with no point rising above the running
    # minimum by more than a quarter of that drop.
    totals = [r["total"] for r in _read_log(desk_runs["root"] / "a")]
    ma = np.convolve(totals, np.ones(20) / 20.0, mode="valid")
    drop = float(ma[0] - ma[-1])
    excess = float((ma - np.minimum.accumulate(ma)).max())
    dt = desk_runs["seconds"]["a"]
    ok = gain >= 1.5 and drop > 0 and excess <= 0.25 * drop and dt < 1800
    _verdict(
        "08 desk overfit smoke",
        ok,
        "Y-PSNR %.3f dB vs bicubic %.3f dB: gain %.3f dB (>=1.5); 200-iter MA drop %.2e, "
        "max rise above running min %.2e (<=%.2e); %.0fs (<1800s)"
        % (
            float(np.mean(model_db)),
            float(np.mean(base_db)),
            gain,
            drop,
            excess,
            0.25 * drop,
            dt,
        ),
    )


def test_09_ablation_plumbing():
    """The four incremental configurations differ structurally as specified."""
    t0 = time.time()
    variants = {
        "baseline": (False, False, False),
        "+pfa": (True, False, False),
        "+ras": (True, True, False),
        "+rtrr": (True, True, True),
    }
    echoes, models, cfgs = {}, {}, {}
    for name, (pfa, ras, rtrr) in variants.items():
        cfg = load_run_config(
            sets=[
                "training.profile=desk",
                "network.stacks_per_scale=3",
                "network.num_filters=2",
                "network.enable_pfa=%s" % ("true" if pfa else "false"),
                "network.enable_ras=%s" % ("true" if ras else "false"),
                "training.enable_rtrr=%s" % ("true" if rtrr else "false"),
            ]
        )
        cfgs[name] = cfg
        echoes[name] = toml.dumps(resolved_dict(cfg))
        torch.manual_seed(0)
        models[name] = RefSRNetwork(cfg.network)

    names = list(variants)
    distinct = all(
        echoes[a] != echoes[b] for i, a in enumerate(names) for b in names[i + 1 :]
    )

    def fas_per_upper_scale(m):
        return len(m.fas2), len(m.fas4)

    def has_bank(m):
        return any(isinstance(mod, FilterBank) for mod in m.modules())

    def param_count(m):
        return sum(p.numel() for p in m.parameters())

    pfa_ok = (
        fas_per_upper_scale(models["baseline"]) == (1, 1)
        and fas_per_upper_scale(models["+pfa"]) == (3, 3)
        and param_count(models["+pfa"]) > param_count(models["baseline"])
    )
    ras_ok = (
        not has_bank(models["baseline"])
        and not has_bank(models["+pfa"])
        and has_bank(models["+ras"])
        and param_count(models["+ras"]) != param_count(models["+pfa"])
    )

    # data-flow check: count top-level forward calls in one optimizer step
    sample_rng = np.random.default_rng(0)
    imgs = [synth_image(800 + i, 24, 24, feature_px=4) for i in range(2)]
    samples = [make_train_sample(im, im, sample_rng, patch_hr=16) for im in imgs]
    passes = {}
    for name in ("+ras", "+rtrr"):
        model, cfg = models[name], cfgs[name]
        calls = []
        handle = model.register_forward_hook(lambda m, args, out: calls.append(1))
        rtrr_step(
            model,
            samples,
            np.random.default_rng(1),
            cfg.losses,
            enable_rtrr=cfg.training.enable_rtrr,
            enable_pt=cfg.training.enable_pt,
        )
        handle.remove()
        passes[name] = len(calls)
    rtrr_ok = passes == {"+ras": 1, "+rtrr": 2}

    dt = time.time() - t0
    ok = distinct and pfa_ok and ras_ok and rtrr_ok
    _verdict(
        "09 ablation plumbing",
        ok,
        "echoes distinct %s; FAS per upper scale %s->%s; filter bank %s->%s; "
        "forward passes per step %d->%d; %.1fs"
        % (
            distinct,
            fas_per_upper_scale(models["baseline"]),
            fas_per_upper_scale(models["+pfa"]),
            has_bank(models["+pfa"]),
            has_bank(models["+ras"]),
            passes["+ras"],
            passes["+rtrr"],
            dt,
        ),
    )


def test_10_determinism_and_resume(desk_runs):
    """Same seed reproduces the log; resuming at 1000 matches uninterrupted."""
    root = desk_runs["root"]
    log_a = _read_log(root / "a")
    log_b = _read_log(root / "b")
    repeat_ok = log_a == log_b

    log_c = _read_log(root / "c")
    tail = [r for r in log_a if r["iter"] > 1000]
    resume_log_ok = log_c == tail

    final_a = load_checkpoint(root / "a" / "ckpt_00002000.ckpt")
    final_c = load_checkpoint(root / "c" / "ckpt_00002000.ckpt")
    resume_ckpt_ok = sorted(final_a.tensors) == sorted(final_c.tensors) and all(
        np.array_equal(final_a.tensors[k], final_c.tensors[k]) for k in final_a.tensors
    )
    ok = repeat_ok and resume_log_ok and resume_ckpt_ok
    _verdict(
        "10 determinism and resume",
        ok,
        "repeat log bit-identical: %s (%d records); resumed log matches tail: %s "
        "(%d records); final checkpoints bit-identical: %s"
        % (repeat_ok, len(log_a), resume_log_ok, len(log_c), resume_ckpt_ok),
    )
