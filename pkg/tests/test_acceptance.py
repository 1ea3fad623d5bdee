"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` / ``[FAIL]`` line with the measured
values. Run on its own with::

    python3 -m pytest tests/test_acceptance.py -s -q
"""

import copy
import math
import sys
import time

import numpy as np
import pytest
import torch

from hybridstereo.analysis import (
    evaluate_landscape,
    filter_norm_ratios,
    grid_axis,
    pca_trajectory,
    random_direction,
)
from hybridstereo.attention import BlockConfig, TransformerBlock, WindowAttention, shifted_mask, window_partition
from hybridstereo.checkpoint import load_checkpoint, save_checkpoint
from hybridstereo.cost_volume import build_feature_volume, soft_argmax_projection
from hybridstereo.datasets import StereoSample, read_pfm, stack_batch, synth_generate, write_pfm
from hybridstereo.geometry import DisparityMap, warp_right_to_left
from hybridstereo.metrics import bad_ratio, epe, evaluate_test19, psnr, rmse, ssim
from hybridstereo.networks import (
    REFERENCE_PARAMS_M,
    CMatchNet,
    MatchNetConfig,
    TMatchNet,
    assemble_variant,
    format_parameter_report,
    parameter_report,
    toy_config,
)
from hybridstereo.training import ParameterSnapshot, TrainConfig, cosine_lr, random_crop_pair, smooth_l1_loss, train
from oracles import (
    dense_attention,
    directional_fd_check,
    feature_volume_loops,
    relative_bias_loops,
    scalar_bad,
    scalar_epe,
    scalar_psnr,
    scalar_rmse,
    ssim_loops,
)


def _emit(capsys, number, checks, runtime=None):
    """Print one line for the criterion and return whether every check passed."""
    ok = all(c[1] for c in checks)
    parts = [f"{name}={value}" + ("" if passed else " (failed)") for name, passed, value in checks]
    if runtime is not None:
        parts.append(f"runtime={runtime:.1f}s")
    with capsys.disabled():
        sys.stdout.write(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: " + "; ".join(parts) + "\n")
    return ok


def _randomized(module, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)
    return module


def _fd_end_to_end(model32, left, right, weights, seed):
    """Directional derivative of a toy model: float64 and float32 analytic vs central differences."""
    model64 = copy.deepcopy(model32).double()
    l64, r64, w64 = left.double(), right.double(), weights.double()
    _, _, rel64 = directional_fd_check(
        lambda: (model64(l64, r64) * w64).sum(), list(model64.parameters()), eps=1e-6, seed=seed
    )
    # float32 backprop checked against a central difference of the same weights;
    # the difference quotient is taken in float64 because float32 forward noise
    # through the whole network exceeds the tolerance on its own
    params32 = list(model32.parameters())
    grads = torch.autograd.grad((model32(left, right) * weights).sum(), params32)
    gen = torch.Generator().manual_seed(seed)
    v = [torch.randn(p.shape, generator=gen, dtype=torch.float64) for p in params32]
    norm = torch.sqrt(sum((t**2).sum() for t in v))
    v = [t / norm for t in v]
    analytic32 = sum(float((g.double() * t).sum()) for g, t in zip(grads, v))
    params64 = list(model64.parameters())
    eps = 1e-6
    with torch.no_grad():
        saved = [p.clone() for p in params64]
        for p, t in zip(params64, v):
            p.add_(eps * t)
        plus = float((model64(l64, r64) * w64).sum())
        for p, s, t in zip(params64, saved, v):
            p.copy_(s - eps * t)
        minus = float((model64(l64, r64) * w64).sum())
        for p, s in zip(params64, saved):
            p.copy_(s)
    numeric = (plus - minus) / (2 * eps)
    rel32 = abs(analytic32 - numeric) / max(abs(analytic32), abs(numeric))
    return rel64, rel32


def test_criterion_1_gradients(capsys):
    start = time.time()
    torch.manual_seed(0)
    worst64, worst32 = {}, {}

    def record(name, rel64, rel32):
        worst64[name] = max(worst64.get(name, 0.0), rel64)
        worst32[name] = max(worst32.get(name, 0.0), rel32)

    for dims, window in (((4, 4), (2, 2)), ((2, 4, 4), (2, 2, 2))):
        attn = _randomized(WindowAttention(8, window, 2).double(), 1)
        mask = shifted_mask(dims, window, tuple(w // 2 for w in window)).double()
        x = torch.randn(1, *dims, 8, dtype=torch.float64, requires_grad=True)
        wts = torch.randn(window_partition(x, window).shape, dtype=torch.float64)

        def f(a=attn, t=x, m=mask, wt=wts, win=window):
            return (a(window_partition(t, win), window=win, mask=m.to(t.dtype)) * wt.to(t.dtype)).sum()

        rel64 = max(directional_fd_check(f, [x] + list(attn.parameters()), 1e-6, seed=s)[2] for s in range(3))
        attn32, x32 = attn.float(), x.detach().float().requires_grad_(True)

        def f32(a=attn32, t=x32, m=mask, wt=wts, win=window):
            return (a(window_partition(t, win), window=win, mask=m.float()) * wt.float()).sum()

        rel32 = max(directional_fd_check(f32, [x32] + list(attn32.parameters()), 1e-1, seed=s, order=4)[2] for s in range(3))
        record(f"window_msa_{len(dims)}d", rel64, rel32)

    for dims, window in (((6, 6), (3, 3)), ((4, 4, 4), (2, 2, 2))):
        block = _randomized(TransformerBlock(8, BlockConfig.alternating(window, 1, len(dims), num_heads=2)).double(), 2)
        x = torch.randn(1, *dims, 8, dtype=torch.float64, requires_grad=True)
        wts = torch.randn(1, *dims, 8, dtype=torch.float64)
        rel64 = max(
            directional_fd_check(lambda: (block(x) * wts).sum(), [x] + list(block.parameters()), 1e-6, seed=s)[2]
            for s in range(3)
        )
        block32, x32 = block.float(), x.detach().float().requires_grad_(True)
        rel32 = max(
            directional_fd_check(
                lambda: (block32(x32) * wts.float()).sum(), [x32] + list(block32.parameters()), 1e-1, seed=s, order=4
            )[2]
            for s in range(3)
        )
        record(f"transformer_block_{len(dims)}d", rel64, rel32)

    cost = torch.randn(2, 6, 3, 4, dtype=torch.float64, requires_grad=True)
    wts = torch.randn(2, 3, 4, dtype=torch.float64)
    rel64 = directional_fd_check(lambda: (soft_argmax_projection(cost) * wts).sum(), [cost], 1e-6)[2]
    cost32 = cost.detach().float().requires_grad_(True)
    rel32 = max(
        directional_fd_check(lambda: (soft_argmax_projection(cost32) * wts.float()).sum(), [cost32], 1e-1, seed=s, order=4)[2]
        for s in range(3)
    )
    record("soft_argmax", rel64, rel32)

    g = torch.Generator().manual_seed(4)
    pred = (torch.randn(2, 5, 5, generator=g, dtype=torch.float64) * 3).requires_grad_(True)
    # residuals kept 0.2 away from the |e| = 1 seam, where the loss is only C1;
    # elsewhere it is piecewise quadratic and central differences are exact
    mag = torch.where(torch.rand(2, 5, 5, generator=g) < 0.5, torch.rand(2, 5, 5, generator=g) * 0.8, 1.2 + 3 * torch.rand(2, 5, 5, generator=g))
    sign = torch.where(torch.rand(2, 5, 5, generator=g) < 0.5, -1.0, 1.0)
    gt = pred.detach() - (sign * mag).double()
    valid = torch.rand(2, 5, 5, generator=g) > 0.2
    rel64 = directional_fd_check(lambda: smooth_l1_loss(pred, gt, valid), [pred], 1e-6)[2]
    pred32 = pred.detach().float().requires_grad_(True)
    rel32 = max(
        directional_fd_check(lambda: smooth_l1_loss(pred32, gt.float(), valid), [pred32], 1e-1, seed=s)[2]
        for s in range(3)
    )
    record("smooth_l1", rel64, rel32)

    model = assemble_variant(toy_config("type1"))
    left, right = torch.rand(1, 3, 24, 24, generator=g), torch.rand(1, 3, 24, 24, generator=g)
    wts = torch.randn(1, 24, 24, generator=g)
    for seed in range(3):
        record("toy_type1", *_fd_end_to_end(model, left, right, wts, seed))

    runtime = time.time() - start
    checks = [(f"{k}[f64]", v < 1e-4, f"{v:.1e}") for k, v in worst64.items()]
    checks += [(f"{k}[f32]", v < 1e-3, f"{v:.1e}") for k, v in worst32.items()]
    checks.append(("runtime<300s", runtime < 300, f"{runtime:.0f}s"))
    assert _emit(capsys, 1, checks)


def test_criterion_2_oracle_equivalence(capsys):
    checks = []
    rng = np.random.default_rng(0)

    vol_err = 0.0
    for b, c, h, w, d in ((1, 2, 3, 5, 4), (2, 3, 4, 6, 7), (1, 1, 2, 3, 5)):
        fl, fr = torch.randn(b, c, h, w), torch.randn(b, c, h, w)
        ref = feature_volume_loops(fl.numpy(), fr.numpy(), d)
        vol_err = max(vol_err, float(np.abs(build_feature_volume(fl, fr, d).numpy() - ref).max()))
    checks.append(("cost_volume", vol_err == 0.0, f"{vol_err:.1e}"))

    attn_err = 0.0
    for dims in ((4, 5), (2, 3, 4)):
        attn = _randomized(WindowAttention(8, dims, 2).double(), 3)
        block = TransformerBlock(8, BlockConfig(dims, (0,) * len(dims), num_heads=2)).double()
        assert block.effective_window(dims) == (dims, (0,) * len(dims))
        x = torch.randn(2, *dims, 8, dtype=torch.float64)
        tokens = window_partition(x, dims)
        p = {n: t.detach().numpy() for n, t in attn.named_parameters()}
        ref = dense_attention(
            tokens.numpy(), p["qkv.weight"], p["qkv.bias"], p["proj.weight"], p["proj.bias"], 2,
            relative_bias_loops(p["relative_position_bias_table"], dims),
        )
        attn_err = max(attn_err, float(np.abs(attn(tokens, window=dims).detach().numpy() - ref).max()))
    checks.append(("window_attention", attn_err < 1e-10, f"{attn_err:.1e}"))

    metric_err = 0.0
    for h in range(1, 9):
        for w in range(1, 9):
            pred, gt = rng.uniform(0, 10, (h, w)), rng.uniform(0, 10, (h, w))
            mask = rng.random((h, w)) > 0.3
            mask.flat[0] = True
            errs = [
                epe(pred, gt, mask) - scalar_epe(pred, gt, mask),
                rmse(pred, gt, mask) - scalar_rmse(pred, gt, mask),
                psnr(pred / 10, gt / 10) - scalar_psnr(pred / 10, gt / 10),
            ] + [bad_ratio(pred, gt, mask, t) - scalar_bad(pred, gt, mask, t) for t in (2, 3, 5)]
            metric_err = max(metric_err, max(abs(e) for e in errs))
    # the 11x11 SSIM window needs images of at least 11 px a side
    for size in (11, 12, 13):
        a = rng.random((size, size))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        metric_err = max(metric_err, abs(ssim(a, b) - ssim_loops(a, b)))
    checks.append(("metrics", metric_err < 1e-9, f"{metric_err:.1e}"))

    thetas = np.cumsum(rng.normal(size=(11, 64)), axis=0)
    proj = pca_trajectory([ParameterSnapshot(i, t, 0.0) for i, t in enumerate(thetas)])
    m = thetas[:-1] - thetas[-1]
    _, s, vt = np.linalg.svd(m, full_matrices=False)
    ref = np.vstack([m @ vt[:2].T, [0.0, 0.0]])
    signs = np.sign(np.sum(proj.coords * ref, axis=0))
    pca_err = float(np.abs(proj.coords - ref * signs).max())
    checks.append(("pca_vs_svd", pca_err < 1e-6, f"{pca_err:.1e}"))
    assert _emit(capsys, 2, checks)


def test_criterion_3_shapes_and_variants(capsys):
    checks = []
    left, right = torch.rand(1, 3, 48, 48), torch.rand(1, 3, 48, 48)
    for variant in ("baseline", "type1", "type2", "type3"):
        model = assemble_variant(toy_config(variant))
        with torch.no_grad():
            disp = model(left, right)
        ok = disp.shape == (1, 48, 48) and float(disp.min()) >= 0 and float(disp.max()) <= 24
        checks.append((variant, ok, f"{tuple(disp.shape)} in [{float(disp.min()):.2f}, {float(disp.max()):.2f}]"))
    cfg = MatchNetConfig("transformer", layers=6, stages=3, channels=8, window=2)
    shapes = TMatchNet(cfg, 16).stage_shapes((1, 16, 8, 16, 16))
    halves = all((d1, h1, w1) == (d0 // 2, h0 // 2, w0 // 2) for (_, d0, h0, w0), (_, d1, h1, w1) in zip(shapes, shapes[1:]))
    checks.append(("tmatch_stages", halves and len(shapes) == 4, "->".join("x".join(map(str, s[1:])) for s in shapes)))
    cshapes = CMatchNet(MatchNetConfig("cnn", layers=6, stages=3, channels=8), 16).stage_shapes((1, 16, 8, 16, 16))
    checks.append(("cmatch_stages", [s[1:] for s in cshapes] == [s[1:] for s in shapes], "matches"))
    assert _emit(capsys, 3, checks)


@pytest.fixture(scope="module")
def overfit_run():
    data = synth_generate(0, 64, 64, 18.0, 4)
    model = assemble_variant(toy_config("type1"))
    cfg = TrainConfig(epochs=500, batch_size=4, crop=None, snapshots=False)
    start = time.time()
    result = train(model, data, cfg)
    return data, model, result, time.time() - start


def test_criterion_4_convergence(capsys, overfit_run):
    data, model, result, runtime = overfit_run
    iterations = len(result.epes)
    best = min(result.epes)
    checks = [
        ("iterations", iterations <= 500, iterations),
        ("train_epe", result.epes[-1] < 1.0, f"{result.epes[-1]:.3f}px"),
        ("best_epe", best < 1.0, f"{best:.3f}px"),
        ("runtime<900s", runtime < 900, f"{runtime:.0f}s"),
    ]
    assert _emit(capsys, 4, checks)


def test_criterion_5_landscape(capsys, overfit_run):
    data, model, _, _ = overfit_run
    batch = stack_batch(data)
    left, right, gt, valid = batch
    model.eval()
    with torch.no_grad():
        direct = float(smooth_l1_loss(model(left, right), gt, valid & (gt < model.dmax)))
    before = [p.detach().clone() for p in model.parameters()]
    delta, eta = random_direction(model, 1), random_direction(model, 2)
    ratio_err = max(
        float(np.abs(filter_norm_ratios(delta, model) - 1).max()),
        float(np.abs(filter_norm_ratios(eta, model) - 1).max()),
    )
    start = time.time()
    grid = evaluate_landscape(model, batch, delta, eta, grid_axis(41), grid_axis(41))
    runtime = time.time() - start
    center = abs(grid.losses[20, 20] - direct)
    identical = all(torch.equal(p, q) for p, q in zip(model.parameters(), before))
    checks = [
        ("L(0,0)-loss", center < 1e-6, f"{center:.1e}"),
        ("filter_norm_ratio_err", ratio_err < 1e-6, f"{ratio_err:.1e}"),
        ("params_bit_identical", identical, identical),
        ("grid", grid.losses.shape == (41, 41), "x".join(map(str, grid.losses.shape))),
        ("runtime<600s", runtime < 600, f"{runtime:.0f}s"),
    ]
    assert _emit(capsys, 5, checks)


def test_criterion_6_trajectory(capsys):
    data = synth_generate(1, 48, 48, 12.0, 4)
    result = train(assemble_variant(toy_config("type1")), data, TrainConfig(epochs=10, batch_size=2, crop=None))
    proj = pca_trajectory(result.snapshots)
    rng = np.random.default_rng(6)
    basis = np.linalg.qr(rng.normal(size=(200, 2)))[0].T
    final = rng.normal(size=200)
    planar = [final + a * basis[0] + b * basis[1] for a, b in rng.normal(size=(10, 2))] + [final]
    pproj = pca_trajectory([ParameterSnapshot(i, t, 0.0) for i, t in enumerate(planar)])
    planar_sum = float(pproj.explained.sum())
    checks = [
        ("snapshots", len(result.snapshots) == 11, len(result.snapshots)),
        ("v1>=v2", proj.explained[0] >= proj.explained[1], f"{proj.explained[0]:.4f}>={proj.explained[1]:.4f}"),
        ("theta_n_at_origin", bool(np.all(proj.coords[-1] == 0.0)), tuple(float(c) for c in proj.coords[-1])),
        ("planar_v1+v2", abs(planar_sum - 1) < 1e-6, f"{planar_sum:.9f}"),
    ]
    assert _emit(capsys, 6, checks)


def test_criterion_7_formats(capsys, tmp_path):
    rng = np.random.default_rng(7)
    pfm_ok = True
    for i in range(30):
        x = rng.normal(scale=10.0 ** rng.integers(-3, 4), size=(rng.integers(1, 9), rng.integers(1, 9))).astype(np.float32)
        bits = rng.integers(1, 2**23, size=x.size, dtype=np.uint32)
        subnormal = bits.view(np.float32).reshape(x.shape) * np.where(rng.random(x.shape) < 0.5, -1, 1).astype(np.float32)
        x = np.where(rng.random(x.shape) < 0.3, subnormal, x).astype(np.float32)
        path = tmp_path / f"{i}.pfm"
        write_pfm(x, path)
        pfm_ok &= np.array_equal(read_pfm(path).view(np.uint32), x.view(np.uint32))

    model = assemble_variant(toy_config("type3", seed=11))
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    ckpt_ok = all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), loaded.state_dict().values()))

    sample = StereoSample(np.zeros((2, 1080, 3)), np.zeros((2, 1080, 3)), DisparityMap(np.ones((2, 1080))))
    report, frames = evaluate_test19(lambda l, r: np.zeros(l.shape[:2]), [sample], crop_px=100)
    width = frames[0]["width"]
    checks = [
        ("pfm_bit_exact", bool(pfm_ok), "30 maps with negatives and subnormals"),
        ("checkpoint_bit_exact", ckpt_ok, ckpt_ok),
        ("test19_width", width == 880 and report.n_pixels == 2 * 880, f"1080->{width}"),
    ]
    assert _emit(capsys, 7, checks)


def test_criterion_8_recipe_constants(capsys):
    cfg = TrainConfig()
    first = cosine_lr(0, cfg.epochs - 1, cfg.lr_max, cfg.lr_min)
    last = cosine_lr(cfg.epochs - 1, cfg.epochs - 1, cfg.lr_max, cfg.lr_min)
    rng = np.random.default_rng(8)
    sample = StereoSample(rng.random((400, 500, 3)), rng.random((400, 500, 3)), DisparityMap(rng.random((400, 500))))
    crop = random_crop_pair(sample, cfg.crop, rng)
    checks = [
        ("lr(0)", first == 0.025, first),
        ("lr(T)", last == 0.001, last),
        ("momentum", cfg.momentum == 0.9, cfg.momentum),
        ("weight_decay", cfg.weight_decay == 3e-4, cfg.weight_decay),
        ("crop", crop.left.shape[:2] == (336, 336) and crop.gt_disparity.shape == (336, 336), crop.left.shape[:2]),
    ]
    assert _emit(capsys, 8, checks)


def test_criterion_9_synthetic_self_consistency(capsys):
    samples = synth_generate(9, 96, 128, 32.0, 20)
    worst, coverage = 0.0, []
    for s in samples:
        warped, valid = warp_right_to_left(s.right, s.gt_disparity)
        keep = valid & ~s.occlusion
        coverage.append(keep.mean())
        worst = max(worst, float(np.abs(warped - s.left)[keep].max()))
    checks = [
        ("samples", len(samples) == 20, len(samples)),
        ("max_error", worst < 1e-3, f"{worst:.1e}"),
        ("non_occluded_fraction", min(coverage) > 0.5, f"{min(coverage):.2f}-{max(coverage):.2f}"),
    ]
    assert _emit(capsys, 9, checks)


def test_criterion_10_parameter_report(capsys):
    """Diagnostic only: printed next to the reported counts, never gating."""
    rows = parameter_report()
    with capsys.disabled():
        sys.stdout.write("\n" + format_parameter_report(rows) + "\n")
    summary = ", ".join(f"{r['variant']} {r['params_m']:.2f}M (ref {REFERENCE_PARAMS_M[r['variant']]}M)" for r in rows)
    _emit(capsys, 10, [("report", True, summary + "; non-gating, exact match not expected")])
    assert len(rows) == 4 and all(math.isfinite(r["params_m"]) for r in rows)
