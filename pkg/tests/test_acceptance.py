"""Acceptance criteria, one test each.

Every test prints a single PASS/FAIL line; the lines are repeated in an
"acceptance criteria" section at the end of the pytest run.
"""
import time

import numpy as np
import pytest

from gald.bench_harness import BenchConfig, fit_exponent, flop_model, run_sweep
from gald.ga_heads import GaConfig, ga_nonlocal, init_ga_params
from gald.ld_modules import (
    GaldConfig, Ldv1Config, Ldv2Config, gald_forward, init_gald_params, init_ld_params, ldv1_apply, ldv2_attention,
)
from gald.metrics import BOUNDARY_SLACKS, boundary_fscore, miou
from gald.nn_ops import count_macs
from gald.toy_pipeline import TrainConfig, run_ablation, synth_dataset, train_toy
from gald.verification import (
    GRAD_OPS, ldv2_full_coverage_vs_oracle, nonlocal_vs_oracle, run_checks, run_gradcheck, small_ga_config,
)


def test_dense_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    err = max(nonlocal_vs_oracle(seed) for seed in range(20))
    dt = time.perf_counter() - t0
    criterion("dense oracle equivalence", err <= 1e-10 and dt < 5,
              f"max abs err {err:.2e} over 20 seeds (tol 1e-10), {dt:.2f}s (limit 5s)")


def test_full_coverage_ldv2(criterion):
    t0 = time.perf_counter()
    err = max(ldv2_full_coverage_vs_oracle(seed, hw=(3, 3)) for seed in range(20))
    dt = time.perf_counter() - t0
    criterion("full-coverage LDv2 equals dense", err <= 1e-10 and dt < 5,
              f"max abs err {err:.2e} on 3x3 over 20 seeds (tol 1e-10), {dt:.2f}s (limit 5s)")


GRAD_DIMS = [(1, 2, 4, 4), (2, 2, 3, 4), (1, 3, 4, 3)]
GALD_COMBOS = [dict(ga=ga, ld=ld) for ga in ("psp", "aspp", "nonlocal", "cgnl") for ld in ("none", "v1", "v2")]


def test_gradient_correctness(criterion):
    t0 = time.perf_counter()
    worst, failures, runs = 0.0, [], 0
    for op in GRAD_OPS:
        for kwargs in GALD_COMBOS if op == "gald_forward" else [{}]:
            for seed in range(10):
                report = run_gradcheck(op, GRAD_DIMS[seed % 3], seed=seed, tol=1e-5, **kwargs)
                worst = max(worst, report.max_rel_error)
                runs += 1
                if not report.passed:
                    failures.append(f"{op}{kwargs or ''}@{seed}")
    dt = time.perf_counter() - t0
    criterion("gradient correctness", not failures and dt < 120,
              f"{runs} checks over {len(GRAD_OPS)} ops, worst rel err {worst:.2e} (tol 1e-5), "
              f"{dt:.1f}s (limit 120s){'; failed ' + ', '.join(failures) if failures else ''}")


def test_fusion_algebra(criterion):
    ga = small_ga_config("psp", 2, 4, 4)
    ldc = Ldv1Config(downsample_ratio=2)
    exact = True
    for seed in range(5):
        params = init_gald_params(ga, ldc, 2, seed=seed)
        params["ld.dw0.w"] = np.zeros_like(params["ld.dw0.w"])
        x = np.random.default_rng(seed).uniform(-1, 1, size=(1, 2, 4, 4))
        out, _ = gald_forward(x, ga, ldc, "gald", params)
        xg, _ = gald_forward(x, ga, None, "gald", params)
        exact &= np.array_equal(out[:, :2], 1.5 * xg[:, :2])
    rng = np.random.default_rng(0)
    xg = rng.uniform(0, 1, size=(2, 3, 5, 5))
    lo, hi = ldv1_apply(xg, np.zeros_like(xg))[0], ldv1_apply(xg, np.ones_like(xg))[0]
    mid = ldv1_apply(xg, rng.uniform(0, 1, size=xg.shape))[0]
    bounds = np.array_equal(lo, xg) and np.array_equal(hi, 2 * xg) and np.all(xg <= mid) and np.all(mid <= 2 * xg)
    criterion("fusion algebra", exact and bounds,
              f"zero mask gives 1.5*X_g exactly: {exact}; X_g <= X_gald <= 2*X_g at M in {{0, U, 1}}: {bounds}")


def test_complexity_model(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = []
    gcfg = GaConfig("nonlocal", reduced_channels=16, internal_downsample=1)
    lcfg = Ldv2Config(kernel=5, dilation=1, reduced_channels=16)
    gp, lp = init_ga_params(gcfg, 16, 0), init_ld_params(lcfg, 16, 0)
    for h in (4, 8, 16, 32):
        x = rng.uniform(-1, 1, size=(1, 16, h, h))
        with count_macs() as nl:
            ga_nonlocal(x, gcfg, gp)
        with count_macs() as ld:
            ldv2_attention(x, x, lcfg, lp)
        if nl.count != flop_model("nonlocal", h, h, 16) or ld.count != flop_model("ldv2", h, h, 16, 5):
            mismatches.append(h)
    ratio = flop_model("nonlocal", 64, 64, 16) / flop_model("ldv2", 64, 64, 16, 5)
    dt = time.perf_counter() - t0
    criterion("complexity model", not mismatches and ratio == 163.84 and dt < 30,
              f"MAC readouts equal model at H=4,8,16,32 (mismatch at {mismatches or 'none'}); "
              f"H=64 ratio {ratio!r}; {dt:.2f}s (limit 30s)")


@pytest.mark.slow
def test_empirical_scaling(criterion):
    t0 = time.perf_counter()
    records = run_sweep(["nonlocal", "ldv2"], [(s, s) for s in (8, 16, 32, 64)], BenchConfig(c_reduced=16, k=5))
    b_nl = fit_exponent([r for r in records if r.method == "nonlocal"]).exponent
    b_ld = fit_exponent([r for r in records if r.method == "ldv2"]).exponent
    dt = time.perf_counter() - t0
    criterion("empirical scaling", 1.7 <= b_nl <= 2.3 and 0.8 <= b_ld <= 1.3 and dt < 180,
              f"nonlocal b={b_nl:.3f} (want [1.7, 2.3]), LDv2 b={b_ld:.3f} (want [0.8, 1.3]), {dt:.1f}s (limit 180s)")


def test_locality(criterion):
    cfg = Ldv2Config(kernel=3, dilation=1, reduced_channels=2)
    params = init_ld_params(cfg, 2, seed=1)
    rng = np.random.default_rng(0)
    xg, xl = rng.uniform(-1, 1, size=(2, 1, 2, 8, 8))
    base, _ = ldv2_attention(xg, xl, cfg, params)
    ys, xs = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    leaks = misses = 0
    for target in (0, 1):
        for py in range(8):
            for px in range(8):
                inputs = [xg.copy(), xl.copy()]
                inputs[target][0, :, py, px] += 3.0
                out, _ = ldv2_attention(*inputs, cfg, params)
                far = np.maximum(np.abs(ys - py), np.abs(xs - px)) > 1
                leaks += not np.array_equal(out[0][:, far], base[0][:, far])
                misses += np.allclose(out[0][:, py, px], base[0][:, py, px])
    criterion("locality", leaks == 0 and misses == 0,
              f"128 single-pixel perturbations on 8x8 (k=3, r=1): {leaks} leaks beyond radius 1, "
              f"{misses} without local effect")


def test_metrics(criterion):
    square = np.zeros((40, 40), dtype=int)
    square[10:26, 8:30] = 1
    identical = all(boundary_fscore(square, square, 1, s) == 1.0 for s in BOUNDARY_SLACKS)
    rng = np.random.default_rng(0)
    monotone = 0
    for _ in range(100):
        a, b = (rng.random((24, 24)) < 0.5).astype(int), np.zeros((24, 24), int)
        y, x, s = rng.integers(0, 12, size=3)
        b[y:y + s + 4, x:x + s + 4] = 1
        scores = [boundary_fscore(a, b, 1, s) for s in range(13)]
        monotone += all(p <= q for p, q in zip(scores, scores[1:]))
    mean, _ = miou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
    criterion("metrics", identical and monotone == 100 and mean == 7 / 12,
              f"identical maps F=1 at {BOUNDARY_SLACKS}: {identical}; monotone on {monotone}/100 pairs; "
              f"hand-case mIoU {mean!r} (want 7/12)")


@pytest.mark.slow
def test_directional_ablation(criterion):
    t0 = time.perf_counter()
    result = run_ablation()
    dt = time.perf_counter() - t0
    f = result["mean_boundary_f"]
    criterion("directional ablation", f["ga_ldv2"] >= f["ga_only"] and dt < 900,
              f"mean boundary F@3 over 5 seeds: GA+LDv2 {f['ga_ldv2']:.4f}, GA+LDv1 {f['ga_ldv1']:.4f}, "
              f"GA-only {f['ga_only']:.4f}; ordering {' > '.join(result['ordering'])}; {dt:.0f}s (limit 900s)")


def test_determinism(criterion):
    def dataset():
        return b"".join(s.image.tobytes() + s.labels.tobytes() for s in synth_dataset(7, 5))

    tiny = TrainConfig(seed=5, epochs=1, samples=8, batch=4, size=32, channels=4, eval_samples=4,
                       head=GaldConfig(ga=GaConfig("aspp", reduced_channels=4, aspp_rates=(2, 4)),
                                       ld=Ldv2Config(reduced_channels=4)))

    def training():
        return train_toy(tiny).to_json()

    def verify():
        return [(r.name, r.status, r.detail) for r in run_checks(n_seeds=5)]

    same = {name: fn() == fn() for name, fn in (("dataset", dataset), ("training", training), ("verify", verify))}
    criterion("determinism", all(same.values()),
              "bit-identical across two runs: " + ", ".join(f"{k} {v}" for k, v in same.items()))

