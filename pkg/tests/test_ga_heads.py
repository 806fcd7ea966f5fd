import numpy as np
import pytest

from gald import nn_ops as ops
from gald.bench_harness import flop_model
from gald.ga_heads import (
    GA_KINDS, GaConfig, dense_attention, ga_aspp, ga_cgnl, ga_forward, ga_nonlocal, ga_param_shapes,
    ga_psp, init_ga_params,
)
from gald.nn_ops import ConvWeights, count_macs
from gald.oracles import dense_attention_oracle
from gald.tensor_core import ShapeError
from gald.verification import nonlocal_vs_oracle, run_gradcheck


def rand(*shape, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=shape)


def conv(x, k, b=None, **kw):
    return ops.conv2d(x, ConvWeights(k, b, **kw))[0]


def identity_on_first(c_out, c_in):
    w = np.zeros((c_out, c_in, 1, 1))
    w[np.arange(c_out), np.arange(c_out), 0, 0] = 1.0
    return w


class TestConfig:
    def test_defaults(self):
        assert GaConfig("psp").psp_bins == (1, 2, 3, 6)
        assert GaConfig("aspp").aspp_rates == (6, 12, 18)
        assert GaConfig("nonlocal").downsample == 2
        assert GaConfig("cgnl").downsample == 2
        assert GaConfig("psp").downsample == 1
        assert GaConfig("aspp", internal_downsample=2).downsample == 2

    def test_invalid(self):
        with pytest.raises(ValueError):
            GaConfig("transformer")
        with pytest.raises(ValueError):
            GaConfig("nonlocal", internal_downsample=3)
        with pytest.raises(ValueError):
            GaConfig("aspp", aspp_rates=(0,))
        with pytest.raises(ValueError):
            ga_param_shapes(GaConfig("nonlocal", reduced_channels=8), 4)
        with pytest.raises(ShapeError):
            ga_param_shapes(GaConfig("cgnl", reduced_channels=3, cgnl_groups=2), 4)

    def test_entry_point_checks_kind(self):
        cfg = GaConfig("psp", psp_bins=(1,))
        with pytest.raises(ValueError):
            ga_aspp(rand(1, 2, 4, 4), cfg, init_ga_params(cfg, 2))


@pytest.mark.parametrize("kind", GA_KINDS)
def test_shape_preserved(kind):
    cfg = GaConfig(kind, reduced_channels=2, psp_bins=(1, 2), aspp_rates=(1, 3), cgnl_groups=2)
    x = rand(2, 4, 8, 6)
    out, back = ga_forward(x, cfg, init_ga_params(cfg, 4))
    assert out.shape == x.shape
    gx, gp = back(np.ones_like(out))
    assert gx.shape == x.shape and set(gp) == set(ga_param_shapes(cfg, 4))


class TestPsp:
    def test_constant_input_constant_output(self):
        cfg = GaConfig("psp", reduced_channels=2, psp_bins=(1, 2, 3))
        params = init_ga_params(cfg, 3, seed=1)
        params["fuse.w"] = identity_on_first(3, 3 + 3 * 2)
        out, _ = ga_psp(np.full((1, 3, 6, 6), 0.7), cfg, params)
        assert np.allclose(out, out[:, :, :1, :1], atol=1e-14, rtol=0)

    def test_zero_branch_reduces_to_fusion_of_x(self):
        cfg = GaConfig("psp", reduced_channels=2, psp_bins=(1,))
        params = init_ga_params(cfg, 3, seed=2)
        params["psp0.w"] = np.zeros_like(params["psp0.w"])
        x = rand(1, 3, 4, 4, seed=3)
        out, _ = ga_psp(x, cfg, params)
        ref = conv(x, params["fuse.w"][:, :3], params["fuse.b"])
        assert np.allclose(out, ref, atol=1e-14, rtol=0)

    def test_matches_composition(self):
        cfg = GaConfig("psp", reduced_channels=2, psp_bins=(1, 2))
        params = init_ga_params(cfg, 3, seed=4)
        x = rand(1, 3, 4, 4, seed=5)
        out, _ = ga_psp(x, cfg, params)
        branches = [x]
        for i, b in enumerate((1, 2)):
            pooled = ops.avg_pool_adaptive(x, b)[0]
            branches.append(ops.bilinear_upsample(conv(pooled, params[f"psp{i}.w"]), 4, 4)[0])
        ref = conv(np.concatenate(branches, axis=1), params["fuse.w"], params["fuse.b"])
        assert np.abs(out - ref).max() <= 1e-12

    def test_bin_too_large(self):
        cfg = GaConfig("psp", reduced_channels=2, psp_bins=(1, 6))
        with pytest.raises(ShapeError):
            ga_psp(rand(1, 2, 4, 4), cfg, init_ga_params(cfg, 2))


class TestAspp:
    def test_zero_branches(self):
        cfg = GaConfig("aspp", reduced_channels=3, aspp_rates=(1, 2))
        params = {k: np.zeros_like(v) for k, v in init_ga_params(cfg, 3, seed=1).items()}
        params["aspp_1x1.w"] = rand(3, 3, 1, 1, seed=2)
        params["fuse.w"] = identity_on_first(3, 4 * 3)
        x = rand(1, 3, 5, 5, seed=3)
        out, _ = ga_aspp(x, cfg, params)
        assert np.allclose(out, conv(x, params["aspp_1x1.w"]), atol=1e-14, rtol=0)

    def test_constant_input_constant_interior(self):
        cfg = GaConfig("aspp", reduced_channels=2, aspp_rates=(1, 2))
        params = init_ga_params(cfg, 2, seed=4)
        out, _ = ga_aspp(np.full((1, 2, 9, 9), 1.3), cfg, params)
        # pixels at least max(rate) away from the border never read padding
        interior = out[:, :, 2:-2, 2:-2]
        assert np.allclose(interior, interior[:, :, :1, :1], atol=1e-14, rtol=0)

    def test_matches_composition(self):
        cfg = GaConfig("aspp", reduced_channels=2, aspp_rates=(2, 4))
        params = init_ga_params(cfg, 3, seed=5)
        x = rand(1, 3, 6, 6, seed=6)
        out, _ = ga_aspp(x, cfg, params)
        branches = [conv(x, params["aspp_1x1.w"])]
        for i, rate in enumerate((2, 4)):
            branches.append(conv(x, params[f"aspp{i}.w"], padding=rate, dilation=rate))
        pooled = conv(x.mean(axis=(2, 3), keepdims=True), params["aspp_pool.w"])
        branches.append(np.broadcast_to(pooled, (1, 2, 6, 6)))
        ref = conv(np.concatenate(branches, axis=1), params["fuse.w"], params["fuse.b"])
        assert np.abs(out - ref).max() <= 1e-12

    def test_rate_too_large(self):
        cfg = GaConfig("aspp", reduced_channels=2, aspp_rates=(4,))
        with pytest.raises(ShapeError):
            ga_aspp(rand(1, 2, 4, 4), cfg, init_ga_params(cfg, 2))


class TestNonlocal:
    def test_single_position(self):
        cfg = GaConfig("nonlocal", reduced_channels=2)
        params = init_ga_params(cfg, 3, seed=1)
        x = rand(1, 3, 2, 2, seed=2)
        out, _ = ga_nonlocal(x, cfg, params)
        pooled = x.mean(axis=(2, 3), keepdims=True)
        back_proj = conv(conv(pooled, params["g.w"]), params["out.w"])
        assert np.allclose(out, x + back_proj, atol=1e-14, rtol=0)

    def test_zero_value_path_is_residual(self):
        cfg = GaConfig("nonlocal", reduced_channels=2)
        params = init_ga_params(cfg, 3, seed=3)
        params["g.w"] = np.zeros_like(params["g.w"])
        x = rand(1, 3, 4, 4, seed=4)
        out, _ = ga_nonlocal(x, cfg, params)
        assert np.array_equal(out, x)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_oracle(self, seed):
        assert nonlocal_vs_oracle(seed) <= 1e-10

    def test_affinity_rows_sum_to_one(self):
        # with every value vector equal to one, each output is the row sum
        q, k = rand(1, 3, 4, 4, seed=5) * 4, rand(1, 3, 4, 4, seed=6) * 4
        out, _ = dense_attention(q, k, np.ones((1, 3, 4, 4)))
        assert np.abs(out - 1.0).max() <= 1e-12

    def test_mac_count_matches_model(self):
        cfg = GaConfig("nonlocal", reduced_channels=2, internal_downsample=1)
        params = init_ga_params(cfg, 3)
        with count_macs() as c:
            ga_nonlocal(rand(1, 3, 4, 4), cfg, params)
        assert c.count == flop_model("nonlocal", 4, 4, 2) == 1024

    def test_downsample_counts_reduced_grid(self):
        cfg = GaConfig("nonlocal", reduced_channels=2)
        with count_macs() as c:
            ga_nonlocal(rand(1, 3, 8, 8), cfg, init_ga_params(cfg, 3))
        assert c.count == 2 * 2 * 16 * 16

    def test_indivisible_downsample(self):
        cfg = GaConfig("nonlocal", reduced_channels=2)
        with pytest.raises(ShapeError):
            ga_nonlocal(rand(1, 2, 5, 4), cfg, init_ga_params(cfg, 2))


class TestCgnl:
    def test_zero_value_path_is_residual(self):
        cfg = GaConfig("cgnl", reduced_channels=2, internal_downsample=1)
        params = init_ga_params(cfg, 3, seed=1)
        params["g.w"] = np.zeros_like(params["g.w"])
        x = rand(1, 3, 3, 3, seed=2)
        assert np.array_equal(ga_cgnl(x, cfg, params)[0], x)

    def test_associativity(self):
        r = np.random.default_rng(3)
        q, k, v = (r.uniform(-1, 1, size=(9, 1)) for _ in range(3))
        assert np.abs((q @ k.T) @ v - q @ (k.T @ v)).max() <= 1e-10

    def test_matches_dense_linear_form(self):
        cfg = GaConfig("cgnl", reduced_channels=2, cgnl_groups=1, internal_downsample=1)
        params = init_ga_params(cfg, 3, seed=4)
        x = rand(1, 3, 3, 3, seed=5)
        out, _ = ga_cgnl(x, cfg, params)
        q, k, v = (conv(x, params[f"{n}.w"]).reshape(-1, 1) for n in ("theta", "phi", "g"))
        length = q.shape[0]
        att = ((q @ k.T) @ v / length).reshape(1, 2, 3, 3)
        assert np.abs(out - (x + conv(att, params["out.w"]))).max() <= 1e-12

    def test_groups_are_independent(self):
        cfg = GaConfig("cgnl", reduced_channels=2, cgnl_groups=2, internal_downsample=1)
        params = init_ga_params(cfg, 4, seed=6)
        x = rand(1, 4, 3, 3, seed=7)
        base, _ = ga_cgnl(x, cfg, params)
        x2 = x.copy()
        x2[:, 2:] += rand(1, 2, 3, 3, seed=8)
        moved, _ = ga_cgnl(x2, cfg, params)
        assert np.array_equal(base[:, :2], moved[:, :2])
        assert not np.allclose(base[:, 2:], moved[:, 2:])

    def test_mac_count_linear_in_positions(self):
        cfg = GaConfig("cgnl", reduced_channels=2, internal_downsample=1)
        params = init_ga_params(cfg, 2)
        counts = []
        for h in (4, 8, 16):
            with count_macs() as c:
                ga_cgnl(rand(1, 2, h, h), cfg, params)
            counts.append(c.count)
        assert counts[1] == 4 * counts[0] and counts[2] == 4 * counts[1]

    def test_group_divisibility(self):
        cfg = GaConfig("cgnl", reduced_channels=2, cgnl_groups=2, internal_downsample=1)
        params = init_ga_params(cfg, 4)
        with pytest.raises(ShapeError):
            ga_cgnl(rand(1, 3, 4, 4), cfg, params)


@pytest.mark.parametrize("name", ["ga_psp", "ga_aspp", "ga_nonlocal", "ga_cgnl"])
@pytest.mark.parametrize("dims", [(1, 2, 4, 4), (2, 2, 3, 4), (1, 4, 2, 2)])
def test_head_gradcheck(name, dims):
    for seed in range(3):
        report = run_gradcheck(name, dims, seed=seed, tol=1e-6)
        assert report.passed, report.lines()
