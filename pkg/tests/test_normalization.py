"""Unit tests for normalization statistics and layers."""

import pytest
import numpy as np
import sys
import os
from pydantic import ValidationError

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.core import tensor as T
from src.core.exceptions import ConfigError, DegenerateInputError, ShapeError
from src.core.normalization import (
    AffineParams,
    BatchNorm2d,
    ForwardContext,
    InstanceNorm2d,
    NormConfig,
    StatsC,
    StatsNC,
    WindowNorm2d,
    bn_stats,
    bn_update_running,
    build_norm_layer,
    in_stats,
    invert_standardize,
    mix_stats,
    norm_layer_forward,
    speckle_stats,
    standardize_affine,
    win_stats,
)
from src.core.rng import Rng
from src.core.window_sampling import WindowSpec, partition_blocks, sample_window


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def features():
    return np.random.default_rng(0).normal(loc=0.5, scale=2.0, size=(4, 3, 8, 8))


class FixedRegions:
    """Region source that always returns the same mask."""

    def __init__(self, mask):
        self.mask = mask
        self.calls = []

    def region(self, layer_id, step, dims, partition=None):
        self.calls.append((layer_id, step))
        return self.mask


class TestNormConfig:
    """Test suite for NormConfig validation."""

    def test_defaults(self):
        config = NormConfig()
        assert (config.kind, config.strategy, config.tau, config.alpha, config.eps) == ("WIN", "Window", 0.7, 0.1, 1e-5)
        assert not config.use_affine()
        assert NormConfig(kind="BN").use_affine()

    @pytest.mark.parametrize("field,value", [("tau", 0.0), ("tau", 1.2), ("alpha", 0.0), ("eps", 0.0)])
    def test_invalid_values(self, field, value):
        with pytest.raises(ValidationError):
            NormConfig(**{field: value})

    def test_eval_global_is_fixed(self):
        with pytest.raises(ValidationError):
            NormConfig(eval_uses_global=False)

    def test_unknown_key(self):
        with pytest.raises(ValidationError):
            NormConfig(window="big")


class TestStatistics:
    """Test suite for BN / IN / WIN / speckle statistics."""

    def test_bn_constant_input(self):
        stats = bn_stats(T.tensor(np.full((2, 3, 4, 4), 3.0)))
        np.testing.assert_allclose(stats.mean.data, 3.0)
        np.testing.assert_allclose(stats.var.data, 0.0, atol=1e-12)

    def test_bn_matches_loop_oracle(self, f64):
        f = np.random.default_rng(1).normal(size=(4, 3, 5, 5))
        stats = bn_stats(T.tensor(f))
        for c in range(3):
            values = [f[n, c, h, w] for n in range(4) for h in range(5) for w in range(5)]
            m = sum(values) / len(values)
            assert abs(stats.mean.data[c] - m) < 1e-10
            assert abs(stats.var.data[c] - sum((v - m) ** 2 for v in values) / len(values)) < 1e-10

    def test_running_update_momentum_zero(self):
        batch = bn_stats(T.tensor(np.random.default_rng(2).normal(size=(2, 3, 4, 4))))
        running = StatsC(mean=batch.mean, var=batch.var, running_mean=np.full(3, 9.0), running_var=np.full(3, 9.0))
        updated = bn_update_running(running, batch, 0.0)
        np.testing.assert_allclose(updated.running_mean, batch.mean.data)
        np.testing.assert_allclose(updated.running_var, batch.var.data)

    def test_running_update_momentum_range(self):
        batch = bn_stats(T.tensor(np.ones((1, 1, 2, 2))))
        with pytest.raises(ConfigError):
            bn_update_running(batch, batch, 1.5)

    def test_bn_empty(self):
        with pytest.raises(DegenerateInputError):
            bn_stats(T.tensor(np.ones((0, 3, 4, 4))))

    def test_in_stats_example(self):
        stats = in_stats(T.tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert stats.mean.data[0, 0] == pytest.approx(2.5)
        assert stats.var.data[0, 0] == pytest.approx(1.25)

    def test_in_identical_instances(self):
        plane = np.random.default_rng(3).normal(size=(1, 2, 4, 4))
        stats = in_stats(T.tensor(np.concatenate([plane, plane])))
        np.testing.assert_array_equal(stats.mean.data[0], stats.mean.data[1])
        np.testing.assert_array_equal(stats.var.data[0], stats.var.data[1])

    def test_win_right_column(self):
        stats = win_stats(T.tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), WindowSpec(1, 0, 2, 2))
        assert stats.mean.data[0, 0] == pytest.approx(3.0)
        assert stats.var.data[0, 0] == pytest.approx(1.0)

    def test_full_region_equals_instance_stats(self, features):
        f = T.tensor(features)
        full = win_stats(f, np.ones((8, 8), dtype=bool))
        global_ = in_stats(f)
        np.testing.assert_array_equal(full.mean.data, global_.mean.data)
        np.testing.assert_array_equal(full.var.data, global_.var.data)

    def test_block_union_pooled_variance(self, f64, features):
        partition = partition_blocks((8, 8), (4, 4), (8, 8))
        mask = partition.blocks_to_mask([0, 3])
        stats = win_stats(T.tensor(features), mask)
        selected = features[:, :, mask]
        np.testing.assert_allclose(stats.mean.data, selected.mean(axis=2), atol=1e-10)
        pooled = (selected ** 2).mean(axis=2) - selected.mean(axis=2) ** 2
        np.testing.assert_allclose(stats.var.data, pooled, atol=1e-10)

    def test_empty_region(self, features):
        with pytest.raises(DegenerateInputError):
            win_stats(T.tensor(features), np.zeros((8, 8), dtype=bool))

    def test_window_outside_plane(self, features):
        with pytest.raises(DegenerateInputError):
            win_stats(T.tensor(features), WindowSpec(4, 4, 12, 12))

    def test_pooled_mean_bound(self, f64):
        rng = np.random.default_rng(4)
        window_rng = Rng(4).stream("window")
        for _ in range(50):
            f = rng.normal(size=(2, 3, 16, 16))
            window = sample_window(window_rng, (16, 16), 0.7)
            local, global_ = win_stats(T.tensor(f), window), in_stats(T.tensor(f))
            spread = np.abs(f - global_.mean.data[:, :, None, None]).max(axis=(2, 3))
            bound = (1 / 0.7 - 1) * spread
            assert np.all(np.abs(local.mean.data - global_.mean.data) <= bound + 1e-12)

    def test_speckle_small_magnitude_approaches_instance(self, features):
        f = T.tensor(features)
        speckled = speckle_stats(f, Rng(0), 1e-9)
        np.testing.assert_allclose(speckled.mean.data, in_stats(f).mean.data, rtol=1e-6)

    def test_speckle_spread(self):
        f = T.tensor(1.0 + np.random.default_rng(5).random(size=(100, 100, 2, 2)), dtype=np.float64)
        speckled = speckle_stats(f, Rng(5), 0.2)
        ratio = speckled.mean.data / in_stats(f).mean.data - 1.0
        assert abs(ratio.std() - 0.2) < 0.01
        assert np.all(speckled.var.data >= 0)

    def test_speckle_magnitude_positive(self, features):
        with pytest.raises(ConfigError):
            speckle_stats(T.tensor(features), Rng(0), 0.0)


class TestMixing:
    """Test suite for mix_stats."""

    def stats(self, mean, var):
        return StatsNC(T.tensor(np.asarray(mean, dtype=float)), T.tensor(np.asarray(var, dtype=float)))

    def test_zero_lambda_is_global(self):
        local, global_ = self.stats([[3.0]], [[1.0]]), self.stats([[2.5]], [[1.25]])
        mixed = mix_stats(local, global_, np.zeros((1, 1)))
        assert mixed.mean.data[0, 0] == pytest.approx(2.5)
        assert mixed.var.data[0, 0] == pytest.approx(1.25)

    def test_one_lambda_is_local(self):
        local, global_ = self.stats([[3.0]], [[1.0]]), self.stats([[2.5]], [[1.25]])
        mixed = mix_stats(local, global_, np.ones((1, 1)))
        assert mixed.mean.data[0, 0] == pytest.approx(3.0)
        assert mixed.var.data[0, 0] == pytest.approx(1.0)

    def test_half_lambda(self):
        mixed = mix_stats(self.stats([[3.0]], [[1.0]]), self.stats([[2.5]], [[1.0]]), np.full((1, 1), 0.5))
        assert mixed.mean.data[0, 0] == pytest.approx(2.75)

    def test_variance_is_convex_combination(self):
        rng = np.random.default_rng(6)
        local = self.stats(rng.normal(size=(4, 3)), rng.random((4, 3)))
        global_ = self.stats(rng.normal(size=(4, 3)), rng.random((4, 3)))
        mixed = mix_stats(local, global_, rng.random((4, 3)))
        low = np.minimum(local.var.data, global_.var.data)
        high = np.maximum(local.var.data, global_.var.data)
        assert np.all(mixed.var.data >= low - 1e-6) and np.all(mixed.var.data <= high + 1e-6)

    @pytest.mark.parametrize("subset,mean,var", [("mean_only", 3.0, 1.25), ("var_only", 2.5, 1.0)])
    def test_stat_subsets(self, subset, mean, var):
        mixed = mix_stats(self.stats([[3.0]], [[1.0]]), self.stats([[2.5]], [[1.25]]), np.ones((1, 1)), subset)
        assert mixed.mean.data[0, 0] == pytest.approx(mean)
        assert mixed.var.data[0, 0] == pytest.approx(var)

    def test_lambda_range(self):
        with pytest.raises(ConfigError):
            mix_stats(self.stats([[3.0]], [[1.0]]), self.stats([[2.5]], [[1.0]]), np.full((1, 1), 1.5))

    def test_lambda_shape(self):
        with pytest.raises(ShapeError):
            mix_stats(self.stats([[3.0]], [[1.0]]), self.stats([[2.5]], [[1.0]]), np.ones((2, 1)))


class TestStandardize:
    """Test suite for standardize_affine."""

    def test_example(self, f64):
        stats = StatsNC(T.tensor([[2.0]]), T.tensor([[1.0]]))
        out = standardize_affine(T.tensor([[[[1.0, 3.0]]]]), stats, 1e-12)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-9)

    def test_identity_affine(self, features):
        f = T.tensor(features)
        stats = in_stats(f)
        plain = standardize_affine(f, stats, 1e-5)
        with_affine = standardize_affine(f, stats, 1e-5, AffineParams.identity(3))
        np.testing.assert_allclose(with_affine.data, plain.data)

    def test_output_is_normalized(self, features):
        f = T.tensor(features)
        out = standardize_affine(f, in_stats(f), 1e-5).data
        assert np.all(np.abs(out.mean(axis=(2, 3))) <= 1e-5)
        var = out.var(axis=(2, 3))
        assert np.all((var >= 1 - 1e-3) & (var <= 1 + 1e-6))

    def test_invert_recovers_input(self, f64, features):
        f = T.tensor(features)
        stats = in_stats(f)
        out = standardize_affine(f, stats, 1e-5)
        np.testing.assert_allclose(invert_standardize(out.data, stats.mean.data, stats.var.data, 1e-5), features)

    def test_eps_positive(self, features):
        f = T.tensor(features)
        with pytest.raises(ConfigError):
            standardize_affine(f, in_stats(f), 0.0)


class TestLayers:
    """Test suite for BN / IN / WIN layers."""

    def test_win_eval_equals_instance_norm(self, features):
        f = T.tensor(features)
        win = norm_layer_forward(f, NormConfig(kind="WIN"), "eval")
        inst = norm_layer_forward(f, NormConfig(kind="IN"), "eval")
        np.testing.assert_array_equal(win.data, inst.data)

    def test_win_full_window_without_mixing_equals_instance_norm(self, features):
        f = T.tensor(features)
        config = NormConfig(kind="WIN", tau=1.0, mixing=False)
        win = norm_layer_forward(f, config, "train", rng=Rng(0))
        inst = norm_layer_forward(f, NormConfig(kind="IN"), "train")
        np.testing.assert_array_equal(win.data, inst.data)

    def test_win_train_differs_from_eval(self, features):
        f = T.tensor(features)
        config = NormConfig(kind="WIN", mixing=False)
        train = norm_layer_forward(f, config, "train", rng=Rng(1))
        evaluation = norm_layer_forward(f, config, "eval")
        assert not np.allclose(train.data, evaluation.data)

    def test_win_train_needs_sources(self, features):
        layer = WindowNorm2d(NormConfig(), 3, "norm")
        with pytest.raises(ConfigError):
            layer.forward(T.tensor(features), ForwardContext(mode="train"))

    def test_speckle_needs_no_regions(self, features):
        layer = WindowNorm2d(NormConfig(strategy="Speckle"), 3, "norm")
        ctx = ForwardContext(mode="train", mix_rng=Rng(0).stream("mix"), noise_rng=Rng(0).stream("speckle"))
        out = layer.forward(T.tensor(features), ctx)
        assert out.shape == features.shape

    def test_speckle_needs_noise_stream(self, features):
        layer = WindowNorm2d(NormConfig(strategy="Speckle"), 3, "norm")
        with pytest.raises(ConfigError):
            layer.forward(T.tensor(features), ForwardContext(mode="train", mix_rng=Rng(0).stream("mix")))

    def test_speckle_leaves_lambda_stream_alone(self, features):
        window = WindowNorm2d(NormConfig(strategy="Window"), 3, "norm")
        speckle = WindowNorm2d(NormConfig(strategy="Speckle"), 3, "norm")
        after = []
        for layer in (window, speckle):
            mix = Rng(5).stream("mix")
            ctx = ForwardContext(mode="train", regions=FixedRegions(WindowSpec(0, 0, 6, 6).to_mask((8, 8))),
                                 mix_rng=mix, noise_rng=Rng(5).stream("speckle"))
            layer.forward(T.tensor(features), ctx)
            after.append(mix.uniform(size=4))
        np.testing.assert_array_equal(after[0], after[1])

    def test_block_layer_uses_image_grid(self, features):
        layer = WindowNorm2d(NormConfig(strategy="Block", patch_size=(16, 16)), 3, "norm", input_dims=(32, 32))
        partition = layer.partition_for((8, 8))
        assert partition.block_count == 4
        assert (partition.block_h, partition.block_w) == (4, 4)

    def test_region_source_keyed_by_layer_and_step(self, features):
        regions = FixedRegions(WindowSpec(0, 0, 4, 4).to_mask((8, 8)))
        layer = build_norm_layer(NormConfig(mixing=False), 3, "stage1.norm0")
        layer.forward(T.tensor(features), ForwardContext(mode="train", step=17, regions=regions))
        assert regions.calls == [("stage1.norm0", 17)]

    def test_bn_train_and_eval(self, features):
        layer = BatchNorm2d(NormConfig(kind="BN", momentum=0.0), 3, "bn")
        f = T.tensor(features)
        train = layer.forward(f, ForwardContext(mode="train"))
        np.testing.assert_allclose(train.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        # momentum 0 makes the running stats equal the last batch
        evaluation = layer.forward(f, ForwardContext.evaluation())
        np.testing.assert_allclose(evaluation.data, train.data, atol=1e-4)
        assert set(layer.buffers()) == {"bn.running_mean", "bn.running_var"}

    def test_bn_buffers_round_trip(self):
        layer = BatchNorm2d(NormConfig(kind="BN"), 2, "bn")
        layer.load_buffers({"bn.running_mean": [1.0, 2.0], "bn.running_var": [3.0, 4.0]})
        np.testing.assert_array_equal(layer.buffers()["bn.running_var"], [3.0, 4.0])

    def test_channel_check(self, features):
        layer = InstanceNorm2d(NormConfig(kind="IN"), 5, "in")
        with pytest.raises(ShapeError):
            layer.forward(T.tensor(features), ForwardContext.evaluation())

    def test_unknown_mode(self, features):
        with pytest.raises(ConfigError):
            norm_layer_forward(T.tensor(features), NormConfig(), "predict")

    def test_affine_parameters_exposed(self):
        layer = build_norm_layer(NormConfig(kind="IN", affine=True), 4, "stage0.norm1")
        assert set(layer.parameters()) == {"stage0.norm1.gamma", "stage0.norm1.beta"}
        assert build_norm_layer(NormConfig(kind="WIN"), 4, "x").parameters() == {}

    def test_gradient_with_frozen_window_and_lambda(self, f64):
        rng = np.random.default_rng(7)
        f = T.tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
        weights = T.tensor(rng.normal(size=(2, 2, 6, 6)))
        regions = FixedRegions(WindowSpec(1, 0, 5, 4).to_mask((6, 6)))
        layer = WindowNorm2d(NormConfig(alpha=0.5), 2, "norm")

        def loss():
            ctx = ForwardContext(mode="train", regions=regions, mix_rng=Rng(3).stream("mix"))
            return T.reduce_sum(T.mul(layer.forward(f, ctx), weights))

        T.backward(loss())
        numeric = T.numerical_grad(loss, f)
        error = np.max(np.abs(f.grad - numeric)) / (np.max(np.abs(f.grad)) + np.max(np.abs(numeric)))
        assert error < 1e-4
