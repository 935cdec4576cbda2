import numpy as np
import numpy.testing as npt
import pytest

from ibnorm import autodiff as ad
from ibnorm.autodiff import Graph, Tensor
from ibnorm.compression import CompressionKind, CompressionParams
from ibnorm.errors import ConfigError, ContractError
from ibnorm.layers import (AffineParams, BatchStats, NormKind, NormSpec,
                           STANDARDIZE_THEN_COMPRESS, batch_norm, build_norm,
                           estimate_power_lambda, ibnorm, layer_norm,
                           normal_norm, parse_norm_name, power_transform,
                           rms_norm)

SQRT_1P5 = np.sqrt(1.5)


def ib_spec(kind="T", lam=4.0, group=3, eps=1e-5, affine=False, order=None):
    comp = CompressionParams(kind=CompressionKind.parse(kind), lam=lam, group_size=group)
    kwargs = {}
    if order:
        kwargs["order"] = order
    return NormSpec(kind=NormKind.IB_NORM, compression=comp, epsilon=eps,
                    affine=affine, **kwargs)


class TestLayerNorm:
    def test_hand_standardization(self):
        out = layer_norm(Tensor([1.0, 2.0, 3.0]), eps=1e-300)
        npt.assert_allclose(out.array, [-SQRT_1P5, 0.0, SQRT_1P5], atol=1e-12)

    def test_constant_input_zeros(self):
        out = layer_norm(Tensor([5.0, 5.0, 5.0]), eps=1e-5)
        npt.assert_array_equal(out.array, [0.0, 0.0, 0.0])

    def test_identity_affine_bitwise(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((4, 8)))
        affine = AffineParams.identity(8)
        plain = layer_norm(x, 1e-5)
        withaff = layer_norm(x, 1e-5, affine)
        assert plain.array.tobytes() == withaff.array.tobytes()

    def test_zero_mean_unit_variance_contract(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((16, 32)) * 3 + 1)
        out = layer_norm(x, 1e-8).array
        assert np.abs(out.mean(axis=-1)).max() < 1e-10
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(12)
        base = layer_norm(Tensor(x), 1e-8).array
        for c in (0.5, 3.0, 100.0):
            scaled = layer_norm(Tensor(c * x), 1e-8).array
            npt.assert_allclose(scaled, base, atol=1e-6)


class TestRMSNorm:
    def test_hand_example(self):
        out = rms_norm(Tensor([3.0, 4.0]), eps=1e-300)
        npt.assert_allclose(out.array, [3 / np.sqrt(12.5), 4 / np.sqrt(12.5)],
                            rtol=1e-12)

    def test_zero_input(self):
        out = rms_norm(Tensor([0.0, 0.0]), eps=1e-5)
        npt.assert_array_equal(out.array, [0.0, 0.0])

    def test_unit_rms_fixed_point(self):
        x = np.array([1.0, -1.0, 1.0, -1.0])
        out = rms_norm(Tensor(x), eps=1e-300)
        npt.assert_allclose(out.array, x, rtol=1e-12)

    def test_gamma_only(self):
        affine = AffineParams.identity(2, with_shift=False)
        affine.gamma.array[:] = 2.0
        out = rms_norm(Tensor([3.0, 4.0]), 1e-300, affine)
        npt.assert_allclose(out.array, [6 / np.sqrt(12.5), 8 / np.sqrt(12.5)],
                            rtol=1e-12)


class TestBatchNorm:
    def test_train_hand_example(self):
        stats = BatchStats.fresh(1)
        out = batch_norm(Tensor([[1.0], [3.0]]), stats, train=True, eps=1e-300)
        npt.assert_allclose(out.array, [[-1.0], [1.0]], rtol=1e-12)

    def test_eval_standard_stats_identity(self):
        stats = BatchStats.fresh(3)
        x = np.array([[0.3, -1.2, 2.0]])
        out = batch_norm(Tensor(x), stats, train=False, eps=1e-300)
        npt.assert_allclose(out.array, x, rtol=1e-12)

    def test_constant_feature_column(self):
        stats = BatchStats.fresh(1)
        out = batch_norm(Tensor([[2.0], [2.0]]), stats, train=True, eps=1e-5)
        npt.assert_array_equal(out.array, [[0.0], [0.0]])

    def test_batch_of_one_rejected(self):
        with pytest.raises(ContractError):
            batch_norm(Tensor([[1.0]]), BatchStats.fresh(1), train=True)

    def test_eval_never_mutates_stats(self):
        stats = BatchStats.fresh(2)
        before = (stats.running_mean.copy(), stats.running_var.copy())
        batch_norm(Tensor([[1.0, 2.0], [3.0, 4.0]]), stats, train=False)
        npt.assert_array_equal(stats.running_mean, before[0])
        npt.assert_array_equal(stats.running_var, before[1])

    def test_running_update(self):
        stats = BatchStats.fresh(1, momentum=0.1)
        batch_norm(Tensor([[0.0], [4.0]]), stats, train=True)
        npt.assert_allclose(stats.running_mean, [0.2])
        npt.assert_allclose(stats.running_var, [0.9 * 1.0 + 0.1 * 4.0])


class TestIBNorm:
    def test_linear_lam1_equals_layer_norm(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(6)
        comp = CompressionParams(kind=CompressionKind.S, lam=1.0, group_size=6)
        a = ibnorm(Tensor(x), comp, eps=1e-12).array
        b = layer_norm(Tensor(x), eps=1e-12).array
        npt.assert_allclose(a, b, atol=1e-12)

    def test_linear_any_lam_equivalence(self):
        rng = np.random.default_rng(6)
        for lam in (0.25, 0.5, 2.0, 4.0, 8.0):
            x = rng.standard_normal(10)
            comp = CompressionParams(kind=CompressionKind.S, lam=lam, group_size=10)
            a = ibnorm(Tensor(x), comp, eps=1e-12).array
            b = layer_norm(Tensor(x), eps=1e-12).array
            npt.assert_allclose(a, b, atol=1e-10)

    def test_constant_input_zeros(self):
        comp = CompressionParams(kind=CompressionKind.T, lam=4.0, group_size=4)
        out = ibnorm(Tensor([2.0] * 4), comp, eps=1e-5)
        npt.assert_array_equal(out.array, np.zeros(4))

    def test_tanh_hand_example(self):
        comp = CompressionParams(kind=CompressionKind.T, lam=4.0, group_size=3)
        out = ibnorm(Tensor([0.0, 4.0, -4.0]), comp, eps=1e-5)
        npt.assert_allclose(out.array, [0.0, 1.2247, -1.2247], atol=2e-4)

    def test_star_order_applies_standardization_first(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(8)
        comp = CompressionParams(kind=CompressionKind.L, lam=4.0, group_size=8)
        star = ibnorm(Tensor(x), comp, eps=1e-8, order=STANDARDIZE_THEN_COMPRESS).array
        # oracle: standardize by hand, then compress by hand
        z = (x - x.mean()) / np.sqrt(x.var() + 1e-8)
        d = z - z.mean()
        expect = z.mean() + np.sign(d) * np.log1p(np.abs(d) / 4.0)
        npt.assert_allclose(star, expect, rtol=1e-10)

    def test_star_order_requires_ibnorm(self):
        with pytest.raises(ContractError):
            NormSpec(kind=NormKind.LAYER_NORM, order=STANDARDIZE_THEN_COMPRESS)


class TestPowerTransform:
    def test_identity_branch(self):
        out = power_transform(Tensor([0.5]), 1.0)
        npt.assert_allclose(out.array, [0.5], rtol=1e-12)

    def test_log_branch(self):
        out = power_transform(Tensor([np.e - 1.0]), 0.0)
        npt.assert_allclose(out.array, [1.0], rtol=1e-12)

    def test_negative_log_branch(self):
        out = power_transform(Tensor([-(np.e - 1.0)]), 2.0)
        npt.assert_allclose(out.array, [-1.0], rtol=1e-12)

    def test_overflow_saturation_error(self):
        from ibnorm.errors import SaturationError
        with pytest.raises(SaturationError) as exc:
            power_transform(Tensor([1e300, 0.0]), 4.0)
        assert exc.value.coordinate == 0

    def test_gradient_continuous_at_zero(self):
        for lam in (-1.0, 0.0, 1.0, 2.0, 3.5):
            x = Tensor([0.0], requires_grad=True)
            with Graph() as g:
                y = ad.sum_axis(power_transform(x, lam), axis=-1)
            grads = ad.backward(g, y)
            npt.assert_allclose(grads[x], [1.0], rtol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        for lam in (-1.5, 0.0, 0.7, 2.0, 3.0):
            x = rng.uniform(-0.8, 1.5, size=7)
            x = np.where(np.abs(x) < 0.01, x + 0.05, x)

            def f(t):
                return ad.mean_axis(power_transform(t, lam), axis=-1)

            assert ad.grad_check(f, Tensor(x), eps=1e-6) < 1e-4


class TestNormalNorm:
    def test_zero_noise_identity_lambda_equals_layer_norm(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal(10))
        affine = AffineParams.identity(10)
        out, lam = normal_norm(x, 1e-5, affine, noise_factor=0.0, lambda_hat=1.0)
        expect = layer_norm(x, 1e-5, affine)
        npt.assert_allclose(out.array, expect.array, atol=1e-12)
        assert lam == 1.0

    def test_log_branch_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal(12)
        out, _ = normal_norm(Tensor(x), 1e-8, None, noise_factor=0.0, lambda_hat=0.0)
        c = (x - x.mean()) / np.sqrt(x.var() + 1e-8)
        expect = np.where(c >= 0.0, np.log1p(np.maximum(c, 0.0)),
                          -((1.0 - np.minimum(c, 0.0)) ** 2 - 1.0) / 2.0)
        npt.assert_allclose(out.array, expect, rtol=1e-10)

    def test_seeded_noise_bit_reproducible(self):
        x = Tensor(np.linspace(-2, 2, 16))

        def run():
            rng = np.random.default_rng(1234)
            out, _ = normal_norm(x, 1e-5, None, noise_factor=1.0, rng=rng,
                                 train=True, lambda_hat=1.0)
            return out.array

        assert run().tobytes() == run().tobytes()

    def test_eval_mode_disables_noise_via_layer(self):
        spec = NormSpec(kind=NormKind.NORMAL_NORM, noise_factor=1.0)
        layer = build_norm(spec, 8)
        x = Tensor(np.linspace(-1, 1, 8))
        a = layer.forward(x, train=False).array
        b = layer.forward(x, train=False).array
        npt.assert_array_equal(a, b)

    def test_estimator_recovers_identity_for_gaussian(self):
        rng = np.random.default_rng(11)
        c = rng.standard_normal(4000)
        c = (c - c.mean()) / c.std()
        lam = estimate_power_lambda(c)
        assert 0.7 < lam < 1.3

    def test_estimation_failure_falls_back(self, caplog):
        import logging
        x = Tensor(np.array([1.0, -1.0]))
        with caplog.at_level(logging.WARNING):
            out, lam = normal_norm(x, 1e-5, None, noise_factor=0.0)
        assert np.all(np.isfinite(out.array))


class TestBuildNorm:
    def test_layer_norm_param_count(self):
        layer = build_norm(NormSpec(kind=NormKind.LAYER_NORM), 8)
        assert sum(p.size for p in layer.parameters().values()) == 16

    def test_ibnorm_forward_equals_op(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((2, 6)))
        spec = ib_spec("S", lam=3.0, group=6, affine=False)
        layer = build_norm(spec, 6)
        direct = ibnorm(x, spec.compression, spec.epsilon)
        npt.assert_array_equal(layer.forward(x).array, direct.array)

    def test_ibnorm_without_compression_rejected(self):
        with pytest.raises(ConfigError):
            NormSpec(kind=NormKind.IB_NORM)

    def test_group_size_rebound_to_feature_dim(self):
        spec = ib_spec("L", lam=4.0, group=1)
        layer = build_norm(spec, 10)
        assert layer.spec.compression.group_size == 10

    def test_parse_norm_name(self):
        assert parse_norm_name("layernorm").kind is NormKind.LAYER_NORM
        spec = parse_norm_name("ibnorm-l", lam=2.0)
        assert spec.kind is NormKind.IB_NORM
        assert spec.compression.kind is CompressionKind.L
        with pytest.raises(ConfigError):
            parse_norm_name("groupnorm")


class TestGradientFidelity:
    @pytest.mark.parametrize("label", [
        "layernorm", "rmsnorm", "batchnorm", "normalnorm",
        "ibnorm-s", "ibnorm-l", "ibnorm-t", "ibnorm-l-star",
    ])
    def test_layer_backward_matches_finite_differences(self, label):
        worst = 0.0
        for seed in range(5):
            rng = np.random.default_rng(seed)
            worst = max(worst, _layer_grad_error(label, rng))
        assert worst < 1e-4, f"{label}: {worst}"


def _layer_grad_error(label, rng, dim=6, rows=3):
    if label == "batchnorm":
        spec = NormSpec(kind=NormKind.BATCH_NORM)
    elif label == "normalnorm":
        spec = NormSpec(kind=NormKind.NORMAL_NORM)
    elif label.startswith("ibnorm"):
        parts = label.split("-")
        order = STANDARDIZE_THEN_COMPRESS if parts[-1] == "star" else None
        spec = ib_spec(parts[1], lam=4.0, group=dim, affine=True,
                       order=order)
    else:
        spec = parse_norm_name(label)
    layer = build_norm(spec, dim)
    if label == "normalnorm":
        layer.fixed_lambda_hat = 0.8

    x = rng.standard_normal((rows, dim)) * 1.5
    while np.min(np.abs(x - x.mean(-1, keepdims=True))) <= 1e-3:
        x = rng.standard_normal((rows, dim)) * 1.5
    w = rng.standard_normal((rows, dim))

    def f(t):
        y = layer.forward(t, train=True)
        return ad.mean_axis(ad.sum_axis(ad.mul(y, Tensor(w)), axis=-1), axis=-1)

    return ad.grad_check(f, Tensor(x), eps=1e-5)
