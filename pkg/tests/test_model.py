import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from gpx.kernels import KernelParams, cross_gram, gram_matrix
from gpx.model import (
    FULL_COVARIANCE_MAX_D,
    Dataset,
    Hyperparams,
    NumericalError,
    _clamp_variance,
    condition,
    explain,
    explain_batch,
    fit,
    gpr_condition,
    gpr_predict,
    lml_gradient,
    log_marginal_likelihood,
    marginal_covariance,
    posterior_w_train,
    predict_w,
    predict_w_batch,
    predict_y,
    predict_y_batch,
)
from gpx.optimize import NOISE_FLOOR
from gpx.oracle import (
    build_dense_from_data,
    oracle_marginal_covariance,
    oracle_posterior_W,
    oracle_predict_w,
    oracle_predict_y,
)
from gpx.selftest import fd_gradient, random_instance

SEEDS = range(20)


def problem(seed, n=6, d=3, m=2):
    rng = np.random.default_rng(seed)
    data = Dataset(rng.standard_normal((n, m)), rng.standard_normal((n, d)), rng.standard_normal(n))
    hyper = Hyperparams(KernelParams(1.3, 2.0), 0.4, 0.3)
    return data, hyper, rng.standard_normal(m), rng.standard_normal(d)


class TestHyperparams:
    def test_log_round_trip(self):
        h = Hyperparams(KernelParams(1.5, 0.25), 0.2, 0.7)
        back = Hyperparams.from_log(h.to_log())
        np.testing.assert_allclose([back.theta1, back.theta2, back.sigma_y, back.sigma_w],
                                   [1.5, 0.25, 0.2, 0.7], rtol=1e-14)

    def test_rejects_negative_noise(self):
        with pytest.raises(ValueError):
            Hyperparams(KernelParams(1, 1), -0.1, 0.1)

    def test_dict_round_trip(self):
        h = Hyperparams(KernelParams(1.1, 3.0), 0.3, 0.05)
        assert Hyperparams.from_dict(h.as_dict()) == h


class TestDataset:
    def test_z_defaults_to_x(self):
        d = Dataset(np.ones((3, 2)), y=np.arange(3.0))
        assert d.z_is_x and d.d == 2 and d.m == 2

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[0.0], [np.nan]]))

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.ones((3, 2)), np.ones((2, 2)))
        with pytest.raises(ValueError):
            Dataset(np.ones((3, 2)), y=np.ones(4))


class TestMarginalCovariance:
    def test_scalar(self):
        C = marginal_covariance(np.array([[1.0]]), np.array([[2.0]]), 1.0, 0.0)
        np.testing.assert_array_equal(C, [[5.0]])

    def test_ones_column(self):
        rng = np.random.default_rng(0)
        K = gram_matrix(rng.standard_normal((5, 2)), KernelParams(1.0, 1.0))
        C = marginal_covariance(K, np.ones((5, 1)), 0.3, 0.2)
        np.testing.assert_allclose(C, 0.09 * np.eye(5) + K + 0.04 * np.eye(5), atol=1e-15)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_oracle(self, seed):
        data, hyper, _, _ = problem(seed)
        K = gram_matrix(data.X, hyper.kernel)
        dense = build_dense_from_data(data.X, data.Z, hyper)
        C = marginal_covariance(K, data.Z, hyper.sigma_y, hyper.sigma_w)
        np.testing.assert_allclose(C, oracle_marginal_covariance(dense, hyper), atol=1e-10)
        assert np.all(np.diag(C) >= hyper.sigma_y**2)
        np.testing.assert_array_equal(C, C.T)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            marginal_covariance(np.eye(3), np.ones((4, 2)), 0.1, 0.1)


class TestLogMarginalLikelihood:
    def test_scalar(self):
        # n=1, z=2, K=[[1]], sigma_y=1, sigma_w=0 gives C=[[5]]
        data = Dataset(np.zeros((1, 1)), np.array([[2.0]]), np.zeros(1))
        h = Hyperparams(KernelParams(1.0, 1.0), 1.0, 0.0)
        lml = log_marginal_likelihood(h, data)
        # -log(10 pi) / 2 = -1.723657...
        np.testing.assert_allclose(lml, -0.5 * math.log(2 * math.pi * 5), rtol=1e-14)
        assert abs(lml - -1.723657) < 1e-6

    def test_zero_targets_maximize_quadratic(self):
        data, hyper, _, _ = problem(1)
        zero = data.with_targets(np.zeros(data.n))
        assert log_marginal_likelihood(hyper, zero) > log_marginal_likelihood(hyper, data)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_dense_mvn(self, seed):
        data, hyper, _, _ = problem(seed, n=5)
        C = marginal_covariance(gram_matrix(data.X, hyper.kernel), data.Z, hyper.sigma_y, hyper.sigma_w)
        Cinv = np.linalg.inv(C)
        dense = -0.5 * data.y @ Cinv @ data.y - 0.5 * np.log(np.linalg.det(C)) - 2.5 * math.log(2 * math.pi)
        np.testing.assert_allclose(log_marginal_likelihood(hyper, data), dense, atol=1e-9)
        np.testing.assert_allclose(dense, multivariate_normal(np.zeros(5), C).logpdf(data.y), atol=1e-9)


class TestLmlGradient:
    def test_scalar_noise_component(self):
        # y = 0, n = 1: dL/dlog(sigma_y^2) = -sigma_y^2 / (2C)
        data = Dataset(np.zeros((1, 1)), np.array([[1.5]]), np.zeros(1))
        h = Hyperparams(KernelParams(0.8, 1.0), 0.6, 0.4)
        C = 0.36 + (0.8 + 0.16) * 2.25
        np.testing.assert_allclose(lml_gradient(h, data)[2], -0.36 / (2 * C), rtol=1e-13)

    @pytest.mark.parametrize("seed", range(30))
    def test_finite_differences(self, seed):
        data, hyper, _, _ = random_instance(seed, d_max=3)
        g = lml_gradient(hyper, data)
        fd = fd_gradient(hyper, data)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5

    def test_absent_parameter_has_zero_gradient(self):
        rng = np.random.default_rng(3)
        data = Dataset(rng.standard_normal((5, 2)), np.zeros((5, 2)), rng.standard_normal(5))
        g = lml_gradient(Hyperparams(KernelParams(1, 1), 0.5, 0.3), data)
        assert g[3] == 0.0
        assert g[0] == 0.0 and g[1] == 0.0


class TestPredictY:
    def test_zero_z_star(self):
        data, hyper, xs, _ = problem(2)
        p = predict_y(condition(data, hyper), xs, np.zeros(data.d))
        assert p.mean == 0.0
        np.testing.assert_allclose(p.variance, hyper.sigma_y**2, rtol=1e-14)

    def test_noiseless_interpolation(self):
        data = Dataset(np.array([[0.3]]), np.ones((1, 1)), np.array([1.7]))
        h = Hyperparams(KernelParams(1.0, 1.0), 1e-6, 0.0)
        p = predict_y(condition(data, h), [0.3], [1.0])
        assert abs(p.mean - 1.7) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_oracle(self, seed):
        data, hyper, xs, zs = problem(seed)
        p = predict_y(condition(data, hyper), xs, zs)
        o = oracle_predict_y(build_dense_from_data(data.X, data.Z, hyper, xs), data.y, zs, hyper)
        np.testing.assert_allclose([p.mean, p.variance], [o.mean, o.variance], atol=1e-9)
        assert p.variance >= hyper.sigma_y**2 - 1e-10

    def test_batch_matches_single(self):
        data, hyper, _, _ = problem(4)
        model = condition(data, hyper)
        rng = np.random.default_rng(9)
        Xs, Zs = rng.standard_normal((5, data.m)), rng.standard_normal((5, data.d))
        mean, var = predict_y_batch(model, Xs, Zs)
        for i in range(5):
            p = predict_y(model, Xs[i], Zs[i])
            np.testing.assert_allclose([mean[i], var[i]], [p.mean, p.variance], rtol=1e-13)

    def test_dimension_mismatch(self):
        data, hyper, xs, zs = problem(0)
        model = condition(data, hyper)
        with pytest.raises(ValueError):
            predict_y(model, xs[:1], zs)
        with pytest.raises(ValueError):
            predict_y(model, xs, np.ones(data.d + 1))


class TestVarianceClamp:
    def test_small_negative_clamped(self):
        np.testing.assert_array_equal(_clamp_variance([-5e-9, 0.2]), [0.0, 0.2])

    def test_large_negative_raises(self):
        with pytest.raises(NumericalError):
            _clamp_variance([-1e-6])


class TestPredictW:
    def test_single_ones_feature_reduces_to_predict_y(self):
        rng = np.random.default_rng(5)
        data = Dataset(rng.standard_normal((6, 2)), np.ones((6, 1)), rng.standard_normal(6))
        hyper = Hyperparams(KernelParams(1.2, 1.5), 0.3, 0.2)
        model = condition(data, hyper)
        xs = rng.standard_normal(2)
        pw = predict_w(model, xs, [1.0])
        py = predict_y(model, xs, [1.0])
        np.testing.assert_allclose(pw.mean[0], py.mean, atol=1e-10)
        np.testing.assert_allclose(pw.covariance[0, 0], py.variance - hyper.sigma_y**2, atol=1e-10)

    def test_zero_targets(self):
        data, hyper, xs, zs = problem(6)
        model = condition(data.with_targets(np.zeros(data.n)), hyper)
        np.testing.assert_array_equal(predict_w(model, xs, zs).mean, np.zeros(data.d))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_oracle(self, seed):
        data, hyper, xs, zs = random_instance(seed, n_max=6, d_max=4)
        pw = predict_w(condition(data, hyper), xs, zs)
        ow = oracle_predict_w(build_dense_from_data(data.X, data.Z, hyper, xs), data.y, hyper)
        np.testing.assert_allclose(pw.mean, ow.mean, atol=1e-8)
        np.testing.assert_allclose(pw.covariance, ow.covariance, atol=1e-8)

    def test_covariance_is_psd_and_symmetric(self):
        data, hyper, xs, zs = problem(7, n=12, d=5)
        cov = predict_w(condition(data, hyper), xs, zs).covariance
        np.testing.assert_allclose(cov, cov.T, atol=1e-10)
        assert np.min(np.linalg.eigvalsh(cov)) >= -1e-8

    def test_diagonal_only_for_large_d(self):
        rng = np.random.default_rng(0)
        d = FULL_COVARIANCE_MAX_D + 1
        data = Dataset(rng.standard_normal((4, 2)), rng.standard_normal((4, d)), rng.standard_normal(4))
        model = condition(data, Hyperparams(KernelParams(1, 2), 0.5, 0.1))
        pw = predict_w(model, rng.standard_normal(2), rng.standard_normal(d))
        assert pw.covariance is None and pw.variance.shape == (d,)
        assert np.all(pw.variance >= 0)

    def test_batch_matches_single(self):
        data, hyper, _, _ = problem(8)
        model = condition(data, hyper)
        rng = np.random.default_rng(1)
        Xs, Zs = rng.standard_normal((4, data.m)), rng.standard_normal((4, data.d))
        means, variances, covs = predict_w_batch(model, Xs, Zs, full=True)
        for i in range(4):
            pw = predict_w(model, Xs[i], Zs[i])
            np.testing.assert_allclose(means[i], pw.mean, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(covs[i], pw.covariance, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(variances[i], pw.variance, rtol=1e-12, atol=1e-14)


class TestConsistency:
    @pytest.mark.parametrize("seed", range(50))
    def test_mean_and_variance(self, seed):
        data, hyper, xs, zs = random_instance(seed)
        model = condition(data, hyper)
        py = predict_y(model, xs, zs)
        pw = predict_w(model, xs, zs)
        assert abs(py.mean - zs @ pw.mean) < 1e-8
        assert abs(py.variance - (zs @ pw.covariance @ zs + hyper.sigma_y**2)) < 1e-8

    def test_appendix_variant_breaks_consistency(self):
        worst_main, worst_app = 0.0, 0.0
        for seed in range(20):
            data, hyper, xs, zs = random_instance(seed)
            dense = build_dense_from_data(data.X, data.Z, hyper, xs)
            oy = oracle_predict_y(dense, data.y, zs, hyper)
            for variant in ("main_text", "appendix"):
                ow = oracle_predict_w(dense, data.y, hyper, variant)
                err = max(abs(oy.mean - zs @ ow.mean),
                          abs(oy.variance - zs @ ow.covariance @ zs - hyper.sigma_y**2))
                if variant == "main_text":
                    worst_main = max(worst_main, err)
                else:
                    worst_app = max(worst_app, err)
        assert worst_main < 1e-8
        assert worst_app > 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_equivariance(self, seed):
        data, hyper, xs, zs = problem(seed, n=8)
        perm = np.random.default_rng(seed + 100).permutation(data.n)
        a = condition(data, hyper)
        b = condition(data.subset(perm), hyper)
        pa, pb = predict_y(a, xs, zs), predict_y(b, xs, zs)
        np.testing.assert_allclose([pa.mean, pa.variance], [pb.mean, pb.variance], atol=1e-10)
        wa, wb = predict_w(a, xs, zs), predict_w(b, xs, zs)
        np.testing.assert_allclose(wa.mean, wb.mean, atol=1e-10)
        np.testing.assert_allclose(wa.covariance, wb.covariance, atol=1e-10)


class TestPosteriorWTrain:
    def test_zero_targets(self):
        data, hyper, _, _ = problem(0)
        means, var = posterior_w_train(condition(data.with_targets(np.zeros(data.n)), hyper))
        np.testing.assert_array_equal(means, 0.0)
        assert np.all(var > 0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_oracle(self, seed):
        data, hyper, _, _ = random_instance(seed)
        means, var = posterior_w_train(condition(data, hyper))
        om, oS, _ = oracle_posterior_W(build_dense_from_data(data.X, data.Z, hyper), data.y, hyper)
        n, d = data.n, data.d
        np.testing.assert_allclose(means, om.reshape(d, n).T, atol=1e-8)
        np.testing.assert_allclose(var, np.diag(oS).reshape(d, n).T, atol=1e-8)

    def test_reconstruction_shrinks_with_noise(self):
        data, hyper, _, _ = problem(11, n=8, d=2)

        def residual(sigma_y):
            h = Hyperparams(hyper.kernel, sigma_y, hyper.sigma_w)
            om, _, _ = oracle_posterior_W(build_dense_from_data(data.X, data.Z, h), data.y, h)
            means, _ = posterior_w_train(condition(data, h))
            np.testing.assert_allclose(means, om.reshape(data.d, data.n).T, atol=1e-8)
            return np.sum((np.sum(means * data.Z, axis=1) - data.y) ** 2)

        assert residual(0.03) < residual(0.3)


class TestExplain:
    def test_zero_z_star(self):
        data, hyper, xs, _ = problem(1)
        e = explain(condition(data, hyper), xs, np.zeros(data.d))
        np.testing.assert_array_equal(e.contributions, 0.0)
        assert e.prediction_mean == 0.0

    def test_single_feature(self):
        rng = np.random.default_rng(2)
        data = Dataset(rng.standard_normal((5, 1)), np.ones((5, 1)), rng.standard_normal(5))
        e = explain(condition(data, Hyperparams(KernelParams(1, 1), 0.3, 0.2)), [0.1], [1.0])
        np.testing.assert_allclose(e.contributions[0], e.prediction_mean, atol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_contributions_sum_to_prediction(self, seed):
        data, hyper, xs, zs = problem(seed)
        model = condition(data, hyper)
        e = explain(model, xs, zs)
        assert abs(e.contributions.sum() - e.prediction_mean) < 1e-8
        np.testing.assert_allclose(e.weights_std, np.sqrt(np.diag(predict_w(model, xs, zs).covariance)))
        np.testing.assert_allclose(e.contributions, e.weights_mean * zs)
        assert e.prediction_std == pytest.approx(predict_y(model, xs, zs).std)

    def test_batch(self):
        data, hyper, _, _ = problem(3)
        model = condition(data, hyper)
        exps = explain_batch(model, data.X, data.Z)
        assert len(exps) == data.n
        for i, e in enumerate(exps):
            single = explain(model, data.X[i], data.Z[i])
            np.testing.assert_allclose(e.contributions, single.contributions, rtol=1e-12, atol=1e-14)


class TestFit:
    def test_lml_improves_and_trace_monotone(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, (40, 2))
        data = Dataset(X, y=np.sin(3 * X[:, 0]) * X[:, 1] + 0.05 * rng.standard_normal(40))
        model = fit(data)
        init = Hyperparams.from_dict(model.info["init"])
        assert model.info["lml"] >= log_marginal_likelihood(init, data) - 1e-9
        trace = np.array(model.info["lml_trace"])
        assert np.all(np.diff(trace) >= -1e-9)
        np.testing.assert_allclose(model.info["lml"], log_marginal_likelihood(model.hyper, data), rtol=1e-10)

    def test_cached_factors(self):
        data, hyper, _, _ = problem(2, n=10)
        model = condition(data, hyper)
        C = marginal_covariance(gram_matrix(data.X, hyper.kernel), data.Z, hyper.sigma_y, hyper.sigma_w)
        L = model.chol_C.lower
        assert np.linalg.norm(L @ L.T - C) / np.linalg.norm(C) < 1e-10
        np.testing.assert_allclose(C @ model.alpha, data.y, atol=1e-8)
        Lm = model.chol_M.lower
        M = gram_matrix(data.X, hyper.kernel) + hyper.sigma_w**2 * np.eye(data.n)
        np.testing.assert_allclose(Lm @ Lm.T, M, atol=1e-12)

    def test_converged_start_is_unchanged(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(-1, 1, (30, 2))
        data = Dataset(X, y=X @ np.array([0.6, -0.8]) + 0.1 * rng.standard_normal(30))
        first = fit(data)
        second = fit(data, first.hyper)
        np.testing.assert_allclose(second.hyper.to_log(), first.hyper.to_log(), atol=1e-6)

    def test_constant_targets_hit_noise_floor(self):
        rng = np.random.default_rng(1)
        data = Dataset(rng.uniform(-1, 1, (15, 2)), y=np.zeros(15))
        model = fit(data)
        assert model.hyper.sigma_y**2 >= NOISE_FLOOR * (1 - 1e-12)
        assert model.hyper.sigma_y < 0.1

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            fit(Dataset(np.ones((1, 1)), y=np.ones(1)))


class TestGpr:
    def test_far_test_point_reverts_to_prior(self):
        data = Dataset(np.array([[0.0], [0.5]]), y=np.array([1.0, -1.0]))
        model = gpr_condition(data.X, data.y, KernelParams(1.5, 0.1), 0.2)
        p = gpr_predict(model, [100.0])
        assert abs(p.mean) < 1e-12
        np.testing.assert_allclose(p.variance, 1.5 + 0.04, rtol=1e-12)

    def test_interpolation(self):
        model = gpr_condition(np.array([[0.2]]), np.array([3.0]), KernelParams(1.0, 1.0), 1e-6)
        assert abs(gpr_predict(model, [0.2]).mean - 3.0) < 1e-6

    @pytest.mark.parametrize("seed", range(10))
    def test_reduction_from_gpx(self, seed):
        data, hyper, xs, _ = problem(seed)
        ones = Dataset(data.X, np.ones((data.n, 1)), data.y)
        gx = predict_y(condition(ones, Hyperparams(hyper.kernel, hyper.sigma_y, 0.0)), xs, [1.0])
        gr = gpr_predict(gpr_condition(data.X, data.y, hyper.kernel, hyper.sigma_y), xs)
        np.testing.assert_allclose([gx.mean, gx.variance], [gr.mean, gr.variance], atol=1e-10)

    def test_closed_form(self):
        data, hyper, xs, _ = problem(3)
        gr = gpr_predict(gpr_condition(data.X, data.y, hyper.kernel, hyper.sigma_y), xs)
        K = gram_matrix(data.X, hyper.kernel) + hyper.sigma_y**2 * np.eye(data.n)
        k = cross_gram(xs[None, :], data.X, hyper.kernel)[0]
        np.testing.assert_allclose(gr.mean, k @ np.linalg.solve(K, data.y), atol=1e-12)
        np.testing.assert_allclose(gr.variance, hyper.theta1 + hyper.sigma_y**2 - k @ np.linalg.solve(K, k),
                                   atol=1e-12)
