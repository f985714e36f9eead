"""Inference tests: analytic scores, sandwich covariance, mean intervals."""

import numpy as np
import pytest

from moefit.datagen import gen_moe_sample, uniform_box_sampler
from moefit.estimation import FitConfig, fit, initialize, multi_start_fit
from moefit.inference import (
    InferenceError,
    flatten_params,
    mean_ci,
    param_labels,
    sandwich_covariance,
    score_matrix,
    score_vector,
    standard_errors,
    unflatten_params,
)
from moefit.model import Dataset, ExpertDesign, MoeParams, moe_log_density
from moefit.tasks import predict_mean


def random_theta(family, rng, g=2, p=1, K=3):
    gating = np.vstack([rng.normal(size=(g - 1, p + 1)), np.zeros(p + 1)])
    if family == "multinomial":
        beta = rng.normal(size=(g, K, p + 1)) * 0.7
        beta[:, K - 1] = 0.0
        return MoeParams(family=family, gating=gating, beta=beta, K=K)
    beta = rng.normal(size=(g, p + 1)) * 0.7
    sigma2 = rng.uniform(0.5, 2.0, size=g) if family == "gaussian" else None
    return MoeParams(family=family, gating=gating, beta=beta, sigma2=sigma2)


def random_obs(family, rng, p=1, K=3):
    x = rng.normal(size=p)
    if family == "gaussian":
        return rng.normal(), x
    if family == "logistic":
        return int(rng.integers(0, 2)), x
    if family == "poisson":
        return int(rng.poisson(2.0)), x
    return int(rng.integers(1, K + 1)), x


def fd_score(y, x, theta):
    vec = flatten_params(theta)
    grad = np.empty(vec.size)
    for j in range(vec.size):
        h = 1e-6 * (1.0 + abs(vec[j]))
        up, dn = vec.copy(), vec.copy()
        up[j] += h
        dn[j] -= h
        grad[j] = (moe_log_density(y, x, unflatten_params(theta, up))
                   - moe_log_density(y, x, unflatten_params(theta, dn))) / (2 * h)
    return grad


class TestScoreVector:
    @pytest.mark.parametrize("family",
                             ["gaussian", "logistic", "poisson", "multinomial"])
    def test_matches_finite_differences(self, family):
        rng = np.random.default_rng(hash(family) % 2**32)
        for _ in range(50):
            theta = random_theta(family, rng)
            y, x = random_obs(family, rng)
            analytic = score_vector(y, x, theta)
            numeric = fd_score(y, x, theta)
            scale = np.maximum(np.abs(numeric), 1.0)
            assert np.max(np.abs(analytic - numeric) / scale) < 1e-5

    def test_g1_gaussian_classical_form(self):
        theta = MoeParams(family="gaussian", gating=np.zeros((1, 2)),
                          beta=np.array([[0.5, 1.5]]), sigma2=np.array([2.0]))
        x = np.array([0.8])
        y = 2.3
        resid = y - (0.5 + 1.5 * 0.8)
        got = score_vector(y, x, theta)
        want = np.array([resid / 2.0, resid * 0.8 / 2.0,
                         resid ** 2 / (2 * 4.0) - 0.5 / 2.0])
        assert np.allclose(got, want, atol=1e-12)

    def test_zero_total_score_at_maximizer(self):
        rng = np.random.default_rng(77)
        truth = MoeParams(family="gaussian",
                          gating=np.array([[1.5, 1.0], [0.0, 0.0]]),
                          beta=np.array([[1.0, 2.0], [-2.0, -1.0]]),
                          sigma2=np.array([0.3, 0.3]))
        data = gen_moe_sample(truth, uniform_box_sampler([-2.0], [2.0]), 500, seed=1)
        config = FitConfig(n_starts=4, rel_tol=1e-10, max_cycles=500)
        result = multi_start_fit(data, 2, "gaussian", ExpertDesign(), config)
        assert result.converged
        total = score_matrix(data, result.theta).sum(axis=0)
        assert np.max(np.abs(total)) <= 1e-4 * (1.0 + abs(result.q_hat))


class TestFlattenRoundTrip:
    @pytest.mark.parametrize("family",
                             ["gaussian", "logistic", "poisson", "multinomial"])
    def test_round_trip(self, family):
        rng = np.random.default_rng(5)
        theta = random_theta(family, rng, g=3, p=2)
        vec = flatten_params(theta)
        back = unflatten_params(theta, vec)
        assert np.array_equal(back.gating, theta.gating)
        assert np.array_equal(back.beta, theta.beta)
        assert len(param_labels(theta)) == vec.size


class TestSandwichCovariance:
    def test_symmetry_and_nonnegative_diagonal(self):
        rng = np.random.default_rng(6)
        truth = random_theta("gaussian", rng)
        data = gen_moe_sample(truth, uniform_box_sampler([-2.0], [2.0]), 300, seed=2)
        config = FitConfig(n_starts=3, max_cycles=200)
        result = multi_start_fit(data, 2, "gaussian", ExpertDesign(), config)
        sw = sandwich_covariance(data, result.theta)
        assert np.allclose(sw.cov, sw.cov.T, atol=1e-10)
        assert np.all(np.diag(sw.cov) >= 0)
        assert np.allclose(sw.meat, sw.meat.T, atol=1e-8)
        assert np.linalg.eigvalsh(sw.meat).min() >= -1e-8

    def test_g1_matches_hc0_oracle(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(400, 1))
        y = 1.0 + 2.0 * X[:, 0] + rng.normal(size=400) * (1 + 0.5 * np.abs(X[:, 0]))
        data = Dataset(X, y, "real")
        config = FitConfig()
        result = fit(data, initialize(data, 1, "gaussian", ExpertDesign(), 0, config),
                     config)
        sw = sandwich_covariance(data, result.theta)
        # classical HC0: (X'X)^-1 X' diag(e^2) X (X'X)^-1 for the coefficients
        Xt = np.column_stack([np.ones(400), X])
        e = y - Xt @ result.theta.beta[0]
        XtX_inv = np.linalg.inv(Xt.T @ Xt)
        hc0 = XtX_inv @ (Xt * (e ** 2)[:, None]).T @ Xt @ XtX_inv
        got = sw.cov[:2, :2]
        assert np.max(np.abs(got - hc0)) / np.max(np.abs(hc0)) < 1e-4

    def test_information_equality_when_well_specified(self):
        truth = MoeParams(family="gaussian",
                          gating=np.array([[1.0, 1.5], [0.0, 0.0]]),
                          beta=np.array([[2.0, 2.0], [-2.0, -1.0]]),
                          sigma2=np.array([0.4, 0.4]))
        data = gen_moe_sample(truth, uniform_box_sampler([-2.0], [2.0]), 5000, seed=3)
        config = FitConfig(n_starts=4, rel_tol=1e-9, max_cycles=400)
        result = multi_start_fit(data, 2, "gaussian", ExpertDesign(), config)
        sw = sandwich_covariance(data, result.theta)
        binv = np.linalg.inv(sw.bread)
        sandwich = binv @ sw.meat @ binv
        rel = np.linalg.norm(sandwich - (-binv)) / np.linalg.norm(binv)
        assert rel < 0.15

    def test_labels_align_with_cov(self):
        rng = np.random.default_rng(8)
        truth = random_theta("gaussian", rng)
        data = gen_moe_sample(truth, uniform_box_sampler([-2.0], [2.0]), 200, seed=4)
        result = multi_start_fit(data, 2, "gaussian", ExpertDesign(),
                                 FitConfig(n_starts=2, max_cycles=100))
        sw = sandwich_covariance(data, result.theta)
        assert len(sw.labels) == sw.cov.shape[0] == sw.cov.shape[1]
        assert standard_errors(sw).shape == (sw.cov.shape[0],)


class TestMeanCi:
    def fitted_g1(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(300, 1))
        y = 1.0 + 2.0 * X[:, 0] + rng.normal(size=300)
        data = Dataset(X, y, "real")
        config = FitConfig()
        result = fit(data, initialize(data, 1, "gaussian", ExpertDesign(), 0, config),
                     config)
        return data, result.theta

    def test_zero_covariance_degenerate_interval(self):
        _, theta = self.fitted_g1()
        dim = flatten_params(theta).size
        x = np.array([0.5])
        lo, hi = mean_ci(x, theta, np.zeros((dim, dim)))
        m = predict_mean(x, theta)
        assert lo == pytest.approx(m)
        assert hi == pytest.approx(m)

    def test_matches_ols_robust_ci(self):
        data, theta = self.fitted_g1()
        sw = sandwich_covariance(data, theta)
        x = np.array([0.7])
        lo, hi = mean_ci(x, theta, sw.cov, level=0.95)
        # delta-method oracle on the linear mean with the HC0 block
        from scipy.stats import norm
        xv = np.array([1.0, 0.7])
        se = np.sqrt(xv @ sw.cov[:2, :2] @ xv)
        m = predict_mean(x, theta)
        assert lo == pytest.approx(m - norm.ppf(0.975) * se, rel=1e-3)
        assert hi == pytest.approx(m + norm.ppf(0.975) * se, rel=1e-3)

    def test_wider_level_contains_narrower(self):
        data, theta = self.fitted_g1()
        sw = sandwich_covariance(data, theta)
        x = np.array([-0.4])
        lo95, hi95 = mean_ci(x, theta, sw.cov, level=0.95)
        lo99, hi99 = mean_ci(x, theta, sw.cov, level=0.99)
        assert lo99 < lo95 < hi95 < hi99

    def test_non_gaussian_rejected(self):
        theta = MoeParams(family="logistic", gating=np.zeros((1, 2)),
                          beta=np.zeros((1, 2)))
        with pytest.raises(InferenceError):
            mean_ci(np.array([0.0]), theta, np.zeros((2, 2)))

    def test_bad_level_rejected(self):
        _, theta = self.fitted_g1()
        dim = flatten_params(theta).size
        with pytest.raises(ValueError):
            mean_ci(np.array([0.0]), theta, np.zeros((dim, dim)), level=1.5)
