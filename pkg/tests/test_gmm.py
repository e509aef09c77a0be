import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from conftest import two_blobs
from eacgm.errors import DegenerateData, DimensionMismatch, SingularCovariance, TooFewPoints
from eacgm.gmm import (
    GmmModel,
    bic,
    component_log_densities,
    component_log_density,
    default_reg,
    fit_em,
    load_model,
    log_likelihood,
    mixture_density,
    n_parameters,
    responsibilities,
    save_model,
    select_k_bic,
)


def model_1d(means, variances, weights=None):
    k = len(means)
    weights = weights or [1.0 / k] * k
    return GmmModel(np.array(weights), np.array(means, float).reshape(k, 1), np.array(variances, float).reshape(k, 1, 1))


class TestComponentDensity:
    def test_standard_normal_at_mean(self):
        assert component_log_density(model_1d([0], [1]), [0.0], 0) == pytest.approx(-0.918939, abs=1e-6)
        assert component_log_density(model_1d([0], [1]), [0.0], 0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_identity_2d(self):
        m = GmmModel(np.ones(1), np.zeros((1, 2)), np.eye(2)[None])
        assert component_log_density(m, [0.0, 0.0], 0) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)

    def test_variance_four(self):
        # oracle: direct closed form exp(-1/2) / (2 sqrt(2 pi))
        expect = math.log(math.exp(-0.5) / (2 * math.sqrt(2 * math.pi)))
        got = component_log_density(model_1d([0], [4]), [2.0], 0)
        assert got == pytest.approx(expect, abs=1e-12)
        assert got == pytest.approx(-2.112086, abs=1e-6)

    def test_matches_scipy_full_covariance(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(3, 3))
        cov = A @ A.T + 0.5 * np.eye(3)
        mu = rng.normal(size=3)
        m = GmmModel(np.ones(1), mu[None], cov[None])
        X = rng.normal(size=(50, 3)) * 3
        np.testing.assert_allclose(component_log_densities(m, X)[:, 0], multivariate_normal(mu, cov).logpdf(X), rtol=1e-11)

    def test_far_tail_stays_finite(self):
        m = GmmModel(np.ones(1), np.zeros((1, 3)), np.eye(3)[None] * 1e-4)
        val = component_log_density(m, [50.0, 50.0, 50.0], 0)
        assert math.isfinite(val) and val < -1e7

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            component_log_density(model_1d([0], [1]), [0.0, 1.0], 0)

    def test_singular_without_regularization(self):
        m = GmmModel(np.ones(1), np.zeros((1, 2)), np.zeros((1, 2, 2)))
        with pytest.raises(SingularCovariance):
            component_log_density(m, [0.0, 0.0], 0)


class TestMixtureDensity:
    def test_single_component(self):
        m = model_1d([1.0], [2.0])
        assert mixture_density(m, [0.3]) == pytest.approx(math.exp(component_log_density(m, [0.3], 0)), rel=1e-14)

    def test_identical_components(self):
        a = model_1d([1.0], [2.0])
        b = model_1d([1.0, 1.0], [2.0, 2.0])
        assert mixture_density(b, [0.3]) == pytest.approx(mixture_density(a, [0.3]), rel=1e-14)

    def test_symmetric_pair(self):
        m = model_1d([-1.0, 1.0], [1.0, 1.0])
        oracle = 0.5 * norm.pdf(0, -1, 1) + 0.5 * norm.pdf(0, 1, 1)
        assert mixture_density(m, [0.0]) == pytest.approx(oracle, abs=1e-12)
        assert mixture_density(m, [0.0]) == pytest.approx(0.241971, abs=1e-6)

    def test_underflow_safe(self):
        m = model_1d([-1.0, 1.0], [1.0, 1.0])
        assert mixture_density(m, [60.0]) >= 0.0
        from eacgm.gmm import mixture_log_densities

        assert math.isfinite(mixture_log_densities(m, np.array([[60.0]]))[0])


class TestResponsibilities:
    def test_single(self):
        np.testing.assert_array_equal(responsibilities(model_1d([0], [1]), np.array([[0.0], [5.0]])), [[1.0], [1.0]])

    def test_symmetric(self):
        np.testing.assert_allclose(responsibilities(model_1d([-2, 2], [1, 1]), np.array([[0.0]])), [[0.5, 0.5]], atol=1e-15)

    def test_closed_form_ratio(self):
        m = model_1d([0, 4], [1, 1])
        a, b = norm.pdf(1, 0, 1), norm.pdf(1, 4, 1)
        g = responsibilities(m, np.array([[1.0]]))
        assert g[0, 0] == pytest.approx(a / (a + b), abs=1e-12)
        assert g[0, 0] == pytest.approx(0.982014, abs=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.integers(0, 10_000))
    def test_rows_normalized(self, xs, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 5))
        m = model_1d(list(rng.normal(size=k) * 10), list(rng.uniform(0.01, 5, size=k)), list(rng.dirichlet(np.ones(k))))
        g = responsibilities(m, np.array(xs).reshape(-1, 1))
        assert np.all(g >= 0) and np.all(g <= 1)
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-9)


class TestFitEm:
    def test_k1_closed_form(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(500, 3)) @ np.array([[1, 0.3, 0], [0, 2, 0.1], [0, 0, 0.5]]) + 4
        reg = 1e-3
        m = fit_em(X, 1, reg=reg, seed=2)
        mean = X.sum(axis=0) / len(X)
        diff = X - mean
        cov = diff.T @ diff / len(X) + reg * np.eye(3)
        np.testing.assert_allclose(m.means[0], mean, atol=1e-9, rtol=0)
        np.testing.assert_allclose(m.covariances[0], cov, atol=1e-9, rtol=0)
        assert m.weights.tolist() == [1.0]

    def test_default_reg_scale_aware(self):
        X = np.random.default_rng(0).normal(size=(200, 2)) * [1.0, 100.0]
        S = np.cov(X, rowvar=False, bias=True)
        assert default_reg(X) == pytest.approx(1e-6 * np.trace(S) / 2, rel=1e-12)
        assert fit_em(X, 1).fit_report.reg == pytest.approx(default_reg(X), rel=1e-15)

    @pytest.mark.parametrize("init", ["kmeans++", "random"])
    def test_two_blob_recovery(self, init):
        X = two_blobs(seed=5)
        m = fit_em(X, 2, seed=1, init=init)
        order = np.argsort(m.means[:, 0])
        np.testing.assert_allclose(m.means[order, 0], [-5, 5], atol=0.2)
        np.testing.assert_allclose(m.weights[order], [0.5, 0.5], atol=0.05)

    def test_invariants(self):
        X = np.random.default_rng(2).normal(size=(400, 2))
        m = fit_em(X, 3, seed=4)
        assert abs(m.weights.sum() - 1) <= 1e-12 and np.all(m.weights >= 0)
        for cov in m.covariances:
            np.testing.assert_allclose(cov, cov.T, atol=1e-12, rtol=0)
            assert np.linalg.eigvalsh(cov).min() > 0
        ll = np.array(m.fit_report.per_iteration_log_likelihoods)
        assert np.all(np.diff(ll) >= -1e-8)
        assert m.fit_report.final_log_likelihood == pytest.approx(log_likelihood(m, X), rel=1e-12)

    def test_reproducible(self):
        X = np.random.default_rng(8).normal(size=(300, 2))
        a = fit_em(X, 3, seed=9)
        b = fit_em(X, 3, seed=9)
        assert a.fit_report == b.fit_report
        assert np.array_equal(a.means, b.means) and np.array_equal(a.covariances, b.covariances)

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            fit_em(np.zeros((2, 1)), 3)

    def test_degenerate(self):
        with pytest.raises(DegenerateData):
            fit_em(np.ones((10, 2)), 2)

    def test_identical_points_k1_ok(self):
        m = fit_em(np.ones((10, 2)), 1)
        np.testing.assert_allclose(m.means, [[1.0, 1.0]])

    def test_collapse_reseeds_and_restarts_trajectory(self):
        # 3 distinct locations, one of them a single point; K=4 starves a component
        X = np.concatenate([np.zeros((50, 1)), np.full((50, 1), 10.0), [[30.0]]])
        X = X + np.random.default_rng(0).normal(scale=1e-3, size=X.shape)
        m = fit_em(X, 4, seed=0, max_iter=300)
        ll = np.array(m.fit_report.per_iteration_log_likelihoods)
        assert np.all(np.diff(ll) >= -1e-8)
        assert abs(m.weights.sum() - 1) <= 1e-12


def test_density_integrates_to_one():
    X = two_blobs(n=1000, sep=3, seed=2)
    m = fit_em(X, 3, seed=0)
    sd = math.sqrt(m.covariances.max())
    grid = np.linspace(m.means.min() - 10 * sd, m.means.max() + 10 * sd, 10_000)
    from eacgm.gmm import mixture_log_densities

    dens = np.exp(mixture_log_densities(m, grid.reshape(-1, 1)))
    assert np.all(dens > 0)
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


class TestBic:
    def test_parameter_count(self):
        assert n_parameters(1, 1) == 2
        assert n_parameters(2, 2) == 1 + 4 + 6

    def test_single_blob(self):
        X = np.random.default_rng(4).normal(size=(600, 2)) * 0.1
        best, scores, models = select_k_bic(X, [1, 2, 3], seed=0)
        # oracle: recompute BIC from each fitted model's log-likelihood by hand
        for k, model in models.items():
            by_hand = -2 * log_likelihood(model, X) + n_parameters(k, 2) * math.log(len(X))
            assert scores[k] == pytest.approx(by_hand, rel=1e-12)
        assert best == min(scores, key=scores.get) == 1

    def test_two_separated_blobs(self):
        rng = np.random.default_rng(5)
        X = np.concatenate([rng.normal(-10, 1, (400, 2)), rng.normal(10, 1, (400, 2))])
        best, scores, _ = select_k_bic(X, [1, 2, 3], seed=0)
        assert best == min(scores, key=scores.get) == 2

    def test_singleton_range(self):
        X = two_blobs(n=100)
        best, scores, _ = select_k_bic(X, [1])
        assert best == 1 and list(scores) == [1]
        assert scores[1] == pytest.approx(bic(fit_em(X, 1), X))

    def test_skips_failing_k(self):
        X = np.random.default_rng(1).normal(size=(5, 1))
        best, scores, _ = select_k_bic(X, [1, 9])
        assert best == 1 and 9 not in scores

    def test_all_fail_raises(self):
        with pytest.raises(TooFewPoints):
            select_k_bic(np.zeros((3, 1)), [5, 6])


def test_save_load_roundtrip(tmp_path):
    X = np.random.default_rng(6).normal(size=(300, 3))
    m = fit_em(X, 2, seed=3)
    p = tmp_path / "m.json"
    save_model(m, p)
    back = load_model(p)
    for a, b in [(m.weights, back.weights), (m.means, back.means), (m.covariances, back.covariances)]:
        assert np.max(np.abs(a - b)) <= 1e-15
    assert back.fit_report == m.fit_report
    assert set(__import__("json").loads(p.read_text())) >= {"k", "weights", "means", "covariances", "fit_report"}
