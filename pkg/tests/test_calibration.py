import logging

import numpy as np
import pytest

from calibration import (
    CalibrationModel,
    DeltaWeights,
    ProxySet,
    attenuated_probability,
    blup_impute,
    combine_proxies,
    delta_weights,
    fit_calibration,
    fit_calibration_conditional,
    pooling_weights,
)
from errors import DegenerateErrorEstimateError, PreconditionError, SingularCovarianceError
from regress import expit


def _brute_force_components(p1, p2, z, delta):
    """Variance components by explicit summation, k = 2, scalar X"""
    n = len(p1)
    proxies = [p1, p2]

    def cov(u, v):
        mu, mv = sum(u) / n, sum(v) / n
        return sum((u[i] - mu) * (v[i] - mv) for i in range(n)) / (n - 1)

    # with k = 2 the leave-one-out mean of the other proxy is the other proxy
    m_total = 0.0
    for j in range(2):
        other = proxies[1 - j]
        for i in range(n):
            m_total += (proxies[j][i] - other[i]) ** 2
    m_total *= 1.0 / (2 * n)
    sigma_1 = (cov(p1, p1) + cov(p2, p2) - m_total) / 2
    m_j = [cov(p1, p1) - sigma_1, cov(p2, p2) - sigma_1]
    xstar = [delta[0] * p1[i] + delta[1] * p2[i] for i in range(n)]
    sigma_2 = cov(xstar, xstar) - (delta[0] ** 2 * m_j[0] + delta[1] ** 2 * m_j[1])
    return m_total, m_j, sigma_1, sigma_2, cov(xstar, z)


class TestMomentEstimators:
    def test_hand_sized_table_matches_summation(self):
        p1 = [1.0, 2.0, 4.0]
        p2 = [1.5, 1.0, 5.0]
        z = [0.0, 1.0, 3.0]
        model = fit_calibration(ProxySet([p1, p2]), z, "equal")
        m_total, m_j, sigma_1, sigma_2, sigma_xz = _brute_force_components(p1, p2, z, [0.5, 0.5])
        assert model.m_total[0, 0] == pytest.approx(m_total, abs=1e-12)
        assert model.m_per_proxy[0][0, 0] == pytest.approx(m_j[0], abs=1e-12)
        assert model.m_per_proxy[1][0, 0] == pytest.approx(m_j[1], abs=1e-12)
        assert model.sigma_xx_1[0, 0] == pytest.approx(sigma_1, abs=1e-12)
        assert model.sigma_xx_2[0, 0] == pytest.approx(sigma_2, abs=1e-12)
        assert model.sigma_xz[0, 0] == pytest.approx(sigma_xz, abs=1e-12)

    def test_needs_two_proxies(self):
        with pytest.raises(PreconditionError, match="at least 2 proxies"):
            fit_calibration(ProxySet([[1.0, 2.0, 3.0]]))

    def test_needs_three_rows(self):
        with pytest.raises(PreconditionError, match="at least 3 rows"):
            fit_calibration(ProxySet([[1.0, 2.0], [1.1, 2.1]]))

    def test_conditional_subset_too_small(self):
        proxies = ProxySet([[1.0, 2.0, 3.0, 4.0], [1.1, 2.2, 2.9, 4.1]])
        with pytest.raises(PreconditionError, match="at least 3 needed"):
            fit_calibration_conditional(proxies, None, "equal", [1, 1, 0, 0])


class TestDeltaWeights:
    def _m(self):
        return [np.array([[0.25]]), np.array([[0.5]])]

    def test_equal(self):
        proxies = ProxySet([np.zeros(3), np.zeros(3)])
        np.testing.assert_allclose(delta_weights(proxies, "equal", self._m()).delta, [0.5, 0.5])

    def test_trace_inverse(self):
        proxies = ProxySet([np.zeros(3), np.zeros(3)])
        np.testing.assert_allclose(delta_weights(proxies, "trace_inverse", self._m()).delta, [2 / 3, 1 / 3])

    def test_blup_optimal_scalar_matches_trace_inverse(self):
        proxies = ProxySet([np.zeros(3), np.zeros(3)])
        w = delta_weights(proxies, "blup_optimal", self._m(), beta_hint=[1.7])
        np.testing.assert_allclose(w.delta, [2 / 3, 1 / 3], atol=1e-10)

    def test_blup_optimal_needs_hint(self):
        proxies = ProxySet([np.zeros(3), np.zeros(3)])
        with pytest.raises(PreconditionError):
            delta_weights(proxies, "blup_optimal", self._m())

    def test_zero_error_proxy_is_degenerate(self):
        x = np.array([0.3, -1.0, 2.0, 0.7])
        with pytest.raises(DegenerateErrorEstimateError):
            fit_calibration(ProxySet([x, x.copy()]), None, "trace_inverse")

    def test_weights_must_sum_to_one(self):
        with pytest.raises(PreconditionError):
            DeltaWeights(np.array([0.6, 0.6]), "equal")

    def test_combine(self):
        proxies = ProxySet([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(combine_proxies(proxies, DeltaWeights(np.array([0.25, 0.75]), "equal"))[:, 0], [2.5, 3.5])


class TestBlup:
    def _univariate(self):
        # X ~ (0, 1), two proxies with error variance 0.25 each, pooled error 0.125
        return CalibrationModel.from_components(
            [0.0], [[1.0]], [[[0.25]], [[0.25]]], DeltaWeights(np.array([0.5, 0.5]), "equal")
        )

    def test_shrinkage(self):
        model = self._univariate()
        assert model.shrinkage[0, 0] == pytest.approx(1 / 1.125)
        assert blup_impute(model, [1.2])[0, 0] == pytest.approx(1.0666667, abs=1e-6)

    def test_zero_error_is_identity(self):
        model = CalibrationModel.from_components(
            [0.5], [[2.0]], [[[0.0]], [[0.0]]], DeltaWeights(np.array([0.5, 0.5]), "equal")
        )
        np.testing.assert_allclose(blup_impute(model, [[1.0], [3.0]])[:, 0], [1.0, 3.0])

    def test_restrict_to_single_proxy(self):
        single = self._univariate().restrict([1])
        assert single.k == 1
        assert single.shrinkage[0, 0] == pytest.approx(1 / 1.25)

    def test_z_required_when_fitted_with_z(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=50)
        z = x + rng.normal(size=50)
        model = fit_calibration(ProxySet([x + rng.normal(size=50), x + rng.normal(size=50)]), z, "equal")
        with pytest.raises(PreconditionError, match="Z is required"):
            blup_impute(model, [0.0])

    def test_singular_joint_covariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=40)
        p1, p2 = x + rng.normal(size=40), x + rng.normal(size=40)
        with pytest.raises(SingularCovarianceError):
            fit_calibration(ProxySet([p1, p2]), (p1 + p2) / 2, "equal")

    def test_population_oracle(self):
        rng = np.random.default_rng(2024)
        n = 100_000
        x = rng.normal(1.0, 1.0, n)
        p1 = x + rng.normal(0.0, 0.5, n)
        p2 = x + rng.normal(0.0, np.sqrt(0.5), n)
        proxies = ProxySet([p1, p2])
        model = fit_calibration(proxies, None, "trace_inverse")

        np.testing.assert_allclose(model.delta.delta, [2 / 3, 1 / 3], atol=0.02)
        # pooled error 1/6, so the conditional-mean slope is 1 / (1 + 1/6)
        assert model.shrinkage[0, 0] == pytest.approx(6 / 7, abs=0.02)
        assert model.mu_x[0] == pytest.approx(1.0, abs=0.02)

        x_hat = blup_impute(model, combine_proxies(proxies, model.delta))[:, 0]
        x_bar = (p1 + p2) / 2
        assert np.mean((x_hat - x) ** 2) < np.mean((x_bar - x) ** 2)

    def test_multivariate_with_z(self):
        rng = np.random.default_rng(7)
        n = 20_000
        cov = np.array([[1.0, 0.3, 0.5], [0.3, 1.0, 0.2], [0.5, 0.2, 1.0]])
        xz = rng.multivariate_normal(np.zeros(3), cov, n)
        x, z = xz[:, :2], xz[:, 2:]
        proxies = ProxySet([x + rng.normal(0, 0.5, (n, 2)), x + rng.normal(0, 0.5, (n, 2))])
        model = fit_calibration(proxies, z, "trace_inverse")
        assert (model.d, model.q) == (2, 1)
        x_hat = blup_impute(model, combine_proxies(proxies, model.delta), z)
        assert x_hat.shape == (n, 2)
        assert np.mean((x_hat - x) ** 2) < np.mean((combine_proxies(proxies, model.delta) - x) ** 2)


class TestInvariants:
    def _proxies(self, n, seed=17, scales=(0.4, 0.6, 0.9)):
        rng = np.random.default_rng(seed)
        x = rng.normal(0.5, 1.0, n)
        return x, [x + rng.normal(0.0, s, n) for s in scales]

    def test_blup_is_affine_equivariant(self):
        _, raw = self._proxies(500)
        z = raw[0] * 0.3 + np.random.default_rng(3).normal(size=500)
        a, b = 2.5, -3.0
        base = fit_calibration(ProxySet(raw), z, "trace_inverse")
        moved = fit_calibration(ProxySet([a * p + b for p in raw]), z, "trace_inverse")

        np.testing.assert_allclose(moved.delta.delta, base.delta.delta, rtol=1e-10)
        x_hat = blup_impute(base, combine_proxies(ProxySet(raw), base.delta), z)
        x_hat_moved = blup_impute(moved, combine_proxies(ProxySet([a * p + b for p in raw]), moved.delta), z)
        np.testing.assert_allclose(x_hat_moved, a * x_hat + b, rtol=1e-9, atol=1e-9)

    def test_sigma_estimators_agree_at_large_n(self):
        _, raw = self._proxies(200_000)
        model = fit_calibration(ProxySet(raw), None, "trace_inverse")
        np.testing.assert_allclose(model.sigma_xx_1, model.sigma_xx_2, atol=0.02)
        np.testing.assert_allclose(model.sigma_xx_1, [[1.0]], atol=0.02)

    @pytest.mark.parametrize("scheme", ["equal", "trace_inverse"])
    def test_proxy_order_does_not_matter(self, scheme):
        _, raw = self._proxies(400)
        order = [2, 0, 1]
        base = fit_calibration(ProxySet(raw), None, scheme)
        permuted_set = ProxySet([raw[j] for j in order])
        permuted = fit_calibration(permuted_set, None, scheme)

        np.testing.assert_allclose(permuted.delta.delta, base.delta.delta[order], rtol=1e-10)
        np.testing.assert_allclose(permuted.sigma_xx_2, base.sigma_xx_2, rtol=1e-10)
        np.testing.assert_allclose(
            blup_impute(permuted, combine_proxies(permuted_set, permuted.delta)),
            blup_impute(base, combine_proxies(ProxySet(raw), base.delta)),
            rtol=1e-10,
            atol=1e-12,
        )

    def test_conditional_with_full_mask_matches_unconditional(self):
        _, raw = self._proxies(300)
        z = np.random.default_rng(5).normal(size=300)
        full = fit_calibration(ProxySet(raw), z, "trace_inverse")
        masked = fit_calibration_conditional(ProxySet(raw), z, "trace_inverse", np.ones(300))
        for name in ("mu_x", "mu_z", "sigma_xx_1", "sigma_xx_2", "m_total", "sigma_xz", "sigma_zz", "gain"):
            np.testing.assert_array_equal(getattr(masked, name), getattr(full, name))
        np.testing.assert_array_equal(masked.delta.delta, full.delta.delta)


class TestPoolingWeights:
    def test_equal_needs_no_moments(self):
        proxies = ProxySet([[1.0, 2.0], [3.0, 5.0]])
        np.testing.assert_allclose(pooling_weights(proxies, "equal").delta, [0.5, 0.5])

    def test_matches_calibration_weights(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=500)
        proxies = ProxySet([x + rng.normal(0, 0.3, 500), x + rng.normal(0, 0.8, 500)])
        np.testing.assert_allclose(
            pooling_weights(proxies, "trace_inverse").delta,
            fit_calibration(proxies, None, "trace_inverse").delta.delta,
        )

    def test_zero_error_falls_back_to_equal(self, caplog):
        x = np.array([0.3, -1.0, 2.0, 0.7])
        with caplog.at_level(logging.WARNING, logger="calibration"):
            weights = pooling_weights(ProxySet([x, x.copy()]), "trace_inverse")
        assert weights.scheme == "equal"
        np.testing.assert_allclose(weights.delta, [0.5, 0.5])
        assert any("equal weights" in r.getMessage() for r in caplog.records)


def test_attenuated_probability():
    assert attenuated_probability(0.2, [1.0], None, 0.5, None, [[0.0]]) == pytest.approx(expit(0.7))
    shrunk = attenuated_probability(0.2, [1.0], None, 0.5, None, [[1.0]])
    assert 0.5 < shrunk < expit(0.7)
    values = attenuated_probability(0.0, [1.0], None, np.array([-1.0, 0.0, 1.0]), None, [[0.5]])
    assert values.shape == (3,)
    assert values[1] == pytest.approx(0.5)
