import math

import numpy as np
import pytest

import mnboot
from dwols import FitOptions, StageSpec, fit_dwols
from errors import BootstrapAbortedError, PreconditionError, SeparationError
from mnboot import estimate_p, mn_bootstrap, percentile_interval, resample_size, select_zeta
from regress import expit
from schemas import BootstrapConfig, ZetaGrid
from simulate import generate_coverage, scenario_config, two_stage_specs
from tabledesign import DataTable, TrialDataset


class TestResampleSize:
    @pytest.mark.parametrize("zeta", ZetaGrid().values())
    def test_p_zero_is_n(self, zeta):
        assert resample_size(1000, 0.0, zeta) == 1000

    def test_fully_non_regular(self):
        assert resample_size(1000, 1.0, 0.05) == 720

    def test_monotone_and_bounded(self):
        for zeta in (0.025, 0.05, 0.1, 0.3):
            sizes = [resample_size(500, p, zeta) for p in np.linspace(0, 1, 21)]
            assert all(a >= b for a, b in zip(sizes, sizes[1:]))
            assert min(sizes) >= math.ceil(500 ** (1 / (1 + zeta)) - 1e-9)
            assert max(sizes) == 500

    @pytest.mark.parametrize("n,zeta,expected", [(500, 0.1, 285), (2000, 0.1, 1003)])
    def test_rounding_raised_to_lower_bound(self, n, zeta, expected):
        # n^(1/(1+zeta)) is 284.19 and 1002.16 here, so half-up alone gives one less
        assert math.floor(n ** (1 / (1 + zeta)) + 0.5) == expected - 1
        assert resample_size(n, 1.0, zeta) == expected

    def test_rounding_without_bump(self):
        assert resample_size(100, 1.0, 0.1) == 66

    def test_small_n_clamped(self):
        assert resample_size(1, 0.5, 0.1) == 1
        assert 2 <= resample_size(3, 1.0, 0.3) <= 3

    @pytest.mark.parametrize("n,p,zeta", [(0, 0.1, 0.1), (10, 1.5, 0.1), (10, 0.1, 0.0)])
    def test_invalid(self, n, p, zeta):
        with pytest.raises(PreconditionError):
            resample_size(n, p, zeta)


def test_percentile_interval():
    samples = np.arange(101, dtype=float)[:, None]
    np.testing.assert_allclose(percentile_interval(samples, 0.9), [[5.0, 95.0]])
    with_nan = np.vstack([samples, [[np.nan]]])
    np.testing.assert_allclose(percentile_interval(with_nan, 0.9), [[5.0, 95.0]])


def _config(**kw):
    base = dict(B=20, B1=3, B2=8, Bp=12, seed=99, threads=1, zeta_grid=ZetaGrid(start=0.05, step=0.05, max=0.1))
    base.update(kw)
    return BootstrapConfig(**base)


class TestMnBootstrap:
    def test_standard_bootstrap_uses_n(self, one_stage_data, one_stage_specs):
        report = mn_bootstrap(one_stage_data, one_stage_specs, _config(standard=True))
        assert report.m == report.n == one_stage_data.n_rows
        assert report.p_hat == 0.0
        assert report.labels == ("A", "A*X")
        assert report.resamples.shape == (20, 2)
        assert np.all(report.intervals[:, 0] <= report.intervals[:, 1])

    def test_p_zero_reproduces_standard_bootstrap(self, one_stage_data, one_stage_specs):
        standard = mn_bootstrap(one_stage_data, one_stage_specs, _config(standard=True))
        p_zero = mn_bootstrap(one_stage_data, one_stage_specs, _config(p_hat=0.0, zeta=0.1))
        np.testing.assert_array_equal(standard.resamples, p_zero.resamples)

    def test_seeded_and_thread_independent(self, one_stage_data, one_stage_specs):
        one = mn_bootstrap(one_stage_data, one_stage_specs, _config(standard=True, threads=1))
        two = mn_bootstrap(one_stage_data, one_stage_specs, _config(standard=True, threads=3))
        np.testing.assert_array_equal(one.resamples, two.resamples)
        other = mn_bootstrap(one_stage_data, one_stage_specs, _config(standard=True, seed=100))
        assert not np.array_equal(one.resamples, other.resamples)

    def test_fixed_p_shrinks_m(self, one_stage_data, one_stage_specs):
        report = mn_bootstrap(one_stage_data, one_stage_specs, _config(p_hat=1.0, zeta=0.1))
        assert report.m == resample_size(one_stage_data.n_rows, 1.0, 0.1)
        assert report.m < report.n

    def test_covers(self, one_stage_data, one_stage_specs):
        report = mn_bootstrap(one_stage_data, one_stage_specs, _config(standard=True))
        np.testing.assert_array_equal(report.covers(report.intervals[:, 0]), [True, True])
        lo, hi = report.interval("A*X")
        assert lo <= hi

    def test_too_many_failures_abort(self):
        rng = np.random.default_rng(4)
        n = 300
        x = rng.normal(size=n)
        a = np.zeros(n)
        a[0] = 1.0
        table = DataTable({"X": x, "A": a, "Y": x + a + rng.normal(size=n)})
        data = TrialDataset(table, (), ("A",), "Y")
        specs = [StageSpec.from_strings(1, "A", "1", "1 + X", "1")]
        with pytest.raises(BootstrapAbortedError):
            mn_bootstrap(data, specs, _config(standard=True, B=40))


class TestEstimateP:
    def test_large_blip_gives_zero(self):
        rng = np.random.default_rng(8)
        n = 400
        x = rng.normal(size=n)
        a = (rng.uniform(size=n) < expit(x)).astype(float)
        table = DataTable({"X": x, "A": a, "Y": x + 100.0 * a + rng.normal(size=n)})
        data = TrialDataset(table, (), ("A",), "Y")
        specs = [StageSpec.from_strings(1, "A", "1 + X", "1 + X", "1 + X")]
        assert estimate_p(data, specs, _config(Bp=30)) == 0.0

    def test_null_subpopulation(self):
        cfg = scenario_config("coverage-3", n=1000, seed=21)
        data = generate_coverage(cfg)
        p_hat = estimate_p(data, two_stage_specs(with_z=True), _config(Bp=60))
        assert p_hat == pytest.approx(0.5, abs=0.1)


def test_select_zeta_returns_grid_value(one_stage_data, one_stage_specs):
    config = _config()
    fit = fit_dwols(one_stage_data, one_stage_specs)
    selection = select_zeta(one_stage_data, one_stage_specs, config, fit=fit)
    assert selection.zeta in config.zeta_grid.values()
    assert set(selection.coverage) <= set(config.zeta_grid.values())
    assert all(0.0 <= c <= 1.0 for c in selection.coverage.values())


class TestFailureAccounting:
    def _flaky(self, monkeypatch, fail_every_call):
        """fit_dwols that raises on the first attempt of each resample, and on the retry too if asked"""
        calls = []

        def fit(data, specs, options=None):
            calls.append(1)
            if fail_every_call or len(calls) % 2 == 1:
                raise SeparationError("separated resample")
            return real_fit(data, specs, options)

        real_fit = mnboot.fit_dwols
        monkeypatch.setattr(mnboot, "fit_dwols", fit)
        return calls

    def test_recovered_resamples_are_not_failures(self, monkeypatch, one_stage_data, one_stage_specs):
        calls = self._flaky(monkeypatch, fail_every_call=False)
        estimates, failures = mnboot._resample_estimates(
            one_stage_data, one_stage_specs, FitOptions(), one_stage_data.n_rows, 10, 5, (1,), 2
        )
        assert len(calls) == 20
        assert failures == 0
        assert not np.isnan(estimates).any()

    def test_failed_retries_abort(self, monkeypatch, one_stage_data, one_stage_specs):
        self._flaky(monkeypatch, fail_every_call=True)
        with pytest.raises(BootstrapAbortedError, match="10 of 10"):
            mnboot._resample_estimates(
                one_stage_data, one_stage_specs, FitOptions(), one_stage_data.n_rows, 10, 5, (1,), 2
            )
