import json

import numpy as np
import pytest

from artifacts import ArtifactManager, config_digest
from dwols import fit_dwols
from errors import ConfigError, IngestionError
from mnboot import mn_bootstrap
from recommend import PseudoCorrector, predict_one
from schemas import BootstrapConfig, RunConfig
from simulate import generate_coverage, scenario_config, two_stage_specs


@pytest.fixture
def manager(tmp_path):
    return ArtifactManager(str(tmp_path))


def test_config_digest_is_stable():
    assert config_digest(RunConfig(seed=1)) == config_digest(RunConfig(seed=1))
    assert config_digest(RunConfig(seed=1)) != config_digest(RunConfig(seed=2))
    assert len(config_digest(RunConfig())) == 16
    assert config_digest(None) == "none"


def test_coefficients_report(manager, one_stage_data, one_stage_specs):
    fit = fit_dwols(one_stage_data, one_stage_specs)
    path = manager.write_coefficients(fit, "out/coefficients.csv", seed=7, config=RunConfig(seed=7))
    header, frame = manager.read_report(path)
    assert header["tool"] == "dtr-me"
    assert header["seed"] == "7"
    assert header["formulation"] == "regret"
    assert list(frame.columns) == ["stage", "model", "term", "estimate"]
    blip = frame[(frame["model"] == "blip") & (frame["term"] == "A*X")]
    assert blip["estimate"].iloc[0] == pytest.approx(fit.final.psi[1], rel=1e-9)


def test_bootstrap_report_header(manager, one_stage_data, one_stage_specs):
    report = mn_bootstrap(one_stage_data, one_stage_specs, BootstrapConfig(B=10, standard=True, threads=1))
    header, frame = manager.read_report(manager.write_bootstrap(report, "bootstrap.csv", seed=3))
    assert {"p_hat", "zeta_hat", "m", "n", "level", "failures"} <= set(header)
    assert int(header["m"]) == int(header["n"]) == one_stage_data.n_rows
    assert list(frame["parameter"]) == ["A", "A*X"]
    assert np.all(frame["lo"] <= frame["hi"])


class TestRule:
    def test_round_trip(self, manager, two_stage_data, two_stage):
        rule = fit_dwols(two_stage_data, two_stage).rule()
        path = manager.write_rule(rule, "rule.json")
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        assert raw["tool"] == "dtr-me"
        assert [s["terms"] for s in raw["stages"]] == [["A1", "A1*X1"], ["A2", "A2*X2"]]
        again = manager.read_rule(path)
        for j in (1, 2):
            np.testing.assert_array_equal(again.stage(j).psi, rule.stage(j).psi)

    def test_missing_file(self, manager, tmp_path):
        with pytest.raises(IngestionError):
            manager.read_rule(str(tmp_path / "absent.json"))

    def test_invalid_json(self, manager, tmp_path):
        path = tmp_path / "rule.json"
        path.write_text('{"tool": "dtr-me"}', encoding="utf-8")
        with pytest.raises(ConfigError):
            manager.read_rule(str(path))


class TestCorrector:
    def test_round_trip_preserves_decisions(self, manager, two_stage_data, two_stage):
        fit = fit_dwols(two_stage_data, two_stage)
        corrector = PseudoCorrector.from_fit(fit, two_stage_data.proxy_groups)
        loaded = manager.read_corrector(manager.write_corrector(corrector, "corrector.txt"))

        assert [g.name for g in loaded.groups] == ["X1", "X2"]
        for name in ("X1", "X2"):
            np.testing.assert_allclose(loaded.models[name].shrinkage, corrector.models[name].shrinkage, rtol=1e-12)
        patients = two_stage_data.analysis_table()
        rule = fit.rule()
        np.testing.assert_array_equal(predict_one(loaded, rule, patients), predict_one(corrector, rule, patients))

    def test_z_components_survive(self, manager):
        data = generate_coverage(scenario_config("coverage-3", n=500, seed=4))
        fit = fit_dwols(data, two_stage_specs(with_z=True))
        corrector = PseudoCorrector.from_fit(fit, data.proxy_groups).with_available({"X2": [1]})
        loaded = manager.read_corrector(manager.write_corrector(corrector, "corrector.txt"))
        assert loaded.models["X2"].q == 1
        assert loaded.proxies_used(loaded.groups[1]) == (1,)
        np.testing.assert_allclose(loaded.models["X2"].sigma_xz, corrector.models["X2"].sigma_xz)

    def test_malformed_line(self, manager, tmp_path):
        path = tmp_path / "corrector.txt"
        path.write_text("groups = 1\nthis line has no separator\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="line 2"):
            manager.read_corrector(str(path))

    def test_missing_entry(self, manager, tmp_path):
        path = tmp_path / "corrector.txt"
        path.write_text("groups = 1\ngroup.0.covariates = X\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="missing"):
            manager.read_corrector(str(path))

    def test_bad_matrix(self, manager, tmp_path):
        path = tmp_path / "corrector.txt"
        path.write_text(
            "groups = 1\ngroup.0.covariates = X\ngroup.0.proxies = X_p1;X_p2\n"
            "group.0.delta_scheme = equal\ngroup.0.delta = 1,2:0.5\n",
            encoding="utf-8",
        )
        with pytest.raises(ConfigError, match="declares 1x2"):
            manager.read_corrector(str(path))
