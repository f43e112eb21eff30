import numpy as np
import pytest

from calibration import CalibrationModel, DeltaWeights
from dwols import DecisionRule, fit_dwols
from errors import MissingCovariateError, PreconditionError
from recommend import PseudoCorrector, decide, optimal_rate, predict_naive, predict_one, predict_pooled, predict_true
from tabledesign import DataTable, ProxyGroup

GROUP = ProxyGroup.scalar("X", ["X_p1", "X_p2"])


def _rule(psi, formula="1 + X", treatment="A"):
    return DecisionRule.from_dict(
        {"stages": [{"stage": 1, "treatment_column": treatment, "blip_formula": formula, "psi": psi}]}
    )


def _corrector(m=0.25):
    model = CalibrationModel.from_components(
        [0.0], [[1.0]], [[[m]], [[m]]], DeltaWeights(np.array([0.5, 0.5]), "equal")
    )
    return PseudoCorrector((GROUP,), {"X": model}, {"X": (0, 1)})


class TestPredictOne:
    def test_hand_blup_decision(self):
        patients = DataTable({"X_p1": [1.2], "X_p2": [1.2]})
        # X_hat = 1.2 / 1.125 = 1.0667, so 1 - X_hat < 0
        np.testing.assert_array_equal(predict_one(_corrector(), _rule([1.0, -1.0]), patients), [[0]])

    def test_zero_error_matches_raw_proxy(self):
        patients = DataTable({"X_p1": [0.5, 1.5, -0.2], "X_p2": [0.5, 1.5, -0.2]})
        raw = predict_true(_rule([1.0, -1.0]), DataTable({"X": [0.5, 1.5, -0.2]}))
        np.testing.assert_array_equal(predict_one(_corrector(m=0.0), _rule([1.0, -1.0]), patients), raw)

    def test_rows_are_independent(self):
        rule = _rule([1.0, -1.0])
        a = DataTable({"X_p1": [0.9, -3.0], "X_p2": [1.3, 4.0]})
        b = DataTable({"X_p1": [0.9], "X_p2": [1.3]})
        assert predict_one(_corrector(), rule, a)[0, 0] == predict_one(_corrector(), rule, b)[0, 0]

    def test_single_available_proxy(self):
        corrector = _corrector().with_available({"X": [1]})
        # only X_p2 is needed; shrinkage 1 / 1.25 puts 1.2 at 0.96
        patients = DataTable({"X_p2": [1.2]})
        np.testing.assert_array_equal(predict_one(corrector, _rule([1.0, -1.0]), patients), [[1]])

    def test_missing_declared_proxy(self):
        with pytest.raises(MissingCovariateError):
            predict_one(_corrector(), _rule([1.0, -1.0]), DataTable({"X_p1": [1.0]}))

    def test_bad_proxy_index(self):
        with pytest.raises(PreconditionError):
            _corrector().with_available({"X": [2]})


class TestPredictPooled:
    def test_reproduces_fit_decisions(self, one_stage_data, one_stage_specs):
        fit = fit_dwols(one_stage_data, one_stage_specs)
        decisions = predict_pooled(fit.rule(), one_stage_data.analysis_table(), [GROUP])
        np.testing.assert_array_equal(decisions[:, 0], fit.final.optimal_treatment)

    def test_single_proxy_cohort(self):
        cohort = DataTable({"X_p1": [0.1, 0.2, 0.3, 0.4]})
        with pytest.raises(PreconditionError):
            predict_pooled(_rule([1.0, 1.0]), cohort, [ProxyGroup.scalar("X", ["X_p1"])])

    def test_tiny_cohort(self):
        cohort = DataTable({"X_p1": [0.1, 0.2], "X_p2": [0.2, 0.1]})
        with pytest.raises(PreconditionError):
            predict_pooled(_rule([1.0, 1.0]), cohort, [GROUP])


class TestPredictTrue:
    def test_rule_evaluation(self):
        decisions = predict_true(_rule([1.0, 1.0]), DataTable({"X": [0.0, -1.0, 2.0]}))
        np.testing.assert_array_equal(decisions[:, 0], [1, 0, 1])

    def test_missing_covariate(self):
        with pytest.raises(MissingCovariateError):
            predict_true(_rule([1.0, 1.0]), DataTable({"W": [0.0]}))


def test_predict_naive_uses_pooled_proxies():
    patients = DataTable({"X_p1": [1.2, 0.0], "X_p2": [0.6, 0.0]})
    pooling = {"X": DeltaWeights(np.array([2 / 3, 1 / 3]), "trace_inverse")}
    # pooled values 1.0 and 0.0; rule 1(0.5 - x > 0)
    decisions = predict_naive(_rule([0.5, -1.0]), patients, [GROUP], pooling)
    np.testing.assert_array_equal(decisions[:, 0], [0, 1])


def test_decide_feeds_earlier_decisions_forward():
    rule = DecisionRule.from_dict({"stages": [
        {"stage": 1, "treatment_column": "A1", "blip_formula": "1", "psi": [1.0]},
        {"stage": 2, "treatment_column": "A2", "blip_formula": "1 + A1", "psi": [-1.0, 2.0]},
    ]})
    table = DataTable({"A1": [0.0, 0.0]})
    np.testing.assert_array_equal(decide(rule, table), [[1, 1], [1, 1]])


class TestOptimalRate:
    def test_identical(self):
        assert optimal_rate([1, 0, 1], [1, 0, 1]) == 1.0

    def test_complementary(self):
        assert optimal_rate([1, 0], [0, 1]) == 0.0

    def test_half(self):
        assert optimal_rate([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5

    def test_per_stage_columns(self):
        np.testing.assert_allclose(optimal_rate([[1, 0], [1, 1]], [[1, 1], [1, 1]]), [1.0, 0.5])

    def test_shape_mismatch(self):
        with pytest.raises(PreconditionError):
            optimal_rate([1, 0], [1])
