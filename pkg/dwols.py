"""
Dynamic weighted ordinary least squares over K treatment stages.

Stages are fitted backwards. At stage j the treatment model gives balancing
weights |a - pi_hat|, a weighted regression of the current pseudo-outcome on
[treatment-free terms, a * blip terms] gives psi_j, and the pseudo-outcome for
stage j-1 is formed by adding back the stage-j regret (or by subtracting the
observed blip).

Error-prone covariates are replaced by their calibrated values (or, for the
naive analysis, by the pooled raw proxies) before any model is fitted.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from calibration import (
    CalibrationModel,
    DeltaWeights,
    ProxySet,
    blup_impute,
    combine_proxies,
    fit_calibration,
    fit_calibration_conditional,
    pooling_weights,
)
from errors import ConfigError, MissingCovariateError, PreconditionError
from regress import LogisticFit, WlsFit, logistic_irls, wls
from tabledesign import (
    INTERCEPT_LABEL,
    DataTable,
    DesignMatrix,
    Formula,
    ProxyGroup,
    TrialDataset,
    build_design,
    parse_formula,
)

logger = logging.getLogger(__name__)

FORMULATIONS = ("regret", "blip")

DerivedColumn = Callable[[DataTable], np.ndarray]


@dataclass(frozen=True)
class StageSpec:
    stage: int
    treatment_column: str
    treatment_formula: Formula
    treatment_free_formula: Formula
    blip_formula: Formula

    def __post_init__(self):
        if not self.blip_formula.intercept:
            raise ConfigError(
                f"stage {self.stage} blip model must keep its intercept", module="dwols"
            )

    @classmethod
    def from_strings(
        cls, stage: int, treatment_column: str, treatment: str, treatment_free: str, blip: str
    ) -> "StageSpec":
        return cls(
            stage,
            treatment_column,
            parse_formula(treatment),
            parse_formula(treatment_free),
            parse_formula(blip),
        )

    def blip_labels(self) -> List[str]:
        return [blip_label(self.treatment_column, term) for term in self.blip_formula.labels]


def blip_label(treatment: str, term: str) -> str:
    return treatment if term == INTERCEPT_LABEL else f"{treatment}*{term}"


@dataclass(frozen=True)
class FitOptions:
    formulation: str = "regret"
    calibrate: bool = True
    conditional_calibration: bool = False
    delta_scheme: str = "trace_inverse"
    derived: Mapping[str, DerivedColumn] = field(default_factory=dict)

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ConfigError(f"unknown formulation '{self.formulation}'", module="dwols")


@dataclass(frozen=True)
class StageFit:
    stage: int
    treatment_column: str
    spec: StageSpec
    psi: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    psi_labels: Tuple[str, ...]
    beta_labels: Tuple[str, ...]
    weights: np.ndarray
    propensity: np.ndarray
    treatment: np.ndarray
    pseudo_outcome: np.ndarray
    next_pseudo_outcome: np.ndarray
    blip_values: np.ndarray
    optimal_treatment: np.ndarray
    blip_design: np.ndarray
    treatment_fit: LogisticFit
    outcome_fit: WlsFit


@dataclass(frozen=True)
class StageRule:
    stage: int
    treatment_column: str
    blip_formula: Formula
    psi: np.ndarray

    @property
    def labels(self) -> List[str]:
        return [blip_label(self.treatment_column, t) for t in self.blip_formula.labels]

    def blip(self, table: DataTable) -> np.ndarray:
        return build_design(table, self.blip_formula).values @ self.psi


@dataclass(frozen=True)
class DecisionRule:
    stages: Tuple[StageRule, ...]

    def stage(self, j: int) -> StageRule:
        for s in self.stages:
            if s.stage == j:
                return s
        raise KeyError(j)

    @property
    def columns(self) -> List[str]:
        names: List[str] = []
        for s in self.stages:
            for c in s.blip_formula.column_names:
                if c not in names:
                    names.append(c)
        return names

    def to_dict(self) -> dict:
        return {
            "stages": [
                {
                    "stage": s.stage,
                    "treatment_column": s.treatment_column,
                    "blip_formula": s.blip_formula.render(),
                    "terms": s.labels,
                    "psi": [float(v) for v in s.psi],
                }
                for s in self.stages
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "DecisionRule":
        stages = []
        for s in data["stages"]:
            f = parse_formula(s["blip_formula"])
            psi = np.asarray(s["psi"], dtype=float)
            if psi.shape[0] != f.width:
                raise ConfigError(
                    f"stage {s['stage']} rule has {psi.shape[0]} coefficients for {f.width} terms",
                    module="recommend",
                )
            stages.append(StageRule(int(s["stage"]), s["treatment_column"], f, psi))
        return cls(tuple(stages))


@dataclass(frozen=True)
class DtrFit:
    stages: Tuple[StageFit, ...]
    formulation: str
    calibration: Mapping[str, CalibrationModel]
    pooling: Mapping[str, DeltaWeights]
    analysis_table: DataTable
    options: FitOptions

    @property
    def final(self) -> StageFit:
        return self.stages[-1]

    def stage(self, j: int) -> StageFit:
        for s in self.stages:
            if s.stage == j:
                return s
        raise KeyError(j)

    def rule(self) -> DecisionRule:
        return DecisionRule(
            tuple(StageRule(s.stage, s.treatment_column, s.spec.blip_formula, s.psi) for s in self.stages)
        )

    def estimates(self) -> Tuple[List[str], np.ndarray]:
        """Blip coefficient labels and values for all stages, stage 1 first"""
        labels = [label for s in self.stages for label in s.psi_labels]
        return labels, np.concatenate([s.psi for s in self.stages])

    def coefficient_rows(self) -> List[Tuple[int, str, str, float]]:
        rows = []
        for s in self.stages:
            for label, value in zip(s.beta_labels, s.beta):
                rows.append((s.stage, "treatment_free", label, float(value)))
            for label, value in zip(s.psi_labels, s.psi):
                rows.append((s.stage, "blip", label, float(value)))
            for label, value in zip(s.treatment_fit.term_labels, s.alpha):
                rows.append((s.stage, "treatment", label, float(value)))
        return rows


# Stage primitives

def balance_weights(a, pi_hat) -> np.ndarray:
    """v = |a - pi|, which satisfies pi * v(1) = (1 - pi) * v(0)."""
    return np.abs(np.asarray(a, dtype=float) - np.asarray(pi_hat, dtype=float))


def blip_value(psi, blip_row) -> float:
    return float(np.dot(np.asarray(psi, dtype=float), np.asarray(blip_row, dtype=float)))


def optimal_treatment(gamma_hat):
    """1 iff the blip is strictly positive; exact ties keep the reference treatment."""
    if np.ndim(gamma_hat) == 0:
        return int(gamma_hat > 0)
    return (np.asarray(gamma_hat) > 0).astype(int)


def pseudo_outcome_regret(y_next, gamma_at_opt, gamma_at_obs):
    return np.asarray(y_next, dtype=float) + (np.asarray(gamma_at_opt) - np.asarray(gamma_at_obs))


def pseudo_outcome_blip(y_next, gamma_at_obs):
    return np.asarray(y_next, dtype=float) - np.asarray(gamma_at_obs)


# Covariate substitution

def _group_inputs(table: DataTable, group: ProxyGroup):
    proxies = ProxySet([table.matrix(list(p)) for p in group.proxies])
    z = table.matrix(list(group.z_columns)) if group.z_columns else None
    return proxies, z


def _main_term_coefficients(specs: Sequence[StageSpec], stages: Sequence[StageFit], group: ProxyGroup):
    for spec, fit in zip(reversed(specs), reversed(stages)):
        labels = list(fit.beta_labels)
        if all(c in labels for c in group.covariates):
            return np.array([fit.beta[labels.index(c)] for c in group.covariates])
    logger.warning(
        "No treatment-free main term for %s; blup_optimal weights fall back to a unit hint", group.name
    )
    return np.ones(group.d)


def substitute_covariates(
    data: TrialDataset,
    options: FitOptions,
    beta_hints: Optional[Mapping[str, np.ndarray]] = None,
) -> Tuple[DataTable, Dict[str, CalibrationModel], Dict[str, DeltaWeights]]:
    """
    Analysis table with every proxy group's covariate filled in: the BLUP when
    calibrating, otherwise the delta-pooled raw proxies. Derived columns are added last.
    Also returns the fitted calibration models and the pooling weights per group.
    """
    table = data.analysis_table()
    models: Dict[str, CalibrationModel] = {}
    pooling: Dict[str, DeltaWeights] = {}
    columns: Dict[str, np.ndarray] = {}
    for group in data.proxy_groups:
        proxies, z = _group_inputs(table, group)
        hint = (beta_hints or {}).get(group.name)
        if options.calibrate:
            model = fit_calibration(proxies, z, options.delta_scheme, hint)
            values = blup_impute(model, combine_proxies(proxies, model.delta), z)
            models[group.name] = model
            pooling[group.name] = model.delta
        elif proxies.k >= 2:
            pooling[group.name] = pooling_weights(proxies, options.delta_scheme, hint)
            values = combine_proxies(proxies, pooling[group.name])
        else:
            values = proxies.proxies[0]
            pooling[group.name] = DeltaWeights(np.ones(1), "equal")
        for i, name in enumerate(group.covariates):
            columns[name] = values[:, i]
    if columns:
        table = table.with_columns(columns)
    return _with_derived(table, options.derived), models, pooling


def _with_derived(table: DataTable, derived: Mapping[str, DerivedColumn]) -> DataTable:
    if not derived:
        return table
    return table.with_columns({name: fn(table) for name, fn in derived.items()})


def _conditional_table(
    data: TrialDataset, table: DataTable, options: FitOptions, treated: np.ndarray
) -> DataTable:
    """Covariates of treated rows re-imputed from a calibration fitted on treated rows only"""
    base = data.analysis_table()
    keep = treated.astype(bool)
    columns = {}
    for group in data.proxy_groups:
        proxies, z = _group_inputs(base, group)
        model = fit_calibration_conditional(proxies, z, options.delta_scheme, treated)
        values = blup_impute(model, combine_proxies(proxies, model.delta), z)
        for i, name in enumerate(group.covariates):
            columns[name] = np.where(keep, values[:, i], table.column(name))
    if not columns:
        return table
    return _with_derived(table.with_columns(columns), options.derived)


def _check_stage_columns(data: TrialDataset, spec: StageSpec) -> None:
    if not data.column_stage:
        return
    formulas = (spec.treatment_formula, spec.treatment_free_formula, spec.blip_formula)
    for f in formulas:
        for name in f.column_names:
            col_stage = data.column_stage.get(name)
            if col_stage is not None and col_stage > spec.stage:
                logger.warning(
                    "Stage %d model references '%s', which is only observed at stage %d",
                    spec.stage, name, col_stage,
                )


# Fitting

def _fit_stage(spec: StageSpec, table: DataTable, y_tilde: np.ndarray) -> StageFit:
    a = table.require_binary(spec.treatment_column)
    if a.min() == a.max():
        raise PreconditionError(
            f"stage {spec.stage}: every patient has {spec.treatment_column}={int(a[0])}", module="dwols"
        )
    treatment_fit = logistic_irls(build_design(table, spec.treatment_formula), a)
    weights = balance_weights(a, treatment_fit.fitted_probabilities)

    tf = build_design(table, spec.treatment_free_formula)
    bl = build_design(table, spec.blip_formula)
    psi_labels = tuple(spec.blip_labels())
    full = DesignMatrix(
        np.hstack([tf.values, a[:, None] * bl.values]), tuple(tf.term_labels) + psi_labels
    )
    outcome_fit = wls(full, y_tilde, weights)
    beta = outcome_fit.coefficients[: tf.width]
    psi = outcome_fit.coefficients[tf.width:]
    gamma = bl.values @ psi
    a_opt = optimal_treatment(gamma)

    stage = StageFit(
        stage=spec.stage,
        treatment_column=spec.treatment_column,
        spec=spec,
        psi=psi,
        beta=beta,
        alpha=treatment_fit.coefficients,
        psi_labels=psi_labels,
        beta_labels=tuple(tf.term_labels),
        weights=weights,
        propensity=treatment_fit.fitted_probabilities,
        treatment=a,
        pseudo_outcome=y_tilde,
        next_pseudo_outcome=y_tilde,
        blip_values=gamma,
        optimal_treatment=a_opt,
        blip_design=bl.values,
        treatment_fit=treatment_fit,
        outcome_fit=outcome_fit,
    )
    return stage


def _next_pseudo_outcome(formulation: str, y_tilde, gamma, a, a_opt):
    if formulation == "regret":
        return pseudo_outcome_regret(y_tilde, a_opt * gamma, a * gamma)
    return pseudo_outcome_blip(y_tilde, a * gamma)


def fit_dwols(
    data: TrialDataset, specs: Sequence[StageSpec], options: Optional[FitOptions] = None
) -> DtrFit:
    options = options or FitOptions()
    if not specs:
        raise ConfigError("at least one stage is required", module="dwols")
    ordered = sorted(specs, key=lambda s: s.stage)
    if [s.stage for s in ordered] != list(range(1, len(ordered) + 1)):
        raise ConfigError("stages must be numbered 1..K without gaps", module="dwols")

    beta_hints = None
    if options.delta_scheme == "blup_optimal" and data.proxy_groups:
        preliminary = fit_dwols(
            data,
            ordered,
            FitOptions(options.formulation, options.calibrate, False, "trace_inverse", options.derived),
        )
        beta_hints = {
            g.name: _main_term_coefficients(ordered, preliminary.stages, g) for g in data.proxy_groups
        }

    table, models, pooling = substitute_covariates(data, options, beta_hints)
    y_tilde = table.column(data.outcome)
    fitted: List[StageFit] = []

    for spec in reversed(ordered):
        _check_stage_columns(data, spec)
        stage = _fit_stage(spec, table, y_tilde)

        gamma, a_opt = stage.blip_values, stage.optimal_treatment
        if options.conditional_calibration and options.calibrate and data.proxy_groups:
            cond = _conditional_table(data, table, options, stage.treatment)
            gamma = build_design(cond, spec.blip_formula).values @ stage.psi
            a_opt = optimal_treatment(gamma)

        y_next = _next_pseudo_outcome(options.formulation, y_tilde, gamma, stage.treatment, a_opt)
        stage = replace(stage, next_pseudo_outcome=y_next)
        fitted.append(stage)
        logger.debug(
            "Stage %d: psi=%s", spec.stage, dict(zip(stage.psi_labels, np.round(stage.psi, 4)))
        )
        y_tilde = y_next

    return DtrFit(tuple(reversed(fitted)), options.formulation, models, pooling, table, options)


# Rules and diagnostics

def recommend(rule: DecisionRule, history: Mapping[str, float]) -> List[int]:
    """Stagewise decisions for one patient history (column name -> value)."""
    missing = [c for c in rule.columns if c not in history]
    if missing:
        raise MissingCovariateError(f"history lacks blip covariate(s): {', '.join(missing)}")
    row = DataTable({c: [float(history[c])] for c in rule.columns}) if rule.columns else None
    decisions = []
    for s in rule.stages:
        if row is None:
            gamma = float(s.psi[0])
        else:
            gamma = float(s.blip(row)[0])
        decisions.append(optimal_treatment(gamma))
    return decisions


@dataclass(frozen=True)
class BalanceReport:
    treated_mean: float
    untreated_mean: float

    @property
    def difference(self) -> float:
        return self.treated_mean - self.untreated_mean


def covariate_balance(fit: DtrFit, stage: int, column: str) -> BalanceReport:
    """Balancing-weighted means of a covariate in each treatment arm at one stage"""
    s = fit.stage(stage)
    x = fit.analysis_table.column(column)
    a, v = s.treatment, s.weights
    treated = np.sum(v * a * x) / np.sum(v * a)
    untreated = np.sum(v * (1 - a) * x) / np.sum(v * (1 - a))
    return BalanceReport(float(treated), float(untreated))


@dataclass(frozen=True)
class RegretDecomposition:
    estimated_regret: np.ndarray
    true_regret: np.ndarray
    decision_term: np.ndarray
    imputation_term: np.ndarray

    @property
    def error(self) -> np.ndarray:
        return self.estimated_regret - self.true_regret


def regret_error_decomposition(psi, blip_design_hat, blip_design_true, a) -> RegretDecomposition:
    """
    Split the pseudo-outcome error of a regret stage into a wrong-decision part
    and an imputation part:

        (A_hat - A) g_hat - (A_opt - A) g = (A_hat - A_opt) g_hat + (A_opt - A)(g_hat - g)
    """
    psi = np.asarray(psi, dtype=float)
    a = np.asarray(a, dtype=float)
    g_hat = np.asarray(blip_design_hat, dtype=float) @ psi
    g = np.asarray(blip_design_true, dtype=float) @ psi
    a_hat = optimal_treatment(g_hat)
    a_opt = optimal_treatment(g)
    return RegretDecomposition(
        estimated_regret=(a_hat - a) * g_hat,
        true_regret=(a_opt - a) * g,
        decision_term=(a_hat - a_opt) * g_hat,
        imputation_term=(a_opt - a) * (g_hat - g),
    )
