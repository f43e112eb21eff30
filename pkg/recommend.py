"""
Treatment decisions for new patients under three information regimes:

* one at a time, imputing X from frozen fitting-stage calibration parameters
  (pseudo-correction),
* a whole cohort at once, calibrating afresh on the cohort (pooled),
* true covariates available, applying the rule directly.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from calibration import (
    CalibrationModel,
    DeltaWeights,
    ProxySet,
    blup_impute,
    combine_proxies,
    fit_calibration,
)
from dwols import DecisionRule, DtrFit, optimal_treatment
from errors import MissingCovariateError, PreconditionError
from tabledesign import DataTable, ProxyGroup

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoCorrector:
    """Frozen calibration parameters plus the proxies available at decision time."""

    groups: Tuple[ProxyGroup, ...]
    models: Mapping[str, CalibrationModel]
    available: Mapping[str, Tuple[int, ...]]

    def __post_init__(self):
        for g in self.groups:
            if g.name not in self.models:
                raise PreconditionError(f"no frozen calibration for {g.name}", module="recommend")
            for j in self.available.get(g.name, ()):
                if not 0 <= j < g.k:
                    raise PreconditionError(
                        f"proxy index {j} out of range for {g.name} (k={g.k})", module="recommend"
                    )

    @classmethod
    def from_fit(
        cls,
        fit: DtrFit,
        groups: Sequence[ProxyGroup],
        available: Optional[Mapping[str, Sequence[int]]] = None,
    ) -> "PseudoCorrector":
        if not fit.calibration:
            raise PreconditionError("fit carries no calibration models; refit with calibration", module="recommend")
        avail = {g.name: tuple((available or {}).get(g.name, range(g.k))) for g in groups}
        return cls(tuple(groups), dict(fit.calibration), avail)

    def with_available(self, available: Mapping[str, Sequence[int]]) -> "PseudoCorrector":
        merged = dict(self.available)
        merged.update({k: tuple(v) for k, v in available.items()})
        return PseudoCorrector(self.groups, self.models, merged)

    def proxies_used(self, group: ProxyGroup) -> Tuple[int, ...]:
        return self.available.get(group.name, tuple(range(group.k)))

    def impute(self, table: DataTable, groups: Optional[Sequence[ProxyGroup]] = None) -> DataTable:
        """
        Add imputed covariates to `table`. Each row depends only on its own
        proxies and the frozen parameters.
        """
        columns: Dict[str, np.ndarray] = {}
        for g in groups if groups is not None else self.groups:
            used = self.proxies_used(g)
            model = self.models[g.name].restrict(used)
            proxies = ProxySet([_require(table, g.proxies[j]) for j in used])
            z = _require(table, g.z_columns) if g.z_columns else None
            values = blup_impute(model, combine_proxies(proxies, model.delta), z)
            for i, name in enumerate(g.covariates):
                columns[name] = values[:, i]
        return table.with_columns(columns) if columns else table


def _require(table: DataTable, names: Sequence[str]) -> np.ndarray:
    missing = [c for c in names if c not in table]
    if missing:
        raise MissingCovariateError(f"missing declared column(s): {', '.join(missing)}")
    return table.matrix(list(names))


def _groups_for(rule: DecisionRule, stages: Sequence[int], groups: Sequence[ProxyGroup]) -> List[ProxyGroup]:
    needed = {c for j in stages for c in rule.stage(j).blip_formula.column_names}
    return [g for g in groups if needed & set(g.covariates)]


def _stages(rule: DecisionRule, stages: Optional[Sequence[int]]) -> List[int]:
    return list(stages) if stages is not None else [s.stage for s in rule.stages]


def decide(rule: DecisionRule, table: DataTable, stages: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    n x len(stages) decisions. A later stage that refers to an earlier stage's
    treatment column sees the decision made here, not the observed treatment.
    """
    chosen = _stages(rule, stages)
    missing = [c for j in chosen for c in rule.stage(j).blip_formula.column_names
               if c not in table and c not in {rule.stage(i).treatment_column for i in chosen}]
    if missing:
        raise MissingCovariateError(f"missing covariate(s): {', '.join(sorted(set(missing)))}")
    out = np.zeros((table.n_rows, len(chosen)), dtype=int)
    current = table
    for pos, j in enumerate(chosen):
        s = rule.stage(j)
        out[:, pos] = optimal_treatment(s.blip(current))
        current = current.with_columns({s.treatment_column: out[:, pos]})
    return out


def predict_one(
    corrector: PseudoCorrector,
    rule: DecisionRule,
    patients: DataTable,
    stages: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Pseudo-corrected decisions; patients are processed independently."""
    chosen = _stages(rule, stages)
    imputed = corrector.impute(patients, _groups_for(rule, chosen, corrector.groups))
    return decide(rule, imputed, chosen)


def predict_pooled(
    rule: DecisionRule,
    cohort: DataTable,
    groups: Sequence[ProxyGroup],
    delta_scheme: str = "trace_inverse",
    stages: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Calibrate on the decision cohort itself, then apply the rule."""
    chosen = _stages(rule, stages)
    if cohort.n_rows < 3:
        raise PreconditionError("pooled prediction needs a cohort of at least 3 patients", module="recommend")
    columns: Dict[str, np.ndarray] = {}
    for g in _groups_for(rule, chosen, groups):
        if g.k < 2:
            raise PreconditionError(
                f"pooled prediction needs at least 2 proxies for {g.name}", module="recommend"
            )
        proxies = ProxySet([_require(cohort, p) for p in g.proxies])
        z = _require(cohort, g.z_columns) if g.z_columns else None
        model = fit_calibration(proxies, z, delta_scheme)
        values = blup_impute(model, combine_proxies(proxies, model.delta), z)
        for i, name in enumerate(g.covariates):
            columns[name] = values[:, i]
    table = cohort.with_columns(columns) if columns else cohort
    return decide(rule, table, chosen)


def predict_naive(
    rule: DecisionRule,
    patients: DataTable,
    groups: Sequence[ProxyGroup],
    pooling: Mapping[str, DeltaWeights],
    available: Optional[Mapping[str, Sequence[int]]] = None,
    stages: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Rule applied to the delta-pooled raw proxies (no correction)."""
    chosen = _stages(rule, stages)
    columns: Dict[str, np.ndarray] = {}
    for g in _groups_for(rule, chosen, groups):
        used = list((available or {}).get(g.name, range(g.k)))
        weights = pooling[g.name].delta[used] if g.name in pooling else np.ones(len(used))
        weights = weights / weights.sum()
        proxies = ProxySet([_require(patients, g.proxies[j]) for j in used])
        values = combine_proxies(proxies, DeltaWeights(weights, "equal"))
        for i, name in enumerate(g.covariates):
            columns[name] = values[:, i]
    table = patients.with_columns(columns) if columns else patients
    return decide(rule, table, chosen)


def predict_true(rule: DecisionRule, cohort: DataTable, stages: Optional[Sequence[int]] = None) -> np.ndarray:
    return decide(rule, cohort, stages)


def optimal_rate(decisions, optimal):
    """Share of decisions matching the optimal treatment, per stage column."""
    d = np.asarray(decisions)
    o = np.asarray(optimal)
    if d.shape != o.shape:
        raise PreconditionError(f"decision shape {d.shape} does not match {o.shape}", module="recommend")
    if d.ndim == 1:
        return float(np.mean(d == o))
    return np.mean(d == o, axis=0)
