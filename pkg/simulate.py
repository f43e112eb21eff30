"""
Generative models and replicate runners for the simulation studies:

* one-stage robustness (four analyses, each with and without calibration),
* two-stage scenarios 1-5 varying treatment probabilities, blip parameters,
  treatment-free forms, treatment-model forms and error models,
* bootstrap coverage scenarios 1-3,
* future-treatment prediction.

Oracle columns carry a `_true`/`_opt` suffix and are dropped from every
analysis table. Outcomes subtract the regret of every stage, so the blip
coefficients are positive and A_opt maximizes E[Y].
"""
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

import streams
from config import DEFAULT_THREADS
from dwols import FitOptions, StageSpec, fit_dwols
from errors import ConfigError, DataError, NumericalError
from mnboot import mn_bootstrap
from recommend import PseudoCorrector, optimal_rate, predict_naive, predict_one, predict_pooled, predict_true
from regress import expit
from schemas import BootstrapConfig, ErrorModelSpec, ScenarioConfig
from tabledesign import DataTable, ProxyGroup, TrialDataset

logger = logging.getLogger(__name__)

FAILURE_FLAG_SHARE = 0.02

PROXY_MODE_SETS = [
    ("first_proxy", "first_proxy"),
    ("mean_proxies", "mean_proxies"),
    ("mean_proxies", "first_proxy"),
    ("first_proxy", "mean_proxies"),
]

_MODE_LABEL = {"first_proxy": "first", "mean_proxies": "mean"}


# Error models and links

def apply_error(x: np.ndarray, spec: ErrorModelSpec, rng: np.random.Generator) -> np.ndarray:
    """One proxy draw of x under an additive or multiplicative error model"""
    n = x.shape[0]
    if spec.kind == "none":
        return x.copy()
    if spec.kind == "normal":
        return x + rng.normal(0.0, np.sqrt(spec.variance), n)
    if spec.kind == "t":
        return x + rng.standard_t(spec.df, n)
    if spec.kind == "uniform_add":
        return x + rng.uniform(spec.lo, spec.hi, n)
    if spec.kind == "gamma_mult":
        # shape-rate parameterisation; mean shape / rate
        return x * rng.gamma(spec.shape, 1.0 / spec.rate, n)
    if spec.kind == "uniform_mult":
        return x * rng.uniform(spec.lo, spec.hi, n)
    raise ConfigError(f"unknown error model '{spec.kind}'", module="simulate")


def treatment_score(form: str, w: np.ndarray, alpha0: float, alpha1: float) -> np.ndarray:
    linear = alpha0 + alpha1 * w
    if form == "linear":
        return linear
    if form == "quadratic":
        return linear + w ** 2
    if form == "exponential":
        return linear + np.exp(w)
    if form == "mixed":
        return linear + w ** 2 + np.exp(w)
    raise ConfigError(f"unknown treatment form '{form}'", module="simulate")


def treatment_free(form: str, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    if form == "linear":
        return x1
    if form == "quadratic":
        return x1 + x1 ** 2
    if form == "cubic":
        return x1 + x2 ** 2 - x1 ** 3
    if form == "exponential":
        return np.exp(x1) - x1 ** 3
    if form == "complex":
        return np.exp(x1) * (x1 >= -0.5)
    raise ConfigError(f"unknown treatment-free form '{form}'", module="simulate")


def _bernoulli(rng: np.random.Generator, p: np.ndarray) -> np.ndarray:
    return (rng.uniform(size=p.shape[0]) < p).astype(float)


def _treatment_input(mode: str, proxies: Sequence[np.ndarray]) -> np.ndarray:
    return proxies[0] if mode == "first_proxy" else np.mean(proxies, axis=0)


# Generators

def generate_one_stage(
    n: int,
    seed: int,
    *,
    outcome_noise: bool = True,
    measurement_error: bool = True,
    force_treatment: Optional[int] = None,
) -> TrialDataset:
    """
    X ~ N(0,1); proxies X + N(0, 0.25) and X + t8; P(A=1 | X*_1 = w) =
    H(1 - 0.5w + 1.5exp(w - 1)); Y = X + exp(X) + A(1 + X) + e.
    """
    rng = streams.stream(seed, streams.SIMULATION)
    x = rng.normal(0.0, 1.0, n)
    e1 = rng.normal(0.0, 0.5, n)
    e2 = rng.standard_t(8, n)
    if not measurement_error:
        e1 = e2 = np.zeros(n)
    x_p1, x_p2 = x + e1, x + e2
    p = expit(1.0 - 0.5 * x_p1 + 1.5 * np.exp(x_p1 - 1.0))
    a = _bernoulli(rng, p)
    if force_treatment is not None:
        a = np.full(n, float(force_treatment))
    eps = rng.normal(0.0, 1.0, n) if outcome_noise else np.zeros(n)
    y = x + np.exp(x) + a * (1.0 + x) + eps

    table = DataTable({"X_true": x, "X_p1": x_p1, "X_p2": x_p2, "A": a, "Y": y})
    return TrialDataset(
        table,
        (ProxyGroup.scalar("X", ["X_p1", "X_p2"]),),
        ("A",),
        "Y",
        oracle=("X_true",),
    )


def _two_stage_dataset(columns: Dict[str, np.ndarray], z_columns: Sequence[str] = ()) -> TrialDataset:
    groups = (
        ProxyGroup.scalar("X1", ["X11", "X12"]),
        ProxyGroup.scalar("X2", ["X21", "X22"], z_columns),
    )
    stage = {"X11": 1, "X12": 1, "A1": 1, "X21": 2, "X22": 2, "A2": 2}
    stage.update({z: 2 for z in z_columns})
    return TrialDataset(
        DataTable(columns),
        groups,
        ("A1", "A2"),
        "Y",
        error_free=tuple(z_columns),
        oracle=("X1_true", "X2_true", "A1_opt", "A2_opt"),
        column_stage=stage,
    )


def generate_multistage(cfg: ScenarioConfig, seed: Optional[int] = None) -> TrialDataset:
    """
    X1 ~ N(0,1), X2 ~ N(A1, 1), each seen through two proxies;
    Y = f(X1, X2) - (A1_opt - A1)(psi10 + psi11 X1) - (A2_opt - A2)(psi20 + psi21 X2) + e.
    """
    rng = streams.stream(cfg.seed if seed is None else seed, streams.SIMULATION)
    n = cfg.n
    psi10, psi11, psi20, psi21 = cfg.psi

    x1 = rng.normal(0.0, 1.0, n)
    p1 = [apply_error(x1, spec, rng) for spec in cfg.errors[0]]
    w1 = _treatment_input(cfg.proxy_modes[0], p1)
    a1 = _bernoulli(rng, expit(treatment_score(cfg.treatment_forms[0], w1, *cfg.alpha[0])))

    x2 = rng.normal(a1, 1.0)
    p2 = [apply_error(x2, spec, rng) for spec in cfg.errors[1]]
    w2 = _treatment_input(cfg.proxy_modes[1], p2)
    a2 = _bernoulli(rng, expit(treatment_score(cfg.treatment_forms[1], w2, *cfg.alpha[1])))

    g1 = psi10 + psi11 * x1
    g2 = psi20 + psi21 * x2
    a1_opt = (g1 > 0).astype(float)
    a2_opt = (g2 > 0).astype(float)
    eps = rng.normal(0.0, np.sqrt(cfg.noise_variance), n) if cfg.noise_variance > 0 else np.zeros(n)
    y = treatment_free(cfg.treatment_free_form, x1, x2) - (a1_opt - a1) * g1 - (a2_opt - a2) * g2 + eps

    return _two_stage_dataset({
        "X11": p1[0], "X12": p1[1], "A1": a1,
        "X21": p2[0], "X22": p2[1], "A2": a2, "Y": y,
        "X1_true": x1, "X2_true": x2, "A1_opt": a1_opt, "A2_opt": a2_opt,
    })


def generate_coverage(cfg: ScenarioConfig, seed: Optional[int] = None) -> TrialDataset:
    """
    X1, X2 ~ N(0,1) independent, P(A_j = 1 | X*_j1 = w) = H(w),
    Y = X1 + X2 + A1(1 + X1) + A2(1 + X2 [- Z2 - Z2 X2]) + e.
    """
    rng = streams.stream(cfg.seed if seed is None else seed, streams.SIMULATION)
    n = cfg.n
    with_z = cfg.number == 3

    x1 = rng.normal(0.0, 1.0, n)
    p1 = [apply_error(x1, spec, rng) for spec in cfg.errors[0]]
    a1 = _bernoulli(rng, expit(p1[0]))
    x2 = rng.normal(0.0, 1.0, n)
    p2 = [apply_error(x2, spec, rng) for spec in cfg.errors[1]]
    a2 = _bernoulli(rng, expit(p2[0]))
    z2 = (rng.uniform(size=n) < 0.5).astype(float) if with_z else np.zeros(n)

    g1 = 1.0 + x1
    g2 = (1.0 - z2) * (1.0 + x2)
    eps = rng.normal(0.0, np.sqrt(cfg.noise_variance), n)
    y = x1 + x2 + a1 * g1 + a2 * g2 + eps

    columns = {
        "X11": p1[0], "X12": p1[1], "A1": a1,
        "X21": p2[0], "X22": p2[1], "A2": a2, "Y": y,
        "X1_true": x1, "X2_true": x2,
        "A1_opt": (g1 > 0).astype(float), "A2_opt": (g2 > 0).astype(float),
    }
    if with_z:
        columns["Z2"] = z2
    return _two_stage_dataset(columns, ("Z2",) if with_z else ())


def generate_prediction(cfg: ScenarioConfig, seed: Optional[int] = None) -> TrialDataset:
    """
    Proxies X1 + t10, X1 + N(0,1), X2 + N(0,0.25) twice; P(A_j = 1 | X*_j1 = w) = H(1 - w);
    Y = X1 - (A1_opt - A1)(1 - X1) - (A2_opt - A2)(3 - 2 X2) + e, var(e) = 2.
    """
    rng = streams.stream(cfg.seed if seed is None else seed, streams.SIMULATION)
    n = cfg.n
    x1 = rng.normal(0.0, 1.0, n)
    p1 = [apply_error(x1, spec, rng) for spec in cfg.errors[0]]
    a1 = _bernoulli(rng, expit(1.0 - p1[0]))
    x2 = rng.normal(a1, 1.0)
    p2 = [apply_error(x2, spec, rng) for spec in cfg.errors[1]]
    a2 = _bernoulli(rng, expit(1.0 - p2[0]))

    g1 = 1.0 - x1
    g2 = 3.0 - 2.0 * x2
    a1_opt = (g1 > 0).astype(float)
    a2_opt = (g2 > 0).astype(float)
    eps = rng.normal(0.0, np.sqrt(cfg.noise_variance), n)
    y = x1 - (a1_opt - a1) * g1 - (a2_opt - a2) * g2 + eps

    return _two_stage_dataset({
        "X11": p1[0], "X12": p1[1], "A1": a1,
        "X21": p2[0], "X22": p2[1], "A2": a2, "Y": y,
        "X1_true": x1, "X2_true": x2, "A1_opt": a1_opt, "A2_opt": a2_opt,
    })


def generate_stard_like(n: int, seed: int) -> TrialDataset:
    """
    Synthetic two-stage cohort shaped like a depression-treatment trial: symptom
    score Q and its slope S, each measured by two instruments, and a binary
    treatment preference P per stage. For tests and demos only.
    """
    rng = streams.stream(seed, streams.SIMULATION)
    q1 = rng.normal(0.0, 1.0, n)
    s1 = rng.normal(0.0, 1.0, n)
    pref1 = (rng.uniform(size=n) < 0.5).astype(float)
    a1 = _bernoulli(rng, expit(-0.5 + pref1))
    q2 = rng.normal(0.5 * q1 - 0.5 * a1, 1.0)
    s2 = rng.normal(0.0, 1.0, n)
    pref2 = (rng.uniform(size=n) < 0.5).astype(float)
    a2 = _bernoulli(rng, expit(0.5 - pref2))

    g1 = 1.0 - 0.5 * pref1 + 0.5 * q1 - 0.3 * s1
    g2 = 0.5 + 0.4 * q2 - 0.3 * s2
    y = -q1 - (1.0 * (g1 > 0) - a1) * g1 - (1.0 * (g2 > 0) - a2) * g2 + rng.normal(0.0, 1.0, n)

    columns = {"P1": pref1, "A1": a1, "P2": pref2, "A2": a2, "Y": y}
    for name, truth in (("Q1", q1), ("S1", s1), ("Q2", q2), ("S2", s2)):
        columns[f"{name}_c"] = truth + rng.normal(0.0, 0.5, n)
        columns[f"{name}_s"] = truth + rng.normal(0.0, 0.6, n)
        columns[f"{name}_true"] = truth
    groups = tuple(ProxyGroup.scalar(name, [f"{name}_c", f"{name}_s"]) for name in ("Q1", "S1", "Q2", "S2"))
    stage = {"P1": 1, "A1": 1, "Q1_c": 1, "Q1_s": 1, "S1_c": 1, "S1_s": 1,
             "P2": 2, "A2": 2, "Q2_c": 2, "Q2_s": 2, "S2_c": 2, "S2_s": 2}
    return TrialDataset(
        DataTable(columns),
        groups,
        ("A1", "A2"),
        "Y",
        error_free=("P1", "P2"),
        oracle=("Q1_true", "S1_true", "Q2_true", "S2_true"),
        column_stage=stage,
    )


STARD_LIKE_MODEL = [
    ("1 + P1", "1 + Q1 + S1 + P1", "1 + P1 + Q1 + S1"),
    ("1 + P2", "1 + Q1 + S1 + P1 + A1 + Q2 + S2 + P2", "1 + Q2 + S2"),
]


# Scenario catalogue

def _row_label(values: Sequence[float]) -> str:
    return "(" + ", ".join(f"{v:g}" for v in values) + ")"


_ERROR_BY_LABEL = {
    "Normal": ErrorModelSpec.normal(0.25),
    "Approx. Normal": ErrorModelSpec.t(10),
    "Gamma": ErrorModelSpec.gamma_mult(1.0, 1.0),
    "Uniform": ErrorModelSpec.uniform_mult(0.5, 1.5),
}


def scenario_rows(number: int) -> List[Tuple[str, Dict]]:
    """(label, ScenarioConfig overrides) for each row of a two-stage scenario table"""
    if number == 1:
        pairs = [(-2, -2), (-1, -1), (0, 0), (1, 1), (2, 2), (-2, 0), (-1, 1), (0, 2), (1, -2), (2, -1)]
        return [(_row_label(p), {"alpha": [[p[0], 1.0], [p[1], 1.0]]}) for p in pairs]
    if number == 2:
        psis = [(1, -1, 1, -1), (1, -0.1, 1, -0.1), (1, 0, 1, 0), (1, 0.1, 1, 0.1), (1, 1, 1, 1),
                (1, -1, 1, 0), (1, -0.1, 1, 0.1), (1, 0, 1, 1), (1, 0.1, 1, -1), (1, 1, 1, -0.1)]
        return [(_row_label(p), {"psi": list(map(float, p))}) for p in psis]
    if number == 3:
        forms = ["linear", "quadratic", "cubic", "exponential", "complex"]
        return [(f.capitalize(), {"treatment_free_form": f}) for f in forms]
    if number == 4:
        pairs = [("linear", "linear"), ("linear", "quadratic"), ("linear", "mixed"), ("linear", "exponential"),
                 ("quadratic", "quadratic"), ("quadratic", "mixed"), ("quadratic", "exponential"),
                 ("mixed", "mixed"), ("mixed", "exponential"), ("exponential", "exponential")]
        return [(f"{a.capitalize()}/{b.capitalize()}", {"treatment_forms": [a, b]}) for a, b in pairs]
    if number == 5:
        labels = list(_ERROR_BY_LABEL)
        rows = []
        for i, first in enumerate(labels):
            for second in labels[i:]:
                pair = [_ERROR_BY_LABEL[first], _ERROR_BY_LABEL[second]]
                rows.append((f"{first}/{second}", {"errors": [pair, list(pair)]}))
        return rows
    raise ConfigError(f"multistage scenarios are numbered 1..5, got {number}", module="simulate")


def _coverage_errors(number: int) -> List[List[ErrorModelSpec]]:
    n1, u, g = ErrorModelSpec.normal(1.0), ErrorModelSpec.uniform_add(-1.0, 1.0), ErrorModelSpec.gamma_mult(1.0, 1.0)
    if number == 1:
        return [[n1, n1], [n1, n1]]
    if number == 2:
        return [[n1, u], [n1, g]]
    return [[u, g], [ErrorModelSpec.normal(0.25), u]]


def scenario_config(name: str, **overrides) -> ScenarioConfig:
    """
    Resolve names such as `one-stage`, `multistage-3`, `coverage-2` or
    `prediction` into a ScenarioConfig; `row` selects one row of a
    multistage table.
    """
    match = re.fullmatch(r"([a-z_\-]+?)(?:[-_](\d+))?", name.strip().lower())
    if not match:
        raise ConfigError(f"unknown scenario '{name}'", module="simulate")
    family = match.group(1).replace("-", "_")
    number = int(match.group(2)) if match.group(2) else None
    base: Dict = {"family": family, "number": number}

    if family == "one_stage":
        base.update(errors=[[ErrorModelSpec.normal(0.25), ErrorModelSpec.t(8)]], psi=[1.0, 1.0])
    elif family == "multistage":
        if number is None:
            raise ConfigError("multistage scenarios need a number, e.g. multistage-1", module="simulate")
    elif family == "coverage":
        if number not in (1, 2, 3):
            raise ConfigError("coverage scenarios are numbered 1..3", module="simulate")
        psi = [1.0, 1.0, 1.0, 1.0] + ([-1.0, -1.0] if number == 3 else [])
        base.update(errors=_coverage_errors(number), psi=psi)
    elif family == "prediction":
        base.update(
            errors=[[ErrorModelSpec.t(10), ErrorModelSpec.normal(1.0)],
                    [ErrorModelSpec.normal(0.25), ErrorModelSpec.normal(0.25)]],
            psi=[1.0, -1.0, 3.0, -2.0],
            noise_variance=2.0,
        )
    elif family != "stard_like":
        raise ConfigError(f"unknown scenario family '{family}'", module="simulate")

    row = overrides.get("row")
    if row is not None and family == "multistage":
        rows = dict(scenario_rows(number))
        if row not in rows:
            raise ConfigError(f"scenario {name} has no row '{row}'; rows: {', '.join(rows)}", module="simulate")
        base.update(rows[row])
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig.model_validate(base)


def generate(cfg: ScenarioConfig, seed: Optional[int] = None) -> TrialDataset:
    seed = cfg.seed if seed is None else seed
    if cfg.family == "one_stage":
        return generate_one_stage(cfg.n, seed)
    if cfg.family == "multistage":
        return generate_multistage(cfg, seed)
    if cfg.family == "coverage":
        return generate_coverage(cfg, seed)
    if cfg.family == "prediction":
        return generate_prediction(cfg, seed)
    return generate_stard_like(cfg.n, seed)


# Analyses

@dataclass(frozen=True)
class Analysis:
    name: str
    specs: Tuple[StageSpec, ...]
    derived: Mapping[str, Callable[[DataTable], np.ndarray]] = field(default_factory=dict)


ONE_STAGE_DERIVED = {
    "expX": lambda t: np.exp(t.column("X")),
    "expXm1": lambda t: np.exp(t.column("X") - 1.0),
}

_ONE_STAGE_MODELS = {
    "analysis-1": ("1 + X", "1 + X"),
    "analysis-2": ("1 + X + expXm1", "1 + X"),
    "analysis-3": ("1 + X", "1 + X + expX"),
    "analysis-4": ("1 + X + expXm1", "1 + X + expX"),
}


def two_stage_specs(with_z: bool = False) -> Tuple[StageSpec, ...]:
    blip2 = "1 + X2 + Z2 + X2*Z2" if with_z else "1 + X2"
    tf2 = "1 + X1 + A1 + A1*X1 + X2" + (" + Z2" if with_z else "")
    return (
        StageSpec.from_strings(1, "A1", "1 + X1", "1 + X1", "1 + X1"),
        StageSpec.from_strings(2, "A2", "1 + X2", tf2, blip2),
    )


def stard_like_specs() -> Tuple[StageSpec, ...]:
    return tuple(
        StageSpec.from_strings(j + 1, f"A{j + 1}", *formulas) for j, formulas in enumerate(STARD_LIKE_MODEL)
    )


def default_analyses(cfg: ScenarioConfig) -> List[Analysis]:
    if cfg.family == "one_stage":
        return [
            Analysis(name, (StageSpec.from_strings(1, "A", t, tf, "1 + X"),), ONE_STAGE_DERIVED)
            for name, (t, tf) in _ONE_STAGE_MODELS.items()
        ]
    if cfg.family == "stard_like":
        return [Analysis("stard-like", stard_like_specs())]
    return [Analysis("two-stage", two_stage_specs(cfg.family == "coverage" and cfg.number == 3))]


def true_parameters(cfg: ScenarioConfig) -> np.ndarray:
    return np.asarray(cfg.psi, dtype=float)


# Summaries

@dataclass
class SummaryRow:
    scenario: str
    proxy_mode: str
    parameter: str
    corrected_median: float = float("nan")
    naive_median: float = float("nan")
    corrected_lo: float = float("nan")
    corrected_hi: float = float("nan")
    naive_lo: float = float("nan")
    naive_hi: float = float("nan")
    coverage: Optional[float] = None
    optimal_rate_stage1: Optional[float] = None
    optimal_rate_stage2: Optional[float] = None


SUMMARY_COLUMNS = [
    "scenario", "proxy_mode", "parameter", "corrected_median", "naive_median",
    "corrected_lo", "corrected_hi", "naive_lo", "naive_hi",
]
OPTIONAL_COLUMNS = ["coverage", "optimal_rate_stage1", "optimal_rate_stage2"]


@dataclass
class ReplicateSummary:
    rows: List[SummaryRow]
    replicates: int
    failures: int = 0

    @property
    def failure_share(self) -> float:
        return self.failures / self.replicates if self.replicates else 0.0

    @property
    def flagged(self) -> bool:
        return self.failure_share > FAILURE_FLAG_SHARE

    def row(self, parameter: str, scenario: Optional[str] = None, proxy_mode: Optional[str] = None) -> SummaryRow:
        for r in self.rows:
            if r.parameter == parameter and scenario in (None, r.scenario) and proxy_mode in (None, r.proxy_mode):
                return r
        raise KeyError(parameter)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.__dict__ for r in self.rows])
        columns = list(SUMMARY_COLUMNS)
        for c in OPTIONAL_COLUMNS:
            if c in frame and frame[c].notna().any():
                columns.append(c)
        return frame[columns] if not frame.empty else pd.DataFrame(columns=columns)


def _band(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if np.all(np.isnan(values)):
        nan = np.full(values.shape[1], np.nan)
        return nan, nan, nan
    return (
        np.nanmedian(values, axis=0),
        np.nanpercentile(values, 2.5, axis=0),
        np.nanpercentile(values, 97.5, axis=0),
    )


def _run_parallel(fn: Callable[[int], object], count: int, threads: Optional[int]):
    threads = threads or DEFAULT_THREADS
    if threads > 1 and count > 1:
        return Parallel(n_jobs=threads, prefer="threads")(delayed(fn)(r) for r in range(count))
    return [fn(r) for r in range(count)]


# Runners

def _fit_estimates(data: TrialDataset, analysis: Analysis, calibrate: bool, scheme: str):
    options = FitOptions(calibrate=calibrate, delta_scheme=scheme, derived=analysis.derived)
    return fit_dwols(data, analysis.specs, options)


def run_study(
    cfg: ScenarioConfig,
    analyses: Optional[Sequence[Analysis]] = None,
    proxy_modes: Optional[Sequence[Tuple[str, str]]] = None,
    threads: Optional[int] = None,
    scenario_label: Optional[str] = None,
) -> ReplicateSummary:
    """
    Replicated corrected-vs-naive comparison. Multistage scenarios run under each
    treatment-mechanism proxy mode; failed replicates are excluded and counted.
    """
    analyses = list(analyses or default_analyses(cfg))
    if cfg.family == "multistage":
        modes = list(proxy_modes or PROXY_MODE_SETS)
    else:
        modes = [tuple(cfg.proxy_modes[:2])]
    label = scenario_label or _scenario_label(cfg)
    rows: List[SummaryRow] = []
    failures = 0
    total = 0

    for mode in modes:
        mode_cfg = cfg.model_copy(update={"proxy_modes": list(mode)})
        mode_label = "/".join(_MODE_LABEL[m] for m in mode)

        def replicate(r: int):
            seed = streams.child_seed(cfg.seed, streams.REPLICATE, r)
            data = generate(mode_cfg, seed)
            out = []
            for analysis in analyses:
                try:
                    corrected = _fit_estimates(data, analysis, True, cfg.delta_scheme)
                    naive = _fit_estimates(data, analysis, False, cfg.delta_scheme)
                except (NumericalError, DataError) as e:
                    logger.debug("Replicate %d (%s, %s) failed: %s", r, mode_label, analysis.name, e)
                    out.append(None)
                    continue
                labels, c_est = corrected.estimates()
                out.append((labels, c_est, naive.estimates()[1]))
            return out

        results = _run_parallel(replicate, cfg.replicates, threads)
        for k, analysis in enumerate(analyses):
            fits = [res[k] for res in results]
            ok = [f for f in fits if f is not None]
            failures += len(fits) - len(ok)
            total += len(fits)
            if not ok:
                logger.warning("Every replicate failed for %s (%s)", analysis.name, mode_label)
                continue
            labels = ok[0][0]
            c_med, c_lo, c_hi = _band(np.vstack([f[1] for f in ok]))
            n_med, n_lo, n_hi = _band(np.vstack([f[2] for f in ok]))
            scenario = label if len(analyses) == 1 else f"{label}:{analysis.name}"
            for i, p in enumerate(labels):
                rows.append(SummaryRow(
                    scenario, mode_label, p,
                    float(c_med[i]), float(n_med[i]), float(c_lo[i]), float(c_hi[i]),
                    float(n_lo[i]), float(n_hi[i]),
                ))

    summary = ReplicateSummary(rows, total, failures)
    if summary.flagged:
        logger.warning(
            "%s: %d of %d replicate fits failed (%.1f%%); summary flagged",
            label, failures, total, 100 * summary.failure_share,
        )
    logger.info("%s: %d replicates x %d proxy modes summarised", label, cfg.replicates, len(modes))
    return summary


def _scenario_label(cfg: ScenarioConfig) -> str:
    base = cfg.family.replace("_", "-") + (f"-{cfg.number}" if cfg.number else "")
    return f"{base}:{cfg.row}" if cfg.row else base


def _bootstrap_for_method(method: str, base: BootstrapConfig, seed: int) -> BootstrapConfig:
    update: Dict = {"seed": seed, "threads": 1}
    if method == "nn":
        update["standard"] = True
    elif method.startswith("mn_"):
        update["zeta"] = float(method[3:])
    elif method != "adaptive":
        raise ConfigError(f"unknown interval method '{method}'", module="simulate")
    return base.model_copy(update=update)


def run_coverage_study(
    cfg: ScenarioConfig,
    methods: Sequence[str] = ("nn", "mn_0.05", "mn_0.1"),
    bootstrap: Optional[BootstrapConfig] = None,
    threads: Optional[int] = None,
) -> ReplicateSummary:
    """
    Repeated experiments: generate, bootstrap with each interval method and
    record whether the interval covers the true blip parameter.
    """
    bootstrap = bootstrap or BootstrapConfig()
    analysis = default_analyses(cfg)[0]
    truth = true_parameters(cfg)
    options = FitOptions(delta_scheme=cfg.delta_scheme)

    def experiment(r: int):
        seed = streams.child_seed(cfg.seed, streams.REPLICATE, r)
        data = generate(cfg, seed)
        out = {}
        for method in methods:
            try:
                report = mn_bootstrap(data, analysis.specs, _bootstrap_for_method(method, bootstrap, seed), options)
            except (NumericalError, DataError) as e:
                logger.debug("Experiment %d (%s) failed: %s", r, method, e)
                out[method] = None
                continue
            out[method] = (report.labels, report.estimates, report.covers(truth))
        return out

    results = _run_parallel(experiment, cfg.replicates, threads)
    rows: List[SummaryRow] = []
    failures = 0
    label = _scenario_label(cfg)
    for method in methods:
        ok = [res[method] for res in results if res[method] is not None]
        failures += cfg.replicates - len(ok)
        if not ok:
            continue
        labels = ok[0][0]
        med, lo, hi = _band(np.vstack([o[1] for o in ok]))
        cover = np.mean(np.vstack([o[2] for o in ok]), axis=0)
        for i, p in enumerate(labels):
            rows.append(SummaryRow(
                label, method, p, corrected_median=float(med[i]),
                corrected_lo=float(lo[i]), corrected_hi=float(hi[i]), coverage=float(cover[i]),
            ))
    summary = ReplicateSummary(rows, cfg.replicates * len(methods), failures)
    if summary.flagged:
        logger.warning("%s coverage study: %d failed experiments", label, failures)
    return summary


@dataclass
class PredictionSummary:
    rates: Dict[str, np.ndarray]
    replicates: int
    failures: int = 0

    def mean_rate(self, method: str) -> np.ndarray:
        return np.nanmean(self.rates[method], axis=0)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for method, values in self.rates.items():
            mean = np.nanmean(values, axis=0)
            rows.append({
                "scenario": "prediction",
                "proxy_mode": method,
                "parameter": "optimal_rate",
                "optimal_rate_stage1": float(mean[0]),
                "optimal_rate_stage2": float(mean[1]),
            })
        return pd.DataFrame(rows)


PREDICTION_METHODS = (
    "naive", "naive_true", "one_at_a_time", "one_at_a_time_proxy1",
    "one_at_a_time_proxy2", "pooled", "true",
)


def _deploy(decide_stage1, decide_stage2, cohort: Dict[str, np.ndarray], gamma1, gamma2) -> np.ndarray:
    """
    Sequential deployment: stage-1 decisions drive X2, which then feeds the
    stage-2 decision. Returns the optimal-treatment rate per stage.
    """
    first = DataTable({k: cohort[k] for k in ("X11", "X12", "X1_true")})
    a1 = decide_stage1(first.with_columns({"X1": cohort["X1_true"]}) if decide_stage1.needs_truth else first)
    x2 = a1 + cohort["e2"]
    second = DataTable({
        "X21": x2 + cohort["u21"], "X22": x2 + cohort["u22"], "A1": a1, "X2_true": x2,
        "X11": cohort["X11"], "X12": cohort["X12"],
    })
    a2 = decide_stage2(second.with_columns({"X2": x2}) if decide_stage2.needs_truth else second)
    opt1 = (gamma1(cohort["X1_true"]) > 0).astype(int)
    opt2 = (gamma2(x2) > 0).astype(int)
    return np.array([optimal_rate(a1, opt1), optimal_rate(a2, opt2)])


class _StageDecider:
    def __init__(self, fn, needs_truth: bool = False):
        self.fn = fn
        self.needs_truth = needs_truth

    def __call__(self, table: DataTable) -> np.ndarray:
        return np.asarray(self.fn(table)).reshape(-1)


def run_prediction_study(
    cfg: ScenarioConfig,
    predict_n: int = 5000,
    threads: Optional[int] = None,
) -> PredictionSummary:
    """
    Fit naive and corrected rules on n patients, then assign treatments to a
    fresh cohort under each information regime and score against the oracle.
    """
    analysis = default_analyses(cfg)[0]
    groups = (ProxyGroup.scalar("X1", ["X11", "X12"]), ProxyGroup.scalar("X2", ["X21", "X22"]))
    psi10, psi11, psi20, psi21 = cfg.psi

    def gamma1(x):
        return psi10 + psi11 * x

    def gamma2(x):
        return psi20 + psi21 * x

    def replicate(r: int):
        seed = streams.child_seed(cfg.seed, streams.REPLICATE, r)
        data = generate(cfg, seed)
        try:
            corrected = _fit_estimates(data, analysis, True, cfg.delta_scheme)
            naive = _fit_estimates(data, analysis, False, cfg.delta_scheme)
        except (NumericalError, DataError) as e:
            logger.debug("Prediction replicate %d failed: %s", r, e)
            return None

        rng = streams.stream(seed, streams.PREDICTION_COHORT)
        x1 = rng.normal(0.0, 1.0, predict_n)
        e1 = [apply_error(x1, spec, rng) for spec in cfg.errors[0]]
        cohort = {
            "X1_true": x1, "X11": e1[0], "X12": e1[1],
            "e2": rng.normal(0.0, 1.0, predict_n),
            "u21": apply_error(np.zeros(predict_n), cfg.errors[1][0], rng),
            "u22": apply_error(np.zeros(predict_n), cfg.errors[1][1], rng),
        }
        c_rule, n_rule = corrected.rule(), naive.rule()
        full = PseudoCorrector.from_fit(corrected, groups)

        def one_at_a_time(corrector):
            return (
                _StageDecider(lambda t: predict_one(corrector, c_rule, t, [1])),
                _StageDecider(lambda t: predict_one(corrector, c_rule, t, [2])),
            )

        deciders = {
            "naive": (
                _StageDecider(lambda t: predict_naive(n_rule, t, groups, naive.pooling, stages=[1])),
                _StageDecider(lambda t: predict_naive(n_rule, t, groups, naive.pooling, stages=[2])),
            ),
            "naive_true": (
                _StageDecider(lambda t: predict_true(n_rule, t, [1]), True),
                _StageDecider(lambda t: predict_true(n_rule, t, [2]), True),
            ),
            "one_at_a_time": one_at_a_time(full),
            "one_at_a_time_proxy1": one_at_a_time(full.with_available({"X1": [0], "X2": [0]})),
            "one_at_a_time_proxy2": one_at_a_time(full.with_available({"X1": [1], "X2": [1]})),
            "pooled": (
                _StageDecider(lambda t: predict_pooled(c_rule, t, groups, cfg.delta_scheme, [1])),
                _StageDecider(lambda t: predict_pooled(c_rule, t, groups, cfg.delta_scheme, [2])),
            ),
            "true": (
                _StageDecider(lambda t: predict_true(c_rule, t, [1]), True),
                _StageDecider(lambda t: predict_true(c_rule, t, [2]), True),
            ),
        }
        return {m: _deploy(d1, d2, cohort, gamma1, gamma2) for m, (d1, d2) in deciders.items()}

    results = _run_parallel(replicate, cfg.replicates, threads)
    ok = [r for r in results if r is not None]
    failures = len(results) - len(ok)
    if failures > FAILURE_FLAG_SHARE * cfg.replicates:
        logger.warning("Prediction study: %d of %d replicates failed", failures, cfg.replicates)
    rates = {m: np.vstack([r[m] for r in ok]) if ok else np.full((1, 2), np.nan) for m in PREDICTION_METHODS}
    return PredictionSummary(rates, cfg.replicates, failures)
