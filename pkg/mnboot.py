"""
m-out-of-n bootstrap for dWOLS blip coefficients.

The resample size m = n^((1 + zeta(1 - p)) / (1 + zeta)) shrinks with the
estimated share p of patients whose final-stage optimal treatment is not
identified. p is estimated from per-patient Wald intervals for the final-stage
blip, and zeta by a double bootstrap over an ascending grid.

Every resample refits the whole pipeline, calibration included, on whole
patients drawn with replacement. Resample b always uses the stream
(seed, tag, b, attempt), so results do not depend on thread scheduling.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

import streams
from config import DEFAULT_THREADS
from dwols import DtrFit, FitOptions, StageSpec, fit_dwols
from errors import BootstrapAbortedError, DataError, NumericalError, PreconditionError
from schemas import BootstrapConfig
from tabledesign import TrialDataset

logger = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.05


@dataclass(frozen=True)
class BootstrapReport:
    p_hat: float
    zeta_hat: float
    m: int
    n: int
    level: float
    labels: Tuple[str, ...]
    estimates: np.ndarray
    intervals: np.ndarray
    resamples: np.ndarray
    failures: int
    zeta_coverage: Dict[float, float] = field(default_factory=dict)

    def interval(self, label: str) -> Tuple[float, float]:
        i = self.labels.index(label)
        return float(self.intervals[i, 0]), float(self.intervals[i, 1])

    def covers(self, truth: Sequence[float]) -> np.ndarray:
        truth = np.asarray(truth, dtype=float)
        return (self.intervals[:, 0] <= truth) & (truth <= self.intervals[:, 1])


@dataclass(frozen=True)
class ZetaSelection:
    zeta: float
    coverage: Dict[float, float]
    exhausted: bool


def resample_size(n: int, p_hat: float, zeta: float) -> int:
    """m = n^((1 + zeta(1 - p)) / (1 + zeta)), rounded half-up and kept in [n^(1/(1+zeta)), n]."""
    if n < 1:
        raise PreconditionError("resample size needs n >= 1", module="mnboot")
    if not 0.0 <= p_hat <= 1.0:
        raise PreconditionError(f"p_hat must lie in [0, 1], got {p_hat}", module="mnboot")
    if zeta <= 0:
        raise PreconditionError(f"zeta must be positive, got {zeta}", module="mnboot")
    exponent = (1.0 + zeta * (1.0 - p_hat)) / (1.0 + zeta)
    m = math.floor(n ** exponent + 0.5)
    # half-up can land one below the lower bound n^(1/(1+zeta)) when p_hat = 1
    m = max(m, math.ceil(n ** (1.0 / (1.0 + zeta)) - 1e-9))
    return min(max(m, 2), n)


def percentile_interval(samples: np.ndarray, level: float) -> np.ndarray:
    """Per-column [lo, hi] quantiles of the resample estimates; failed rows (NaN) are skipped."""
    tail = (1.0 - level) / 2.0
    return np.nanquantile(np.atleast_2d(samples), [tail, 1.0 - tail], axis=0).T


def _threads(config: BootstrapConfig) -> int:
    return config.threads or DEFAULT_THREADS


def _full_estimates(fit: DtrFit, final_only: bool) -> np.ndarray:
    if final_only:
        return fit.final.psi
    return fit.estimates()[1]


def _resample_estimates(
    data: TrialDataset,
    specs: Sequence[StageSpec],
    options: FitOptions,
    m: int,
    count: int,
    seed: int,
    path: Tuple[int, ...],
    width: int,
    final_only: bool = False,
    threads: int = 1,
) -> Tuple[np.ndarray, int]:
    """
    `count` refits on m-row resamples. A failed fit is retried once on a fresh
    resample; a resample counts as failed only when the retry fails too, and more
    than 5% failed resamples abort.
    """
    n = data.n_rows

    def one(b: int):
        for attempt in (0, 1):
            idx = streams.resample_indices(seed, n, m, *path, b, attempt)
            try:
                return _full_estimates(fit_dwols(data.take(idx), specs, options), final_only), attempt
            except (NumericalError, DataError) as e:
                logger.debug("Resample %s/%d attempt %d failed: %s", path, b, attempt, e)
        return np.full(width, np.nan), None

    if threads > 1 and count > 1:
        results = Parallel(n_jobs=threads, prefer="threads")(delayed(one)(b) for b in range(count))
    else:
        results = [one(b) for b in range(count)]

    estimates = np.vstack([r[0] for r in results])
    failures = sum(1 for r in results if r[1] is None)
    retried = sum(1 for r in results if r[1] == 1)
    if retried:
        logger.debug("%d of %d resamples needed a retry", retried, count)
    if failures > MAX_FAILURE_SHARE * count:
        raise BootstrapAbortedError(
            f"{failures} of {count} resamples failed to fit after a retry; "
            "the model may be too rich for resamples of size "
            f"{m}"
        )
    return estimates, failures


def _p_from_fit(
    data: TrialDataset,
    specs: Sequence[StageSpec],
    options: FitOptions,
    fit: DtrFit,
    config: BootstrapConfig,
    path: Tuple[int, ...],
    threads: int,
) -> float:
    final = fit.final
    width = final.psi.shape[0]
    replicates, _ = _resample_estimates(
        data, specs, options, data.n_rows, config.Bp, config.seed, path, width, True, threads
    )
    replicates = replicates[~np.isnan(replicates[:, 0])]
    if replicates.shape[0] < 2:
        raise BootstrapAbortedError("too few resamples to estimate the blip covariance")
    cov = np.atleast_2d(np.cov(replicates, rowvar=False))
    if not np.all(np.isfinite(cov)):
        raise BootstrapAbortedError("bootstrap covariance of the final-stage blip is degenerate")

    design = final.blip_design
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", design, cov, design), 0.0))
    z = stats.norm.ppf(1.0 - config.p_level / 2.0)
    ambiguous = np.abs(final.blip_values) <= z * se
    return float(np.mean(ambiguous))


def estimate_p(
    data: TrialDataset,
    specs: Sequence[StageSpec],
    config: BootstrapConfig,
    options: Optional[FitOptions] = None,
    fit: Optional[DtrFit] = None,
) -> float:
    """Share of patients whose final-stage blip interval contains zero."""
    options = options or FitOptions()
    fit = fit or fit_dwols(data, specs, options)
    p_hat = _p_from_fit(data, specs, options, fit, config, (streams.P_RESAMPLE,), _threads(config))
    logger.info("Estimated non-regularity share p_hat=%.4f from %d resamples", p_hat, config.Bp)
    return p_hat


def select_zeta(
    data: TrialDataset,
    specs: Sequence[StageSpec],
    config: BootstrapConfig,
    options: Optional[FitOptions] = None,
    fit: Optional[DtrFit] = None,
) -> ZetaSelection:
    """Smallest grid zeta whose double-bootstrap coverage reaches the nominal level."""
    options = options or FitOptions()
    fit = fit or fit_dwols(data, specs, options)
    target = fit.estimates()[1]
    width = target.shape[0]
    grid = config.zeta_grid.values()
    n = data.n_rows

    def outer(b1: int):
        for attempt in (0, 1):
            idx = streams.resample_indices(config.seed, n, n, streams.OUTER_RESAMPLE, b1, attempt)
            sample = data.take(idx)
            try:
                sample_fit = fit_dwols(sample, specs, options)
                p_b = _p_from_fit(
                    sample, specs, options, sample_fit, config,
                    (streams.OUTER_RESAMPLE, b1, attempt, streams.P_RESAMPLE), 1,
                )
            except (NumericalError, DataError) as e:
                logger.debug("Outer resample %d attempt %d failed: %s", b1, attempt, e)
                continue
            covered = []
            for zi, zeta in enumerate(grid):
                m = resample_size(n, p_b, zeta)
                inner, _ = _resample_estimates(
                    sample, specs, options, m, config.B2, config.seed,
                    (streams.INNER_RESAMPLE, b1, attempt, zi), width,
                )
                lo_hi = percentile_interval(inner, config.level)
                covered.append((lo_hi[:, 0] <= target) & (target <= lo_hi[:, 1]))
            return np.array(covered)
        return None

    threads = _threads(config)
    if threads > 1 and config.B1 > 1:
        results = Parallel(n_jobs=threads, prefer="threads")(delayed(outer)(b) for b in range(config.B1))
    else:
        results = [outer(b) for b in range(config.B1)]

    usable = [r for r in results if r is not None]
    lost = config.B1 - len(usable)
    if not usable or lost > MAX_FAILURE_SHARE * config.B1:
        raise BootstrapAbortedError(f"{lost} of {config.B1} outer resamples could not be fitted")

    hits = np.stack(usable)  # (B1, grid, params)
    coverage = {}
    for zi, zeta in enumerate(grid):
        coverage[zeta] = float(hits[:, zi, :].mean())
        logger.debug("zeta=%.3f double-bootstrap coverage %.4f", zeta, coverage[zeta])
        if coverage[zeta] >= config.level:
            logger.info("Selected zeta=%.3f (coverage %.4f)", zeta, coverage[zeta])
            return ZetaSelection(zeta, coverage, False)
    logger.warning(
        "No zeta in the grid reached coverage %.2f; using the grid maximum %.3f", config.level, grid[-1]
    )
    return ZetaSelection(grid[-1], coverage, True)


def mn_bootstrap(
    data: TrialDataset,
    specs: Sequence[StageSpec],
    config: BootstrapConfig,
    options: Optional[FitOptions] = None,
) -> BootstrapReport:
    options = options or FitOptions()
    fit = fit_dwols(data, specs, options)
    labels, estimates = fit.estimates()
    n = data.n_rows
    coverage: Dict[float, float] = {}

    if config.standard:
        p_hat, zeta = 0.0, config.zeta or config.zeta_grid.start
    else:
        p_hat = config.p_hat if config.p_hat is not None else estimate_p(data, specs, config, options, fit)
        if config.zeta is not None:
            zeta = config.zeta
        else:
            selection = select_zeta(data, specs, config, options, fit)
            zeta, coverage = selection.zeta, selection.coverage
    m = resample_size(n, p_hat, zeta)
    logger.info("Bootstrap with n=%d, p_hat=%.4f, zeta=%.3f -> m=%d, B=%d", n, p_hat, zeta, m, config.B)

    resamples, failures = _resample_estimates(
        data, specs, options, m, config.B, config.seed,
        (streams.FINAL_RESAMPLE,), estimates.shape[0], threads=_threads(config),
    )
    intervals = percentile_interval(resamples, config.level)
    return BootstrapReport(
        p_hat=p_hat,
        zeta_hat=zeta,
        m=m,
        n=n,
        level=config.level,
        labels=tuple(labels),
        estimates=estimates,
        intervals=intervals,
        resamples=resamples,
        failures=failures,
        zeta_coverage=coverage,
    )
