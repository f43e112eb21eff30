import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, special

from errors import ConvergenceError, PreconditionError, RankDeficiencyError, SeparationError
from tabledesign import DesignMatrix

logger = logging.getLogger(__name__)

RCOND_LIMIT = 1e-12
PROB_CLAMP = 1e-12
IRLS_MAX_ITER = 100
IRLS_TOL = 1e-10
SEPARATION_NORM = 1e3
# score-converged while alpha still moves this much: saturation
SEPARATION_STEP = 1e-3


@dataclass(frozen=True)
class WlsFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    term_labels: Tuple[str, ...]

    def coefficient(self, label: str) -> float:
        return float(self.coefficients[self.term_labels.index(label)])


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    fitted_probabilities: np.ndarray
    converged: bool
    iterations: int
    term_labels: Tuple[str, ...]
    score_residual: float


def expit(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Inverse logit H(x) = 1 / (1 + exp(-x))"""
    out = special.expit(x)
    return float(out) if np.ndim(out) == 0 else out


def logit(p: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    out = special.logit(p)
    return float(out) if np.ndim(out) == 0 else out


def _as_design(design: Union[DesignMatrix, np.ndarray]) -> DesignMatrix:
    if isinstance(design, DesignMatrix):
        return design
    values = np.atleast_2d(np.asarray(design, dtype=float))
    return DesignMatrix(values, tuple(f"x{i}" for i in range(values.shape[1])))


def _collinear_terms(r_diag: np.ndarray, pivots: np.ndarray, labels: Sequence[str]) -> List[str]:
    scale = r_diag.max() if r_diag.size else 0.0
    small = [labels[pivots[i]] for i in range(r_diag.size) if r_diag[i] <= np.sqrt(RCOND_LIMIT) * scale]
    return small or [labels[pivots[-1]]]


def wls(design: Union[DesignMatrix, np.ndarray], y: Sequence[float], weights: Sequence[float]) -> WlsFit:
    """
    Weighted least squares through a pivoted QR of the sqrt(w)-scaled design.

    Raises RankDeficiencyError when the weighted cross-product matrix has a
    reciprocal condition number below 1e-12.
    """
    design = _as_design(design)
    d = design.values
    y = np.asarray(y, dtype=float).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    n, p = d.shape
    if y.shape[0] != n or w.shape[0] != n:
        raise PreconditionError("design, response and weights must have the same number of rows")
    if n < p:
        raise PreconditionError(f"{n} rows cannot identify {p} coefficients")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise PreconditionError("weights must be finite and non-negative")

    sw = np.sqrt(w)
    q, r, piv = linalg.qr(d * sw[:, None], mode="economic", pivoting=True)
    singular_values = linalg.svdvals(r)
    if singular_values[0] == 0.0:
        raise RankDeficiencyError(list(design.term_labels), 0.0)
    rcond = (singular_values[-1] / singular_values[0]) ** 2
    if rcond < RCOND_LIMIT:
        raise RankDeficiencyError(_collinear_terms(np.abs(np.diag(r)), piv, design.term_labels), rcond)

    solved = linalg.solve_triangular(r, q.T @ (y * sw))
    coefficients = np.empty(p)
    coefficients[piv] = solved
    residuals = y - d @ coefficients
    return WlsFit(coefficients, residuals, tuple(design.term_labels))


def logistic_irls(design: Union[DesignMatrix, np.ndarray], a: Sequence[float]) -> LogisticFit:
    """Maximum-likelihood logistic regression by IRLS, started at alpha = 0."""
    design = _as_design(design)
    d = design.values
    a = np.asarray(a, dtype=float).reshape(-1)
    n, p = d.shape
    if a.shape[0] != n:
        raise PreconditionError("treatment vector does not match the design")
    if not np.all((a == 0.0) | (a == 1.0)):
        raise PreconditionError("treatment must be coded 0/1")
    if a.min() == a.max():
        raise PreconditionError(f"treatment has a single class ({int(a[0])}); no treatment model can be fitted")
    if n < p:
        raise PreconditionError(f"{n} rows cannot identify {p} treatment-model coefficients")

    alpha = np.zeros(p)
    steps: List[float] = []
    for iteration in range(1, IRLS_MAX_ITER + 1):
        eta = d @ alpha
        pi = special.expit(eta)
        pc = np.clip(pi, PROB_CLAMP, 1.0 - PROB_CLAMP)
        working = pc * (1.0 - pc)
        z = eta + (a - pi) / working
        updated = wls(design, z, working).coefficients
        step = float(np.max(np.abs(updated - alpha)))
        steps.append(step)
        alpha = updated

        if np.linalg.norm(alpha) > SEPARATION_NORM:
            raise SeparationError(
                "treatment model shows quasi-complete separation "
                f"(coefficient norm {np.linalg.norm(alpha):.3g}); revise the treatment model"
            )

        pi = special.expit(d @ alpha)
        score = float(np.max(np.abs(d.T @ (a - pi))))
        if step <= IRLS_TOL or score <= IRLS_TOL:
            if step > SEPARATION_STEP:
                raise SeparationError(
                    "treatment model shows quasi-complete separation (fitted probabilities saturate "
                    f"while coefficients still move by {step:.3g}); revise the treatment model"
                )
            logger.debug("IRLS converged in %d iterations (score %.2e)", iteration, score)
            return LogisticFit(alpha, pi, True, iteration, tuple(design.term_labels), score)

    raise ConvergenceError(f"logistic IRLS did not converge in {IRLS_MAX_ITER} iterations", steps)
