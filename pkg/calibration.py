"""
Regression calibration for covariates observed through unbiased proxies.

Each proxy X*_j = X + U_j.  The proxies are pooled as X* = sum_j delta_j X*_j and
X is imputed by the plug-in best linear unbiased predictor

    X_hat = mu_X + [S_XX, S_XZ] [[S_X*X*, S_X*Z], [S_ZX*, S_ZZ]]^-1 [X* - mu_X, Z - mu_Z]

with every variance component estimated by method of moments from the replicate
proxies.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import linalg, special

from errors import (
    ConvergenceError,
    DegenerateErrorEstimateError,
    PreconditionError,
    SingularCovarianceError,
)

logger = logging.getLogger(__name__)

DELTA_SCHEMES = ("equal", "trace_inverse", "blup_optimal")
RCOND_LIMIT = 1e-12
FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_ITER = 500
PROBIT_SCALE = 1.7

BetaHint = Union[np.ndarray, Sequence[float], Callable[[np.ndarray], np.ndarray]]


def _symmetrize(s: np.ndarray) -> np.ndarray:
    return (s + s.T) / 2.0


def _cov(a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """Sample (cross-)covariance with n - 1 denominator."""
    b = a if b is None else b
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    return ac.T @ bc / (a.shape[0] - 1)


def _as_matrix(x, n_rows: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None] if n_rows is None or arr.shape[0] == n_rows else arr[None, :]
    return arr


class ProxySet:
    """k unbiased proxies of a d-dimensional covariate, each an n x d matrix."""

    __slots__ = ("proxies",)

    def __init__(self, proxies: Sequence):
        mats = tuple(_as_matrix(p) for p in proxies)
        if not mats:
            raise PreconditionError("a proxy set needs at least one proxy", module="calibration")
        shape = mats[0].shape
        for m in mats[1:]:
            if m.shape != shape:
                raise PreconditionError(
                    f"proxy shapes differ: {m.shape} vs {shape}", module="calibration"
                )
        self.proxies = mats

    @property
    def k(self) -> int:
        return len(self.proxies)

    @property
    def n(self) -> int:
        return self.proxies[0].shape[0]

    @property
    def d(self) -> int:
        return self.proxies[0].shape[1]

    def stacked(self) -> np.ndarray:
        return np.stack(self.proxies)

    def subset_rows(self, rows) -> "ProxySet":
        return ProxySet([p[rows] for p in self.proxies])

    def select(self, indices: Sequence[int]) -> "ProxySet":
        return ProxySet([self.proxies[j] for j in indices])


@dataclass(frozen=True)
class DeltaWeights:
    delta: np.ndarray
    scheme: str

    def __post_init__(self):
        if abs(float(np.sum(self.delta)) - 1.0) > 1e-9:
            raise PreconditionError("delta weights must sum to one", module="calibration")
        if self.scheme in ("equal", "trace_inverse") and np.any(self.delta < 0):
            raise PreconditionError("delta weights must be non-negative", module="calibration")

    @property
    def k(self) -> int:
        return self.delta.shape[0]


def _trace_inverse(m_per_proxy: Sequence[np.ndarray]) -> np.ndarray:
    traces = np.array([np.trace(m) for m in m_per_proxy])
    bad = np.flatnonzero(traces <= 0)
    if bad.size:
        raise DegenerateErrorEstimateError(
            f"estimated error variance of proxy {int(bad[0]) + 1} is not positive "
            f"(trace {traces[bad[0]]:.3g}); use delta_scheme 'equal' or check the proxies"
        )
    inv = 1.0 / traces
    return inv / inv.sum()


def _beta_gram(beta, d: int) -> np.ndarray:
    b = np.asarray(beta, dtype=float).reshape(-1, d)
    return b.T @ b


def delta_weights(
    proxies: ProxySet,
    scheme: str,
    m_per_proxy: Sequence[np.ndarray],
    beta_hint: Optional[BetaHint] = None,
) -> DeltaWeights:
    """
    Proxy pooling weights.

    `equal` gives 1/k each; `trace_inverse` weights by 1/Tr(M_j); `blup_optimal`
    iterates delta <- normalize(1/Tr(b'b M_j)) starting from the trace_inverse
    weights, where b is `beta_hint` or, if callable, `beta_hint(delta)`.
    """
    k = proxies.k
    if scheme not in DELTA_SCHEMES:
        raise PreconditionError(f"unknown delta scheme '{scheme}'", module="calibration")
    if len(m_per_proxy) != k:
        raise PreconditionError("one error covariance per proxy is required", module="calibration")
    if scheme == "equal":
        return DeltaWeights(np.full(k, 1.0 / k), scheme)
    start = _trace_inverse(m_per_proxy)
    if scheme == "trace_inverse":
        return DeltaWeights(start, scheme)

    if beta_hint is None:
        raise PreconditionError("blup_optimal weights need an outcome coefficient hint", module="calibration")
    delta = start
    trace = []
    for _ in range(FIXED_POINT_MAX_ITER):
        beta = beta_hint(delta) if callable(beta_hint) else beta_hint
        gram = _beta_gram(beta, proxies.d)
        values = np.array([np.trace(gram @ m) for m in m_per_proxy])
        if np.any(values <= 0):
            raise DegenerateErrorEstimateError(
                "Tr(b'b M_j) is not positive for some proxy; blup_optimal weights are undefined"
            )
        updated = (1.0 / values) / np.sum(1.0 / values)
        change = float(np.max(np.abs(updated - delta)))
        trace.append(change)
        delta = updated
        if change <= FIXED_POINT_TOL:
            return DeltaWeights(delta, scheme)
    raise ConvergenceError(
        "blup_optimal delta weights did not converge", trace, module="calibration"
    )


def combine_proxies(proxies: ProxySet, delta: DeltaWeights) -> np.ndarray:
    if delta.k != proxies.k:
        raise PreconditionError("delta weights do not match the number of proxies", module="calibration")
    return np.tensordot(delta.delta, proxies.stacked(), axes=1)


@dataclass(frozen=True)
class CalibrationModel:
    """Frozen plug-in moments for the proxy BLUP."""

    mu_x: np.ndarray
    mu_z: np.ndarray
    sigma_xx_1: np.ndarray
    sigma_xx_2: np.ndarray
    m_total: np.ndarray
    m_per_proxy: tuple
    sigma_xstar: np.ndarray
    sigma_xz: np.ndarray
    sigma_zz: np.ndarray
    delta: DeltaWeights
    sigma_x_given: np.ndarray
    gain: np.ndarray

    @property
    def d(self) -> int:
        return self.mu_x.shape[0]

    @property
    def q(self) -> int:
        return self.mu_z.shape[0]

    @property
    def k(self) -> int:
        return len(self.m_per_proxy)

    @property
    def shrinkage(self) -> np.ndarray:
        """Coefficient block applied to (X* - mu_X)"""
        return self.gain[:, : self.d]

    @classmethod
    def from_components(
        cls,
        mu_x,
        sigma_xx,
        m_per_proxy: Sequence,
        delta: DeltaWeights,
        mu_z=None,
        sigma_xz=None,
        sigma_zz=None,
        sigma_xx_1=None,
        m_total=None,
    ) -> "CalibrationModel":
        """Build a model from X moments, per-proxy error covariances and pooling weights."""
        mu_x = np.atleast_1d(np.asarray(mu_x, dtype=float))
        d = mu_x.shape[0]
        sigma_xx = _symmetrize(np.asarray(sigma_xx, dtype=float).reshape(d, d))
        m_list = tuple(_symmetrize(np.asarray(m, dtype=float).reshape(d, d)) for m in m_per_proxy)
        if len(m_list) != delta.k:
            raise PreconditionError("delta weights do not match the number of proxies", module="calibration")

        mu_z = np.zeros(0) if mu_z is None else np.atleast_1d(np.asarray(mu_z, dtype=float))
        q = mu_z.shape[0]
        sigma_xz = np.zeros((d, 0)) if q == 0 else np.asarray(sigma_xz, dtype=float).reshape(d, q)
        sigma_zz = np.zeros((0, 0)) if q == 0 else _symmetrize(np.asarray(sigma_zz, dtype=float).reshape(q, q))

        pooled_error = sum(w * w * m for w, m in zip(delta.delta, m_list))
        sigma_xstar = sigma_xx + pooled_error
        joint = np.block([[sigma_xstar, sigma_xz], [sigma_xz.T, sigma_zz]])
        joint = _symmetrize(joint)
        rcond = 1.0 / np.linalg.cond(joint) if np.all(np.isfinite(joint)) else 0.0
        if not np.isfinite(rcond) or rcond < RCOND_LIMIT:
            raise SingularCovarianceError(
                f"joint proxy/Z covariance is singular (reciprocal condition {rcond:.3g}); "
                "check for collinear proxies or Z columns"
            )
        cross = np.hstack([sigma_xx, sigma_xz])
        gain = linalg.solve(joint, cross.T, assume_a="sym").T
        sigma_x_given = _symmetrize(sigma_xx - gain @ cross.T)

        return cls(
            mu_x=mu_x,
            mu_z=mu_z,
            sigma_xx_1=sigma_xx if sigma_xx_1 is None else np.asarray(sigma_xx_1, dtype=float),
            sigma_xx_2=sigma_xx,
            m_total=np.zeros((d, d)) if m_total is None else np.asarray(m_total, dtype=float),
            m_per_proxy=m_list,
            sigma_xstar=sigma_xstar,
            sigma_xz=sigma_xz,
            sigma_zz=sigma_zz,
            delta=delta,
            sigma_x_given=sigma_x_given,
            gain=gain,
        )

    def restrict(self, available: Sequence[int]) -> "CalibrationModel":
        """
        Re-derive the BLUP blocks for a subset of proxies: delta is restricted and
        renormalized and the pooled error covariance rebuilt from the frozen M_j.
        """
        idx = list(available)
        if not idx or any(j < 0 or j >= self.k for j in idx):
            raise PreconditionError(f"invalid proxy subset {idx}", module="calibration")
        if idx == list(range(self.k)):
            return self
        raw = self.delta.delta[idx]
        if raw.sum() <= 0:
            raw = np.ones(len(idx))
        delta = DeltaWeights(raw / raw.sum(), self.delta.scheme)
        return CalibrationModel.from_components(
            self.mu_x,
            self.sigma_xx_2,
            [self.m_per_proxy[j] for j in idx],
            delta,
            mu_z=self.mu_z if self.q else None,
            sigma_xz=self.sigma_xz if self.q else None,
            sigma_zz=self.sigma_zz if self.q else None,
            sigma_xx_1=self.sigma_xx_1,
            m_total=self.m_total,
        )


def _error_moments(proxies: ProxySet):
    """Total error covariance M, Sigma_XX from the per-proxy covariances, and M_j per proxy."""
    k, n = proxies.k, proxies.n
    stacked = proxies.stacked()
    per_proxy_cov = [_cov(stacked[j]) for j in range(k)]

    # Leave-one-out mean of the other proxies for every (row, proxy)
    totals = stacked.sum(axis=0)
    loo = (totals[None, :, :] - stacked) / (k - 1)
    dev = stacked - loo
    m_total = _symmetrize((k - 1) / (k * n) * np.einsum("jni,jnl->il", dev, dev))

    sigma_xx_1 = _symmetrize((sum(per_proxy_cov) - m_total) / k)
    m_per_proxy = [_symmetrize(c - sigma_xx_1) for c in per_proxy_cov]
    return m_total, sigma_xx_1, m_per_proxy


def pooling_weights(
    proxies: ProxySet,
    delta_scheme: str = "trace_inverse",
    beta_hint: Optional[BetaHint] = None,
) -> DeltaWeights:
    """
    Pooling weights for analyses that average the proxies without calibrating.
    Only the per-proxy error covariances are estimated; when they cannot support
    the scheme the proxies are averaged with equal weights.
    """
    k, n = proxies.k, proxies.n
    if delta_scheme not in DELTA_SCHEMES:
        raise PreconditionError(f"unknown delta scheme '{delta_scheme}'", module="calibration")
    if delta_scheme == "equal" or k == 1:
        return DeltaWeights(np.full(k, 1.0 / k), "equal")
    if n < 3:
        logger.warning("Only %d rows to estimate proxy error variances; pooling with equal weights", n)
        return DeltaWeights(np.full(k, 1.0 / k), "equal")
    _, _, m_per_proxy = _error_moments(proxies)
    try:
        return delta_weights(proxies, delta_scheme, m_per_proxy, beta_hint)
    except DegenerateErrorEstimateError as e:
        logger.warning("%s; pooling with equal weights", e)
        return DeltaWeights(np.full(k, 1.0 / k), "equal")


def fit_calibration(
    proxies: ProxySet,
    z=None,
    delta_scheme: str = "trace_inverse",
    beta_hint: Optional[BetaHint] = None,
) -> CalibrationModel:
    """Method-of-moments estimates of every variance component, then the BLUP blocks."""
    k, n, d = proxies.k, proxies.n, proxies.d
    if k < 2:
        raise PreconditionError(
            f"calibration needs at least 2 proxies per error-prone covariate, got {k}",
            module="calibration",
        )
    if n < 3:
        raise PreconditionError(f"calibration needs at least 3 rows, got {n}", module="calibration")

    m_total, sigma_xx_1, m_per_proxy = _error_moments(proxies)
    delta = delta_weights(proxies, delta_scheme, m_per_proxy, beta_hint)
    xstar = combine_proxies(proxies, delta)
    sigma_xstar = _symmetrize(_cov(xstar))
    pooled_error = sum(w * w * m for w, m in zip(delta.delta, m_per_proxy))
    sigma_xx_2 = sigma_xstar - pooled_error

    mu_z = sigma_xz = sigma_zz = None
    if z is not None:
        z = _as_matrix(z, n)
        if z.shape[1] > 0:
            if z.shape[0] != n:
                raise PreconditionError("Z rows do not match the proxies", module="calibration")
            mu_z = z.mean(axis=0)
            sigma_xz = _cov(xstar, z)
            sigma_zz = _cov(z)

    model = CalibrationModel.from_components(
        xstar.mean(axis=0),
        sigma_xx_2,
        m_per_proxy,
        delta,
        mu_z=mu_z,
        sigma_xz=sigma_xz,
        sigma_zz=sigma_zz,
        sigma_xx_1=sigma_xx_1,
        m_total=m_total,
    )
    logger.debug(
        "Calibration fitted: n=%d k=%d d=%d delta=%s trace(M)=%.4g",
        n, k, d, np.round(delta.delta, 4).tolist(), float(np.trace(m_total)),
    )
    return model


def fit_calibration_conditional(
    proxies: ProxySet,
    z,
    delta_scheme: str,
    mask,
    beta_hint: Optional[BetaHint] = None,
) -> CalibrationModel:
    """fit_calibration restricted to the rows selected by a 0/1 mask"""
    keep = np.asarray(mask).astype(bool)
    if keep.shape[0] != proxies.n:
        raise PreconditionError("mask length does not match the proxies", module="calibration")
    if keep.sum() < 3:
        raise PreconditionError(
            f"conditional calibration subset has {int(keep.sum())} rows; at least 3 needed",
            module="calibration",
        )
    z_sub = None if z is None else _as_matrix(z, proxies.n)[keep]
    return fit_calibration(proxies.subset_rows(keep), z_sub, delta_scheme, beta_hint)


def blup_impute(model: CalibrationModel, xstar, z=None) -> np.ndarray:
    xstar = _as_matrix(xstar)
    if xstar.shape[1] != model.d:
        raise PreconditionError(
            f"combined proxy has {xstar.shape[1]} columns, model expects {model.d}",
            module="calibration",
        )
    centred = [xstar - model.mu_x]
    if model.q:
        if z is None:
            raise PreconditionError("model was fitted with Z columns; Z is required", module="calibration")
        z = _as_matrix(z, xstar.shape[0])
        if z.shape[1] != model.q:
            raise PreconditionError(f"Z has {z.shape[1]} columns, model expects {model.q}", module="calibration")
        centred.append(z - model.mu_z)
    return model.mu_x + np.hstack(centred) @ model.gain.T


def attenuated_probability(alpha0, alpha_x, alpha_z, x_hat, z, sigma_x_given):
    """
    Logistic probability integrated over the remaining uncertainty in X, using
    H(lp / sqrt(1 + a' S a / 1.7^2)).

    `x_hat` is one patient's d-vector or an n x d matrix; `z` likewise.
    """
    alpha_x = np.atleast_1d(np.asarray(alpha_x, dtype=float))
    x_hat = np.asarray(x_hat, dtype=float)
    if x_hat.ndim == 0 or (x_hat.ndim == 1 and alpha_x.size == 1):
        lp = alpha0 + x_hat * alpha_x[0]
    else:
        lp = alpha0 + x_hat @ alpha_x
    if alpha_z is not None and z is not None and np.size(alpha_z):
        alpha_z = np.atleast_1d(np.asarray(alpha_z, dtype=float))
        z = np.asarray(z, dtype=float)
        if z.ndim == 0 or (z.ndim == 1 and alpha_z.size == 1):
            lp = lp + z * alpha_z[0]
        else:
            lp = lp + z @ alpha_z
    sigma = np.atleast_2d(np.asarray(sigma_x_given, dtype=float))
    inflation = float(alpha_x @ sigma @ alpha_x) / PROBIT_SCALE ** 2
    out = special.expit(lp / np.sqrt(1.0 + inflation))
    return float(out) if np.ndim(out) == 0 else out
