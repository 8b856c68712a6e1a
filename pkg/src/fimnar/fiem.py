"""Fractional-imputation EM estimator for the response-model parameters.

Each missing outcome is represented by the whole pool of respondent
outcomes ("donors"), weighted so that weighted donor averages
approximate conditional expectations given the unit's covariates and
nonresponse.  The weight of donor value y for a missing unit with
covariates x is proportional to

    odds(x, y; phi) * f(y | x, respondent; gamma) / C(y; gamma),

with ``C(y) = sum_l f(y | x_l, respondent; gamma)`` summing over all
respondents; the weights are normalized within each missing unit.  The
estimator alternates recomputing weights at the current response
parameters (E-step) with a Newton solve of the weighted mean score
equation holding the weights fixed (M-step).

The respondents' model ``gamma`` is fitted once from complete cases and
held fixed throughout; only the density factors of the weights depend
on it, so they are computed once per fit and shared across E-steps.

An alternative "parametric" engine draws a fixed per-unit pool of M
imputed values from the respondents' density and reweights it by the
nonresponse odds each E-step; it exists for cross-checking the donor
scheme and is not used for variance estimation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .dataio import Dataset
from .expfam import OutcomeSpec, _logsumexp0, log_density_outer, sample
from .identify import IdentifyVerdict, Status
from .respondent import FitError, RespondentFit
from .response import ResponseSpec

__all__ = [
    "FiControls",
    "FractionalWeights",
    "FitResult",
    "UnidentifiableModelError",
    "fractional_weights",
    "mean_score",
    "score_jacobian",
    "solve_mean_score",
    "em_fit",
    "estimate_mu_y",
]


class UnidentifiableModelError(RuntimeError):
    """Refusal to fit a model flagged as provably unidentifiable."""


@dataclass(frozen=True)
class FiControls:
    tol_phi: float = 1e-8
    tol_score: float = 1e-8
    max_em_iter: int = 500
    max_newton_iter: int = 50
    max_halvings: int = 30
    ridge: float = 1e-10


@dataclass
class FractionalWeights:
    """Normalized donor weights for every missing unit.

    ``donor_y`` is the shared respondent outcome vector for the donor
    engine, or an (n_missing, M) array of per-unit imputed pools for
    the parametric engine.  ``w`` has one row per missing unit and one
    column per donor; rows sum to one.
    """

    missing_rows: np.ndarray
    donor_y: np.ndarray
    w: np.ndarray
    donor_rows: Optional[np.ndarray] = None

    @property
    def n_missing(self) -> int:
        return self.w.shape[0]

    def donor_matrix(self) -> np.ndarray:
        """Donor outcomes broadcast to the shape of ``w``."""
        if self.donor_y.ndim == 1:
            return np.broadcast_to(self.donor_y[None, :], self.w.shape)
        return self.donor_y


@dataclass
class FitResult:
    """Fitted response model with the state needed for inference."""

    phi_hat: ResponseSpec
    gamma: RespondentFit
    weights: FractionalWeights
    covariance: Optional[np.ndarray]
    em_iterations: int
    mean_score_norm: float
    converged: bool
    trace: tuple[tuple[int, float, float], ...] = ()

    @property
    def phi(self) -> np.ndarray:
        return self.phi_hat.phi


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def _donor_log_base(gamma: OutcomeSpec, data: Dataset) -> np.ndarray:
    """log f(y_j | x_i) - log C(y_j): the phi-independent weight factors."""
    y_d = data.y_observed
    resp_cols = data.respondent_columns()
    miss_cols = data.missing_columns()
    log_c = _logsumexp0(log_density_outer(gamma, y_d, resp_cols))
    return log_density_outer(gamma, y_d, miss_cols) - log_c[None, :]


def _normalize_rows(logw: np.ndarray) -> np.ndarray:
    """In-place exponentiation after per-row max subtraction."""
    if logw.size == 0:
        return np.zeros_like(logw)
    row_max = np.max(logw, axis=1)
    if np.any(~np.isfinite(row_max)):
        bad = int(np.nonzero(~np.isfinite(row_max))[0][0])
        raise FitError(
            f"missing unit {bad}: every donor has zero density under the "
            "respondents' model; the outcome model does not cover this unit"
        )
    logw -= row_max[:, None]
    w = np.exp(logw, out=logw)
    w /= w.sum(axis=1, keepdims=True)
    return w


def _weights_from_base(
    phi: ResponseSpec, h_missing: np.ndarray, donor_y: np.ndarray, base: np.ndarray
) -> np.ndarray:
    if donor_y.ndim == 1:
        logw = np.add.outer(-h_missing, -phi.beta * donor_y)
    else:
        logw = -h_missing[:, None] - phi.beta * donor_y
    logw += base
    return _normalize_rows(logw)


def fractional_weights(
    phi: ResponseSpec, gamma: OutcomeSpec, data: Dataset
) -> FractionalWeights:
    """Donor weights at the given response parameters.

    Computed in log space and exponentiated after subtracting each
    row's maximum.  Raises FitError when some missing unit has zero
    density at every donor value.
    """
    if data.n_respondents < 1:
        raise FitError("at least one respondent donor is required")
    base = _donor_log_base(gamma, data)
    h_missing = phi.h(data.missing_columns())
    w = _weights_from_base(phi, h_missing, data.y_observed, base)
    return FractionalWeights(
        missing_rows=np.nonzero(data.delta == 0)[0],
        donor_y=data.y_observed.copy(),
        w=w,
        donor_rows=np.nonzero(data.delta == 1)[0],
    )


def _parametric_pool(
    gamma: OutcomeSpec, data: Dataset, m_draws: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-missing-unit pools drawn from the respondents' density."""
    miss_cols = data.missing_columns()
    n0 = data.n_missing
    tiled = {k: np.repeat(v, m_draws) for k, v in miss_cols.items()}
    draws = sample(gamma, tiled, rng)
    return draws.reshape(n0, m_draws)


# ---------------------------------------------------------------------------
# mean score and its Jacobian
# ---------------------------------------------------------------------------


@dataclass
class _ScoreArrays:
    """Design pieces shared by the score, Jacobian, and EM loop."""

    z_resp: np.ndarray  # (n1, L+1) respondent design incl. outcome column
    b_miss: np.ndarray  # (n0, L) missing-unit covariate design
    h_index: int  # = L, position of the outcome column


def _score_arrays(phi: ResponseSpec, data: Dataset) -> _ScoreArrays:
    resp_cols = data.respondent_columns()
    z_resp = phi.design(resp_cols, data.y_observed)
    b_miss = phi.h_basis.design(data.missing_columns())
    return _ScoreArrays(z_resp, b_miss, z_resp.shape[1] - 1)


def _propensity_matrix(phi: ResponseSpec, arrays: _ScoreArrays, weights) -> np.ndarray:
    # expit saturates cleanly at extreme arguments, so no clamp is needed
    # on this internal path; one buffer is reused for the whole computation
    alpha = np.asarray(phi.alpha)
    h_miss = arrays.b_miss @ alpha
    y_d = weights.donor_y
    if y_d.ndim == 1:
        lp = np.add.outer(h_miss, phi.beta * y_d)
    else:
        lp = h_miss[:, None] + phi.beta * y_d
    return expit(lp, out=lp)


def mean_score(
    phi: ResponseSpec, weights: FractionalWeights, data: Dataset
) -> np.ndarray:
    """Weighted mean score: respondent scores plus donor-averaged scores."""
    arrays = _score_arrays(phi, data)
    return _mean_score_arrays(phi, weights, arrays, data)


def _mean_score_arrays(phi, weights, arrays, data, pi=None) -> np.ndarray:
    resid_resp = 1.0 - expit(
        np.clip(arrays.z_resp @ phi.phi, -35.0, 35.0)
    )  # delta = 1
    score = arrays.z_resp.T @ resid_resp
    if weights.n_missing:
        if pi is None:
            pi = _propensity_matrix(phi, arrays, weights)
        wp = weights.w * pi  # delta = 0 so the residual is -pi
        row = wp.sum(axis=1)
        score[: arrays.h_index] -= arrays.b_miss.T @ row
        if weights.donor_y.ndim == 1:
            score[arrays.h_index] -= float(np.sum(wp @ weights.donor_y))
        else:
            score[arrays.h_index] -= float(np.sum(wp * weights.donor_y))
    return score


def score_jacobian(
    phi: ResponseSpec, weights: FractionalWeights, data: Dataset
) -> np.ndarray:
    """d mean_score / d phi with the weights held fixed (negative definite)."""
    arrays = _score_arrays(phi, data)
    return _score_jacobian_arrays(phi, weights, arrays)


def _score_jacobian_arrays(phi, weights, arrays, pi=None) -> np.ndarray:
    p_resp = expit(np.clip(arrays.z_resp @ phi.phi, -35.0, 35.0))
    w_resp = p_resp * (1.0 - p_resp)
    jac = -(arrays.z_resp.T @ (arrays.z_resp * w_resp[:, None]))
    if weights.n_missing:
        if pi is None:
            pi = _propensity_matrix(phi, arrays, weights)
        q = weights.w * pi
        q *= 1.0 - pi
        row = q.sum(axis=1)
        if weights.donor_y.ndim == 1:
            qy = q @ weights.donor_y
            qyy = float(np.sum(q @ weights.donor_y**2))
        else:
            qy = (q * weights.donor_y).sum(axis=1)
            qyy = float(np.sum(q * weights.donor_y**2))
        L = arrays.h_index
        jac[:L, :L] -= arrays.b_miss.T @ (arrays.b_miss * row[:, None])
        cross = arrays.b_miss.T @ qy
        jac[:L, L] -= cross
        jac[L, :L] -= cross
        jac[L, L] -= qyy
    return jac


# ---------------------------------------------------------------------------
# Newton M-step
# ---------------------------------------------------------------------------


def solve_mean_score(
    phi: ResponseSpec,
    weights: FractionalWeights,
    data: Dataset,
    controls: FiControls = FiControls(),
) -> ResponseSpec:
    """Newton solve of ``mean_score(phi) = 0`` with the weights fixed.

    Step-halving backs off any step that increases the score norm; a
    small ridge stabilizes a near-singular Jacobian.  Raises FitError
    when halvings are exhausted or the iteration cap is hit.
    """
    arrays = _score_arrays(phi, data)
    result, _, _ = _solve_mean_score_core(phi, weights, arrays, data, controls)
    return result


def _solve_mean_score_core(phi, weights, arrays, data, controls, pi=None):
    """Newton core; returns (phi, score_norm, propensity matrix at phi)."""
    current = phi
    if pi is None and weights.n_missing:
        pi = _propensity_matrix(current, arrays, weights)
    score = _mean_score_arrays(current, weights, arrays, data, pi)
    norm = float(np.max(np.abs(score)))
    for _ in range(controls.max_newton_iter):
        if norm <= controls.tol_score:
            return current, norm, pi
        jac = _score_jacobian_arrays(current, weights, arrays, pi)
        try:
            step = np.linalg.solve(jac, -score)
            # a near-singular solve shows up as a poor residual
            if not np.all(np.isfinite(step)) or float(
                np.max(np.abs(jac @ step + score))
            ) > 1e-8 * (1.0 + norm):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            jac = jac - controls.ridge * np.eye(jac.shape[0])
            step = np.linalg.lstsq(jac, -score, rcond=None)[0]
        accepted = False
        l2 = float(np.linalg.norm(score))
        for _ in range(controls.max_halvings + 1):
            cand = current.with_phi(current.phi + step)
            cand_pi = (
                _propensity_matrix(cand, arrays, weights)
                if weights.n_missing
                else None
            )
            cand_score = _mean_score_arrays(cand, weights, arrays, data, cand_pi)
            if float(np.linalg.norm(cand_score)) < l2 or np.max(np.abs(step)) < 1e-15:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            raise FitError("Newton step-halving exhausted in the M-step")
        current, score, pi = cand, cand_score, cand_pi
        norm = float(np.max(np.abs(score)))
    if norm <= controls.tol_score:
        return current, norm, pi
    raise FitError(
        f"M-step Newton did not converge (score norm {norm:.3g})"
    )


# ---------------------------------------------------------------------------
# EM driver
# ---------------------------------------------------------------------------


def _initial_phi(h_basis, data: Dataset) -> ResponseSpec:
    """Logistic fit of the indicator on the covariate basis, outcome ignored.

    This is the fit one would use under ignorable missingness; it is
    always computable and leaves beta at zero.
    """
    from .respondent import _newton_canonical

    x = h_basis.design(data.columns)
    delta = data.delta.astype(float)
    coef, _, trace = _newton_canonical(x, delta, expit, lambda mu: mu * (1 - mu))
    if trace[-1] > 1e-6:
        raise FitError("initial ignorable logistic fit did not converge")
    return ResponseSpec(h_basis, tuple(coef), 0.0)


def em_fit(
    data: Dataset,
    gamma_fit: RespondentFit,
    h_basis,
    init_phi: Optional[ResponseSpec] = None,
    controls: FiControls = FiControls(),
    verdict: Optional[IdentifyVerdict] = None,
    force: bool = False,
    engine: str = "donor",
    m_draws: int = 500,
    rng: Optional[np.random.Generator] = None,
) -> FitResult:
    """Alternate weight updates and Newton solves until the parameters settle.

    Convergence is declared when the max-abs parameter change falls to
    ``controls.tol_phi``; hitting ``controls.max_em_iter`` first raises
    FitError.  When a verdict is supplied, a provably unidentifiable
    model is refused unless ``force`` is set, and a not-provable one
    warns.
    """
    if verdict is not None:
        if verdict.status is Status.PROVABLY_UNIDENTIFIABLE and not force:
            raise UnidentifiableModelError(
                f"model is provably unidentifiable ({verdict.certificate}); "
                "pass force=True to fit anyway"
            )
        if verdict.status is Status.NOT_PROVABLE:
            warnings.warn(
                f"identifiability not provable: {verdict.certificate}",
                stacklevel=2,
            )

    gamma = gamma_fit.spec
    phi = init_phi if init_phi is not None else _initial_phi(h_basis, data)
    missing_rows = np.nonzero(data.delta == 0)[0]
    donor_rows = np.nonzero(data.delta == 1)[0]

    if engine == "donor":
        donor_y = data.y_observed.copy()
        base = _donor_log_base(gamma, data) if data.n_missing else np.zeros((0, donor_y.size))
    elif engine == "parametric":
        rng = rng or np.random.default_rng(0)
        donor_y = _parametric_pool(gamma, data, m_draws, rng)
        # proposal equals the respondents' density, so only the odds factor
        # survives in the self-normalized weights
        base = np.zeros_like(donor_y)
    else:
        raise ValueError(f"unknown imputation engine {engine!r}")

    miss_cols = data.missing_columns()
    arrays = _score_arrays(phi, data)

    def weights_at(p: ResponseSpec) -> FractionalWeights:
        # same expression as fractional_weights so the two agree bit for
        # bit; the covariate part cancels in the row normalization but is
        # kept for exactness
        w = _weights_from_base(p, p.h(miss_cols), donor_y, base)
        return FractionalWeights(missing_rows, donor_y, w, donor_rows)

    trace: list[tuple[int, float, float]] = []
    converged = False
    score_norm = math.inf
    iteration = 0
    pi = None  # propensities depend only on phi and donors, never the weights
    for iteration in range(1, controls.max_em_iter + 1):
        weights = weights_at(phi)
        new_phi, score_norm, pi = _solve_mean_score_core(
            phi, weights, arrays, data, controls, pi
        )
        delta_phi = float(np.max(np.abs(new_phi.phi - phi.phi)))
        trace.append((iteration, delta_phi, score_norm))
        phi = new_phi
        if delta_phi <= controls.tol_phi:
            converged = True
            break
    if not converged:
        raise FitError(
            f"EM did not converge within {controls.max_em_iter} iterations "
            f"(last parameter change {trace[-1][1]:.3g})",
            trace=tuple(trace),
        )
    weights = weights_at(phi)
    return FitResult(
        phi_hat=phi,
        gamma=gamma_fit,
        weights=weights,
        covariance=None,
        em_iterations=iteration,
        mean_score_norm=score_norm,
        converged=converged,
        trace=tuple(trace),
    )


def estimate_mu_y(fit: FitResult, data: Dataset) -> float:
    """Population outcome mean: observed values plus weighted donor values."""
    total = float(np.sum(data.y_observed))
    if fit.weights.n_missing:
        total += float(np.sum(fit.weights.w * fit.weights.donor_matrix()))
    return total / data.n
