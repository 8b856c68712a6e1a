"""Maximum-likelihood fitting of the respondents' outcome model.

Everything here sees complete cases only: outcome values paired with
covariate columns.  Single-component families are fitted by Newton
iterations on the log-likelihood (closed form for the normal family),
normal mixtures by EM over per-component weighted least squares with
random restarts, and model selection picks the smallest AIC among
explicit candidates or over subsets of a term pool.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import digamma, expit, logsumexp

from .basis import BasisSet, BasisTerm
from .expfam import Component, Family, OutcomeSpec, log_density, n_free_params

__all__ = [
    "FitError",
    "RespondentFit",
    "Candidate",
    "fit_glm",
    "fit_normal_mixture",
    "select_aic",
    "search_basis_by_aic",
]

GRAD_TOL = 1e-8
SIGMA_FLOOR_FACTOR = 1e-6  # times the sample SD of y; EM collapse guard
EXHAUSTIVE_LIMIT = 64


class FitError(RuntimeError):
    """Fitting failed (rank deficiency, divergence, degenerate mixture)."""

    def __init__(self, message: str, trace: tuple = ()):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class RespondentFit:
    """A fitted respondents' model with its fit diagnostics."""

    spec: OutcomeSpec
    loglik: float
    aic: float
    n_params: int
    iterations: int
    converged: bool
    trace: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        expected = -2.0 * self.loglik + 2.0 * self.n_params
        if math.isfinite(expected) and abs(self.aic - expected) > 1e-8:
            raise ValueError("aic inconsistent with loglik and parameter count")


@dataclass(frozen=True)
class Candidate:
    """One model candidate: family plus per-component mean bases."""

    family: Family
    bases: tuple[BasisSet, ...]

    @property
    def k(self) -> int:
        return len(self.bases)


def _check_rank(x: np.ndarray) -> None:
    if x.shape[0] < x.shape[1]:
        raise FitError(
            f"{x.shape[0]} complete cases cannot identify {x.shape[1]} coefficients"
        )
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise FitError("design matrix is rank deficient on the complete cases")


def _finish(spec: OutcomeSpec, y, columns, iterations, converged, trace=()):
    ll = float(np.sum(log_density(spec, y, columns)))
    p = n_free_params(spec)
    return RespondentFit(spec, ll, -2.0 * ll + 2.0 * p, p, iterations, converged, trace)


# ---------------------------------------------------------------------------
# single-component GLM fits
# ---------------------------------------------------------------------------


def fit_glm(
    y: np.ndarray,
    columns: Mapping[str, np.ndarray],
    family: Family,
    mean_basis: BasisSet,
    max_iter: int = 100,
    tol: float = GRAD_TOL,
) -> RespondentFit:
    """Fit a one-component exponential-family model on complete cases.

    Raises FitError on a rank-deficient design or if Newton fails to
    push the max-abs log-likelihood gradient below `tol` within
    `max_iter` iterations (the gradient trace rides on the exception).
    """
    y = np.asarray(y, dtype=float)
    x = mean_basis.design(columns)
    _check_rank(x)

    if family is Family.NORMAL:
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
        resid = y - x @ coef
        sigma2 = float(np.mean(resid**2))
        if sigma2 < 1e-24 * (1.0 + float(np.mean(y**2))):
            sigma2 = 0.0  # exact interpolation up to rounding
        spec = OutcomeSpec(family, (Component(mean_basis, tuple(coef), sigma2),))
        if sigma2 == 0.0:
            # exact interpolation; the density is degenerate, report directly
            p = len(coef) + 1
            return RespondentFit(spec, math.inf, -math.inf, p, 1, True)
        return _finish(spec, y, columns, 1, True)

    if family is Family.BERNOULLI:
        coef, iters, trace = _newton_canonical(
            x, y, expit, lambda mu: mu * (1.0 - mu), max_iter, tol
        )
    elif family is Family.POISSON:
        exp_mean = lambda eta: np.exp(np.clip(eta, -700, 30))
        coef, iters, trace = _newton_canonical(
            x, y, exp_mean, lambda mu: mu, max_iter, tol
        )
    elif family is Family.GAMMA:
        return _fit_gamma(y, columns, mean_basis, x, max_iter, tol)
    else:  # pragma: no cover - exhaustive over Family
        raise ValueError(f"unsupported family {family}")

    if trace[-1] > tol:
        raise FitError(
            f"Newton did not converge in {max_iter} iterations "
            f"(last gradient norm {trace[-1]:.3g})",
            trace=tuple(trace),
        )
    spec = OutcomeSpec(family, (Component(mean_basis, tuple(coef), None),))
    return _finish(spec, y, columns, iters, True, tuple(trace))


def _newton_canonical(x, y, mean_fn, var_fn, max_iter: int = 100, tol: float = GRAD_TOL):
    """Newton iterations for a canonical-link GLM: grad = X'(y - mu)."""
    coef = np.zeros(x.shape[1])
    trace: list[float] = []
    for it in range(1, max_iter + 1):
        eta = np.clip(x @ coef, -35.0, 35.0)
        mu = mean_fn(eta)
        grad = x.T @ (y - mu)
        gnorm = float(np.max(np.abs(grad)))
        trace.append(gnorm)
        if gnorm <= tol:
            return coef, it, trace
        w = np.maximum(var_fn(mu), 1e-12)
        hess = x.T @ (x * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        # halve until the gradient norm stops increasing
        for _ in range(40):
            new = coef + step
            new_eta = np.clip(x @ new, -35.0, 35.0)
            new_grad = x.T @ (y - mean_fn(new_eta))
            if np.max(np.abs(new_grad)) <= gnorm or np.max(np.abs(step)) < 1e-14:
                break
            step *= 0.5
        coef = coef + step
    eta = np.clip(x @ coef, -35.0, 35.0)
    trace.append(float(np.max(np.abs(x.T @ (y - mean_fn(eta))))))
    return coef, max_iter, trace


def _fit_gamma(y, columns, mean_basis, x, max_iter, tol):
    """Gamma with log-mean link; the coefficient root is shape-free."""
    if np.any(y <= 0):
        raise FitError("gamma outcomes must be positive")
    coef = np.zeros(x.shape[1])
    if BasisTerm(()) in mean_basis.terms:
        pos = list(mean_basis.terms).index(BasisTerm(()))
        coef[pos] = math.log(float(np.mean(y)))
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = x @ coef
        r = y * np.exp(-eta)  # y / mu
        grad = x.T @ (r - 1.0)
        gnorm = float(np.max(np.abs(grad)))
        trace.append(gnorm)
        if gnorm <= tol:
            converged = True
            break
        hess = x.T @ (x * r[:, None])
        step = np.linalg.solve(hess, grad)
        for _ in range(40):
            new_eta = x @ (coef + step)
            new_gnorm = np.max(np.abs(x.T @ (y * np.exp(-new_eta) - 1.0)))
            if new_gnorm <= gnorm or np.max(np.abs(step)) < 1e-14:
                break
            step *= 0.5
        coef = coef + step
    if not converged:
        raise FitError("gamma Newton did not converge", trace=tuple(trace))
    eta = x @ coef
    # profile score in the shape: log s + 1 - digamma(s) + mean(log y - eta - y/mu)
    stat = float(np.mean(np.log(y) - eta - y * np.exp(-eta)))

    def dll(s):
        return math.log(s) + 1.0 - digamma(s) + stat

    lo, hi = 1e-8, 1e8
    if dll(hi) > 0:
        raise FitError("gamma shape likelihood has no interior maximum")
    shape = float(brentq(dll, lo, hi, xtol=1e-12, rtol=8.9e-16))
    spec = OutcomeSpec(Family.GAMMA, (Component(mean_basis, tuple(coef), shape),))
    return _finish(spec, y, columns, it, True, tuple(trace))


# ---------------------------------------------------------------------------
# normal mixture EM
# ---------------------------------------------------------------------------


def fit_normal_mixture(
    y: np.ndarray,
    columns: Mapping[str, np.ndarray],
    bases: Sequence[BasisSet],
    restarts: int = 10,
    max_iter: int = 500,
    tol: float = 1e-10,
    rng: Optional[np.random.Generator] = None,
) -> RespondentFit:
    """EM fit of a K-component normal mixture with restarts.

    Returns the best local maximum over one deterministic start
    (quantile-sliced residuals of a pooled least-squares fit) plus
    `restarts - 1` random starts.  A component whose standard deviation
    collapses below 1e-6 times the sample SD of y aborts that start;
    if every start collapses a FitError is raised.
    """
    y = np.asarray(y, dtype=float)
    k = len(bases)
    if k == 1:
        return fit_glm(y, columns, Family.NORMAL, bases[0])
    rng = rng or np.random.default_rng(0)
    designs = [b.design(columns) for b in bases]
    for d in designs:
        _check_rank(d)
    sd_floor = SIGMA_FLOOR_FACTOR * float(np.std(y))
    if sd_floor == 0.0:
        raise FitError("outcome is constant; mixture fitting is degenerate")

    best: Optional[tuple] = None
    failures: list[str] = []
    for start in range(max(1, restarts)):
        resp = _initial_responsibilities(y, columns, bases, k, start, rng)
        try:
            result = _em_run(y, designs, resp, sd_floor, max_iter, tol)
        except FitError as err:
            failures.append(str(err))
            continue
        if best is None or result[0] > best[0]:
            best = result
    if best is None:
        raise FitError(
            "all mixture starts degenerated: " + "; ".join(failures[:3])
        )
    ll, coefs, sigma2s, weights, iters, converged, trace = best
    comps = tuple(
        Component(b, tuple(c), float(s2))
        for b, c, s2 in zip(bases, coefs, sigma2s)
    )
    spec = OutcomeSpec(Family.NORMAL, comps, weights=tuple(weights))
    p = n_free_params(spec)
    return RespondentFit(spec, ll, -2.0 * ll + 2.0 * p, p, iters, converged, trace)


def _initial_responsibilities(y, columns, bases, k, start, rng):
    n = y.size
    if start == 0:
        pool_terms = tuple(dict.fromkeys(itertools.chain(*(b.terms for b in bases))))
        pool = BasisSet(pool_terms, bases[0].kinds)
        xp = pool.design(columns)
        resid = y - xp @ np.linalg.lstsq(xp, y, rcond=None)[0]
        order = np.argsort(resid, kind="stable")
        resp = np.zeros((n, k))
        for j, block in enumerate(np.array_split(order, k)):
            resp[block, j] = 1.0
        return resp
    resp = rng.random((n, k)) + 0.1
    return resp / resp.sum(axis=1, keepdims=True)


def _em_run(y, designs, resp, sd_floor, max_iter, tol):
    n, k = resp.shape
    trace: list[float] = []
    ll_prev = -np.inf
    converged = False
    coefs = [np.zeros(d.shape[1]) for d in designs]
    sigma2s = np.ones(k)
    weights = np.full(k, 1.0 / k)
    for it in range(1, max_iter + 1):
        # M-step: weighted least squares per component
        for j, d in enumerate(designs):
            w = resp[:, j]
            total = w.sum()
            if total < d.shape[1]:
                raise FitError("a mixture component lost nearly all its mass")
            wd = d * w[:, None]
            try:
                coefs[j] = np.linalg.solve(wd.T @ d, wd.T @ y)
            except np.linalg.LinAlgError:
                raise FitError("singular weighted design in the M-step") from None
            r = y - d @ coefs[j]
            sigma2s[j] = float(np.sum(w * r**2) / total)
            if sigma2s[j] < sd_floor**2:
                raise FitError("component variance collapsed")
            weights[j] = total / n
        # E-step: responsibilities and the observed-data log-likelihood
        logp = np.empty((n, k))
        for j, d in enumerate(designs):
            r = y - d @ coefs[j]
            logp[:, j] = (
                math.log(weights[j])
                - 0.5 * (math.log(2.0 * math.pi * sigma2s[j]) + r**2 / sigma2s[j])
            )
        norm = logsumexp(logp, axis=1)
        ll = float(np.sum(norm))
        trace.append(ll)
        resp = np.exp(logp - norm[:, None])
        if ll - ll_prev <= tol * (1.0 + abs(ll)) and it > 1:
            converged = True
            break
        ll_prev = ll
    return ll, coefs, sigma2s, weights, it, converged, tuple(trace)


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------


def _fit_candidate(y, columns, cand: Candidate, rng, restarts):
    if cand.family is Family.NORMAL and cand.k > 1:
        return fit_normal_mixture(y, columns, cand.bases, restarts=restarts, rng=rng)
    if cand.k != 1:
        raise FitError("mixtures are supported for the normal family only")
    return fit_glm(y, columns, cand.family, cand.bases[0])


def select_aic(
    y: np.ndarray,
    columns: Mapping[str, np.ndarray],
    candidates: Sequence[Candidate],
    rng: Optional[np.random.Generator] = None,
    restarts: int = 10,
) -> tuple[Candidate, RespondentFit]:
    """Fit every candidate and return the smallest-AIC fit.

    Ties break toward fewer parameters, then earlier candidates.
    Candidates that fail to fit are skipped; if all fail, the first
    error propagates.
    """
    if not candidates:
        raise ValueError("at least one candidate required")
    rng = rng or np.random.default_rng(0)
    best: Optional[tuple] = None
    first_error: Optional[FitError] = None
    for idx, cand in enumerate(candidates):
        try:
            fit = _fit_candidate(y, columns, cand, rng, restarts)
        except FitError as err:
            first_error = first_error or err
            continue
        key = (fit.aic, fit.n_params, idx)
        if best is None or key < best[0]:
            best = (key, cand, fit)
    if best is None:
        raise FitError(f"every candidate failed; first error: {first_error}")
    return best[1], best[2]


def search_basis_by_aic(
    y: np.ndarray,
    columns: Mapping[str, np.ndarray],
    family: Family,
    pool: BasisSet,
    exhaustive_limit: int = EXHAUSTIVE_LIMIT,
) -> tuple[BasisSet, RespondentFit]:
    """AIC search over sub-bases of a term pool.

    Exhaustive over all nonempty subsets when their number is within
    `exhaustive_limit`; greedy forward/backward stepwise otherwise.
    """
    terms = pool.terms
    kinds = pool.kinds

    def fit_subset(subset: tuple[BasisTerm, ...]) -> Optional[RespondentFit]:
        try:
            return fit_glm(y, columns, family, BasisSet(subset, kinds))
        except FitError:
            return None

    if 2 ** len(terms) - 1 <= exhaustive_limit:
        best = None
        for r in range(1, len(terms) + 1):
            for subset in itertools.combinations(terms, r):
                fit = fit_subset(subset)
                if fit is None:
                    continue
                key = (fit.aic, fit.n_params)
                if best is None or key < best[0]:
                    best = (key, subset, fit)
        if best is None:
            raise FitError("no subset of the term pool could be fitted")
        return BasisSet(best[1], kinds), best[2]

    # greedy forward passes with backward deletion sweeps
    current: list[BasisTerm] = []
    current_fit: Optional[RespondentFit] = None
    improved = True
    while improved:
        improved = False
        for t in terms:
            if t in current:
                continue
            fit = fit_subset(tuple(current + [t]))
            if fit and (current_fit is None or fit.aic < current_fit.aic - 1e-12):
                current.append(t)
                current_fit = fit
                improved = True
        for t in list(current):
            if len(current) == 1:
                break
            reduced = tuple(u for u in current if u != t)
            fit = fit_subset(reduced)
            if fit and current_fit and fit.aic < current_fit.aic - 1e-12:
                current.remove(t)
                current_fit = fit
                improved = True
    if current_fit is None:
        raise FitError("stepwise search found no fittable model")
    return BasisSet(tuple(current), kinds), current_fit
