"""Built-in simulation scenarios and the Monte Carlo driver.

The three built-in scenarios share the same shape: a standard-normal
covariate, a logistic response mechanism with a nonzero coefficient on
the outcome, and a respondents' outcome model that is respectively a
quadratic-mean normal (with an adjustable quadratic coefficient that
controls identifiability strength), a steep-slope Bernoulli, and a
two-component normal mixture.

Because the model specifies the outcome law among respondents and the
response mechanism given everything, the joint law is reconstructed
exactly: the marginal response probability at covariates x is
``1 / (1 + exp(-h(x)) * E[exp(-beta*Y) | x, respondent])`` and the
nonrespondents' outcomes follow the tilted density.  Generation draws
from these pieces directly, with no rejection step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, stats
from scipy.special import expit

from .basis import continuous, parse_formula
from .dataio import Dataset
from .expfam import Component, Family, OutcomeSpec, log_odds_normalizer, mean, sample, tilt
from .fiem import FiControls, em_fit, estimate_mu_y
from .respondent import Candidate, FitError, fit_glm, fit_normal_mixture
from .response import ResponseSpec
from .variance import mu_y_variance, variance_estimate, wald_interval

__all__ = [
    "Scenario",
    "McRow",
    "McSummary",
    "McRunError",
    "scenario_s1",
    "scenario_s2",
    "scenario_s3",
    "built_in_scenario",
    "generate",
    "true_mu_y",
    "run_mc",
]

KINDS = {"x": continuous()}
_B1X = parse_formula("1 + x", KINDS)
_B1XX = parse_formula("1 + x + x^2", KINDS)
FAILURE_LIMIT = 0.05


@dataclass(frozen=True)
class Scenario:
    """A complete population law plus the model structure used to fit it."""

    name: str
    n: int
    respondent: OutcomeSpec
    response: ResponseSpec
    fit_plan: Candidate
    knob: Optional[float] = None  # quadratic coefficient for the first scenario

    def validate(self) -> None:
        """Check that the odds normalizer is finite over a wide x grid."""
        grid = {"x": np.linspace(-8.0, 8.0, 81)}
        values = log_odds_normalizer(self.respondent, self.response.beta, grid)
        if not np.all(np.isfinite(values)):
            raise ValueError(f"scenario {self.name}: odds normalizer diverges")

    def response_probability(self, columns) -> np.ndarray:
        lognorm = log_odds_normalizer(self.respondent, self.response.beta, columns)
        return expit(self.response.h(columns) - lognorm)


def scenario_s1(kappa2: float = 1.0, n: int = 500) -> Scenario:
    respondent = OutcomeSpec(
        Family.NORMAL, (Component(_B1XX, (0.0, 0.4, kappa2), 0.5),)
    )
    response = ResponseSpec(_B1X, (0.68, 0.19), 0.24)
    return Scenario(
        name="s1",
        n=n,
        respondent=respondent,
        response=response,
        fit_plan=Candidate(Family.NORMAL, (_B1XX,)),
        knob=kappa2,
    )


def scenario_s2(n: int = 500) -> Scenario:
    respondent = OutcomeSpec(Family.BERNOULLI, (Component(_B1X, (-0.21, 5.9)),))
    response = ResponseSpec(_B1X, (0.7, 0.39), 0.39)
    return Scenario(
        name="s2",
        n=n,
        respondent=respondent,
        response=response,
        fit_plan=Candidate(Family.BERNOULLI, (_B1X,)),
    )


def scenario_s3(n: int = 500) -> Scenario:
    respondent = OutcomeSpec(
        Family.NORMAL,
        (
            Component(_B1X, (1.0, -1.4), 0.5),
            Component(_B1XX, (-1.5, -0.5, 1.0), 0.5),
        ),
        weights=(0.35, 0.65),
    )
    response = ResponseSpec(_B1X, (0.9, -0.26), 0.2)
    return Scenario(
        name="s3",
        n=n,
        respondent=respondent,
        response=response,
        fit_plan=Candidate(Family.NORMAL, (_B1X, _B1XX)),
    )


def built_in_scenario(name: str, n: int = 500, kappa2: float = 1.0) -> Scenario:
    name = name.lower()
    if name == "s1":
        return scenario_s1(kappa2, n)
    if name == "s2":
        return scenario_s2(n)
    if name == "s3":
        return scenario_s3(n)
    raise ValueError(f"unknown scenario {name!r}; choose s1, s2, or s3")


# ---------------------------------------------------------------------------
# generation and the truth
# ---------------------------------------------------------------------------


def generate(
    scenario: Scenario,
    rng: np.random.Generator | int,
    return_full_y: bool = False,
):
    """Draw one dataset from the scenario's joint law.

    Outcomes of nonresponding units are drawn from the tilted density
    and then masked; ``return_full_y`` also returns the unmasked vector
    for test oracles.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    scenario.validate()
    n = scenario.n
    x = rng.normal(size=n)
    columns = {"x": x}
    p1 = scenario.response_probability(columns)
    delta = (rng.random(n) < p1).astype(int)
    y_full = np.empty(n)
    resp_mask = delta == 1
    if resp_mask.any():
        y_full[resp_mask] = sample(
            scenario.respondent, {"x": x[resp_mask]}, rng
        )
    if (~resp_mask).any():
        tilted = tilt(scenario.respondent, scenario.response.beta)
        y_full[~resp_mask] = sample(tilted, {"x": x[~resp_mask]}, rng)
    y = y_full.copy()
    y[~resp_mask] = np.nan
    data = Dataset(columns={"x": x}, y=y, delta=delta, kinds=dict(KINDS))
    if return_full_y:
        return data, y_full
    return data


def true_mu_y(scenario: Scenario) -> float:
    """Population mean of the outcome by adaptive quadrature over x."""
    scenario.validate()
    tilted = tilt(scenario.respondent, scenario.response.beta)

    def integrand(x: float) -> float:
        columns = {"x": np.array([x])}
        p1 = float(scenario.response_probability(columns)[0])
        m1 = float(mean(scenario.respondent, columns)[0])
        m0 = float(mean(tilted, columns)[0])
        return stats.norm.pdf(x) * (p1 * m1 + (1.0 - p1) * m0)

    value, err = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-9, limit=400)
    if err > 1e-7:
        raise RuntimeError(f"quadrature for the outcome mean did not converge ({err:.2g})")
    return float(value)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def cc_mu_y(data: Dataset) -> tuple[float, float, float]:
    """Complete-case mean with its t-interval."""
    y = data.y_observed
    n1 = y.size
    est = float(np.mean(y))
    se = float(np.std(y, ddof=1)) / math.sqrt(n1)
    t = float(stats.t.ppf(0.975, n1 - 1))
    return est, est - t * se, est + t * se


def _fit_respondent(scenario: Scenario, data: Dataset, rng, restarts: int):
    plan = scenario.fit_plan
    y = data.y_observed
    columns = data.respondent_columns()
    if plan.family is Family.NORMAL and plan.k > 1:
        return fit_normal_mixture(y, columns, plan.bases, restarts=restarts, rng=rng)
    return fit_glm(y, columns, plan.family, plan.bases[0])


@dataclass
class _Replicate:
    index: int
    response_rate: float
    cc_mu: tuple[float, float, float]
    fi_mu: Optional[tuple[float, float, float]] = None
    fi_beta: Optional[tuple[float, float, float]] = None
    em_iterations: int = 0
    error: Optional[str] = None


def _run_replicate(
    scenario: Scenario,
    index: int,
    seed: np.random.SeedSequence,
    controls: FiControls,
    restarts: int,
    estimators: Sequence[str],
) -> _Replicate:
    rng = np.random.default_rng(seed)
    data = generate(scenario, rng)
    rec = _Replicate(
        index=index,
        response_rate=float(np.mean(data.delta)),
        cc_mu=cc_mu_y(data),
    )
    if "FI" not in estimators:
        return rec
    try:
        gamma_fit = _fit_respondent(scenario, data, rng, restarts)
        fit = em_fit(data, gamma_fit, scenario.response.h_basis, controls=controls)
        sigma, parts = variance_estimate(fit, gamma_fit, data)
        fit.covariance = sigma
        mu_hat = estimate_mu_y(fit, data)
        mu_var = mu_y_variance(fit, gamma_fit, data, parts)
        lo, hi = wald_interval(mu_hat, mu_var)
        rec.fi_mu = (mu_hat, lo, hi)
        beta_hat = fit.phi_hat.beta
        blo, bhi = wald_interval(beta_hat, float(sigma[-1, -1]))
        rec.fi_beta = (beta_hat, blo, bhi)
        rec.em_iterations = fit.em_iterations
    except (FitError, np.linalg.LinAlgError) as err:
        rec.error = f"{type(err).__name__}: {err}"
    return rec


# ---------------------------------------------------------------------------
# Monte Carlo aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McRow:
    scenario: str
    knob: Optional[float]
    parameter: str
    method: str
    bias: float
    rmse: float
    coverage: float
    n_replicates: int
    failures: int
    mean_response_rate: float
    truth: float


@dataclass
class McSummary:
    rows: list[McRow]
    replicates: list[_Replicate] = field(default_factory=list)

    def row(self, parameter: str, method: str) -> McRow:
        for r in self.rows:
            if r.parameter == parameter and r.method == method:
                return r
        raise KeyError((parameter, method))


class McRunError(RuntimeError):
    def __init__(self, message: str, summary: Optional[McSummary] = None):
        super().__init__(message)
        self.summary = summary


def _aggregate(values, truth: float) -> tuple[float, float, float]:
    est = np.asarray([v[0] for v in values])
    lo = np.asarray([v[1] for v in values])
    hi = np.asarray([v[2] for v in values])
    bias = float(np.mean(est) - truth)
    rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
    coverage = float(np.mean((lo <= truth) & (truth <= hi)))
    return bias, rmse, coverage


def _replicate_job(args) -> _Replicate:
    return _run_replicate(*args)


def run_mc(
    scenario: Scenario,
    b: int,
    seed: int,
    estimators: Sequence[str] = ("CC", "FI"),
    controls: FiControls = FiControls(max_em_iter=2000),
    restarts: int = 10,
    mu_truth: Optional[float] = None,
    workers: int = 1,
) -> McSummary:
    """Run B independent replicates and aggregate bias, RMSE, coverage.

    Replicate-level estimation failures are recorded and excluded from
    the aggregates; a failure rate above 5 percent fails the whole run.
    Identical (scenario, seed, b) inputs give identical output for any
    worker count: every replicate owns a seed derived from (seed,
    replicate index) and aggregation is an ordered reduction.  The
    default controls allow more EM iterations than the fitting default
    because weakly identifiable settings converge very slowly.
    """
    if b < 1:
        raise ValueError("at least one replicate required")
    truth_mu = true_mu_y(scenario) if mu_truth is None else mu_truth
    truth_beta = scenario.response.beta
    seeds = np.random.SeedSequence(seed).spawn(b)
    jobs = [
        (scenario, i, s, controls, restarts, estimators)
        for i, s in enumerate(seeds)
    ]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            replicates = list(pool.map(_replicate_job, jobs, chunksize=8))
    else:
        replicates = [_replicate_job(job) for job in jobs]
    failures = sum(1 for r in replicates if r.error is not None)
    ok = [r for r in replicates if r.error is None]
    rows: list[McRow] = []
    rate = float(np.mean([r.response_rate for r in replicates]))

    def add(parameter, method, values, truth):
        bias, rmse, coverage = _aggregate(values, truth)
        rows.append(
            McRow(
                scenario.name,
                scenario.knob,
                parameter,
                method,
                bias,
                rmse,
                coverage,
                len(values),
                failures,
                rate,
                truth,
            )
        )

    if "CC" in estimators:
        add("mu_y", "CC", [r.cc_mu for r in replicates], truth_mu)
    if "FI" in estimators and ok:
        add("mu_y", "FI", [r.fi_mu for r in ok], truth_mu)
        add("beta", "FI", [r.fi_beta for r in ok], truth_beta)
    summary = McSummary(rows=rows, replicates=replicates)
    if failures > FAILURE_LIMIT * b:
        raise McRunError(
            f"{failures} of {b} replicates failed (limit {FAILURE_LIMIT:.0%})",
            summary,
        )
    return summary
