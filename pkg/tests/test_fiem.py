import math

import numpy as np
import pytest
from scipy import optimize

from fimnar.basis import continuous, parse_formula
from fimnar.dataio import Dataset
from fimnar.expfam import Component, Family, OutcomeSpec
from fimnar.fiem import (
    FiControls,
    UnidentifiableModelError,
    em_fit,
    estimate_mu_y,
    fractional_weights,
    mean_score,
    score_jacobian,
    solve_mean_score,
)
from fimnar.identify import IdentifyVerdict, Rule, Status
from fimnar.respondent import FitError, fit_glm
from fimnar.response import ResponseSpec
from fimnar.sim import generate, scenario_s1

KINDS = {"x": continuous()}
B1X = parse_formula("1 + x", KINDS)
B1XX = parse_formula("1 + x + x^2", KINDS)


def make_dataset(x, y_obs, n_missing, x_missing=None):
    """Respondents with observed y followed by missing rows."""
    x_obs = np.asarray(x, dtype=float)
    x_mis = np.asarray(
        x_missing if x_missing is not None else np.zeros(n_missing), dtype=float
    )
    x_all = np.concatenate([x_obs, x_mis])
    y = np.concatenate([np.asarray(y_obs, dtype=float), np.full(n_missing, np.nan)])
    delta = np.concatenate(
        [np.ones(x_obs.size, dtype=int), np.zeros(n_missing, dtype=int)]
    )
    return Dataset(columns={"x": x_all}, y=y, delta=delta, kinds=dict(KINDS))


def normal_gamma(coef=(0.0, 0.4), var=0.5, basis=B1X):
    return OutcomeSpec(Family.NORMAL, (Component(basis, coef, var),))


def phi_spec(alpha=(0.68, 0.19), beta=0.24):
    return ResponseSpec(B1X, alpha, beta)


# ---------------------------------------------------------------------------
# fractional weights
# ---------------------------------------------------------------------------


def test_weights_rows_sum_to_one():
    rng = np.random.default_rng(0)
    data = make_dataset(
        rng.normal(size=80), rng.normal(size=80), 25, rng.normal(size=25)
    )
    w = fractional_weights(phi_spec(), normal_gamma(), data)
    assert w.w.shape == (25, 80)
    assert np.max(np.abs(w.w.sum(axis=1) - 1.0)) < 1e-12
    assert np.all(w.w >= 0)


def test_single_donor_gets_weight_one():
    data = make_dataset([0.3], [1.2], 4, [0.0, 1.0, -2.0, 0.5])
    for beta in (-1.0, 0.0, 2.5):
        w = fractional_weights(phi_spec(beta=beta), normal_gamma(), data)
        assert np.allclose(w.w, 1.0)


def test_weights_at_zero_beta_drop_the_odds_factor():
    rng = np.random.default_rng(1)
    x_obs = rng.normal(size=40)
    y_obs = rng.normal(size=40)
    x_mis = rng.normal(size=10)
    data = make_dataset(x_obs, y_obs, 10, x_mis)
    gamma = normal_gamma((0.2, 0.7), 0.8)
    w = fractional_weights(phi_spec(beta=0.0), gamma, data)
    # direct formula: w_ij proportional to f(y_j|x_i) / sum_l f(y_j|x_l)
    sigma = math.sqrt(0.8)

    def f(y, x):
        return math.exp(-((y - 0.2 - 0.7 * x) ** 2) / (2 * 0.8)) / (
            sigma * math.sqrt(2 * math.pi)
        )

    for i in range(10):
        raw = np.array(
            [f(y_obs[j], x_mis[i]) / sum(f(y_obs[j], xl) for xl in x_obs) for j in range(40)]
        )
        assert np.allclose(w.w[i], raw / raw.sum(), atol=1e-12)


def test_two_donor_weights_match_manual_computation():
    # two respondents, one missing unit; everything hand-computable
    x_obs = np.array([0.0, 1.0])
    y_obs = np.array([0.5, -0.5])
    data = make_dataset(x_obs, y_obs, 1, [0.25])
    gamma = normal_gamma((0.0, 1.0), 1.0)
    phi = phi_spec(alpha=(0.2, -0.3), beta=0.7)

    def normal_pdf(y, mu):
        return math.exp(-((y - mu) ** 2) / 2.0) / math.sqrt(2 * math.pi)

    x_i = 0.25
    raw = []
    for j in range(2):
        odds = math.exp(-(0.2 - 0.3 * x_i + 0.7 * y_obs[j]))
        f_ij = normal_pdf(y_obs[j], x_i)
        c_j = normal_pdf(y_obs[j], 0.0) + normal_pdf(y_obs[j], 1.0)
        raw.append(odds * f_ij / c_j)
    manual = np.array(raw) / sum(raw)
    got = fractional_weights(phi, gamma, data).w[0]
    assert np.allclose(got, manual, atol=1e-12)


def test_weight_recomputation_is_idempotent():
    rng = np.random.default_rng(2)
    data = make_dataset(
        rng.normal(size=60), rng.normal(size=60), 20, rng.normal(size=20)
    )
    w1 = fractional_weights(phi_spec(), normal_gamma(), data)
    w2 = fractional_weights(phi_spec(), normal_gamma(), data)
    assert np.max(np.abs(w1.w - w2.w)) <= 1e-15


def test_all_zero_density_row_raises():
    # respondents' model centered absurdly far away underflows to -inf;
    # the overflow on the way there is the mechanism under test
    data = make_dataset([0.0, 0.1], [0.5, 0.7], 1, [0.0])
    bad_gamma = normal_gamma((1e200, 0.0), 1.0)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        with pytest.raises(FitError, match="zero density"):
            fractional_weights(phi_spec(), bad_gamma, data)


# ---------------------------------------------------------------------------
# mean score
# ---------------------------------------------------------------------------


def test_mean_score_without_missing_is_plain_logistic_score():
    rng = np.random.default_rng(3)
    x = rng.normal(size=50)
    y = rng.normal(size=50)
    data = make_dataset(x, y, 0)
    phi = phi_spec(alpha=(0.1, -0.4), beta=0.6)
    w = fractional_weights(phi, normal_gamma(), data)
    got = mean_score(phi, w, data)
    # independent computation: all indicators are one
    lp = 0.1 - 0.4 * x + 0.6 * y
    resid = 1.0 - 1.0 / (1.0 + np.exp(-lp))
    design = np.column_stack([np.ones(50), x, y])
    assert np.allclose(got, design.T @ resid, atol=1e-12)


def test_mean_score_single_donor_substitution():
    # one respondent donor: the missing part equals plain scores at y0
    x_obs = np.array([0.4])
    y0 = 1.7
    x_mis = np.array([-0.3, 0.8, 0.0])
    data = make_dataset(x_obs, [y0], 3, x_mis)
    phi = phi_spec(alpha=(0.3, 0.5), beta=-0.2)
    w = fractional_weights(phi, normal_gamma(), data)
    got = mean_score(phi, w, data)
    resp_lp = 0.3 + 0.5 * 0.4 - 0.2 * y0
    resp_part = (1.0 - 1.0 / (1.0 + math.exp(-resp_lp))) * np.array([1.0, 0.4, y0])
    mis_lp = 0.3 + 0.5 * x_mis - 0.2 * y0
    mis_pi = 1.0 / (1.0 + np.exp(-mis_lp))
    mis_design = np.column_stack([np.ones(3), x_mis, np.full(3, y0)])
    expected = resp_part + mis_design.T @ (0.0 - mis_pi)
    assert np.allclose(got, expected, atol=1e-12)


def test_mean_score_near_zero_at_truth_monte_carlo():
    # large generated dataset, scored at the true parameters with weights
    # from the true models; n is capped by the quadratic donor-pool memory
    scn = scenario_s1(1.0, n=5000)
    data = generate(scn, 12345)
    w = fractional_weights(scn.response, scn.respondent, data)
    score = mean_score(scn.response, w, data)
    # per-unit contributions for a standard-error scale
    resp_cols = data.respondent_columns()
    z = scn.response.design(resp_cols, data.y_observed)
    p = scn.response.propensity(resp_cols, data.y_observed)
    contrib_resp = z * (1 - p)[:, None]
    mis_cols = data.missing_columns()
    b = scn.response.h_basis.design(mis_cols)
    h = b @ np.asarray(scn.response.alpha)
    pi = 1 / (1 + np.exp(-(h[:, None] + scn.response.beta * w.donor_y[None, :])))
    wp = w.w * pi
    contrib_mis = np.column_stack(
        [-wp.sum(axis=1)[:, None] * b, -(wp @ w.donor_y)]
    )
    contrib = np.vstack([contrib_resp, contrib_mis])
    se = np.sqrt(contrib.shape[0]) * contrib.std(axis=0, ddof=1)
    assert np.all(np.abs(score) < 4.0 * se)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    data = make_dataset(
        rng.normal(size=40), rng.normal(size=40), 15, rng.normal(size=15)
    )
    gamma = normal_gamma()
    phi = phi_spec(alpha=(0.2, -0.1), beta=0.3)
    w = fractional_weights(phi, gamma, data)
    jac = score_jacobian(phi, w, data)
    vec = phi.phi
    fd = np.zeros_like(jac)
    for j in range(vec.size):
        step = 1e-6 * (1.0 + abs(vec[j]))
        up = phi.with_phi(vec + step * np.eye(vec.size)[j])
        dn = phi.with_phi(vec - step * np.eye(vec.size)[j])
        fd[:, j] = (mean_score(up, w, data) - mean_score(dn, w, data)) / (2 * step)
    assert np.linalg.norm(fd - jac) / np.linalg.norm(jac) < 1e-4


# ---------------------------------------------------------------------------
# M-step solver
# ---------------------------------------------------------------------------


def test_m_step_drives_score_to_zero():
    rng = np.random.default_rng(5)
    scn = scenario_s1(1.0, n=400)
    data = generate(scn, rng)
    gamma = OutcomeSpec(Family.NORMAL, (Component(B1XX, (0.0, 0.4, 1.0), 0.5),))
    phi0 = phi_spec(alpha=(0.0, 0.0), beta=0.0)
    w = fractional_weights(phi0, gamma, data)
    solution = solve_mean_score(phi0, w, data)
    assert np.max(np.abs(mean_score(solution, w, data))) <= 1e-8


def test_m_step_agrees_with_independent_root_finder():
    rng = np.random.default_rng(6)
    scn = scenario_s1(1.0, n=300)
    data = generate(scn, rng)
    gamma = OutcomeSpec(Family.NORMAL, (Component(B1XX, (0.0, 0.4, 1.0), 0.5),))
    phi0 = phi_spec(alpha=(0.0, 0.0), beta=0.0)
    w = fractional_weights(phi0, gamma, data)
    ours = solve_mean_score(phi0, w, data)
    sp = optimize.root(
        lambda v: mean_score(phi0.with_phi(v), w, data), phi0.phi, tol=1e-12
    )
    assert sp.success
    assert np.allclose(ours.phi, sp.x, atol=1e-7)


# ---------------------------------------------------------------------------
# EM driver
# ---------------------------------------------------------------------------


def test_em_recovers_truth_on_large_sample():
    scn = scenario_s1(1.0, n=4000)
    data = generate(scn, 2024)
    gf = fit_glm(data.y_observed, data.respondent_columns(), Family.NORMAL, B1XX)
    fit = em_fit(data, gf, scn.response.h_basis)
    assert fit.converged
    assert np.all(np.abs(fit.phi - np.array([0.68, 0.19, 0.24])) < 0.2)
    assert fit.mean_score_norm <= 1e-8


def test_em_final_weights_are_e_step_fixed_point():
    scn = scenario_s1(1.0, n=600)
    data = generate(scn, 77)
    gf = fit_glm(data.y_observed, data.respondent_columns(), Family.NORMAL, B1XX)
    fit = em_fit(data, gf, scn.response.h_basis)
    again = fractional_weights(fit.phi_hat, gf.spec, data)
    assert np.max(np.abs(again.w - fit.weights.w)) <= 1e-15


def test_em_iteration_cap_raises():
    scn = scenario_s1(1.0, n=400)
    data = generate(scn, 99)
    gf = fit_glm(data.y_observed, data.respondent_columns(), Family.NORMAL, B1XX)
    with pytest.raises(FitError, match="EM did not converge"):
        em_fit(data, gf, scn.response.h_basis, controls=FiControls(max_em_iter=2))


def test_em_mar_null_beta_within_four_se_of_zero():
    # data generated with beta = 0: the estimator averaged over replicates
    # must not manufacture nonresponse bias
    base = scenario_s1(1.0, n=800)
    from dataclasses import replace as dc_replace

    scn = dc_replace(base, response=ResponseSpec(B1X, (0.68, 0.19), 0.0))
    betas = []
    for r in range(30):
        data = generate(scn, 5000 + r)
        gf = fit_glm(data.y_observed, data.respondent_columns(), Family.NORMAL, B1XX)
        fit = em_fit(data, gf, scn.response.h_basis, controls=FiControls(max_em_iter=2000))
        betas.append(fit.phi_hat.beta)
    betas = np.asarray(betas)
    se = betas.std(ddof=1) / math.sqrt(betas.size)
    assert abs(betas.mean()) < 4.0 * se


def test_em_refuses_provably_unidentifiable_unless_forced():
    scn = scenario_s1(1.0, n=300)
    data = generate(scn, 11)
    gf = fit_glm(data.y_observed, data.respondent_columns(), Family.NORMAL, B1XX)
    verdict = IdentifyVerdict(
        Status.PROVABLY_UNIDENTIFIABLE, Rule.EXAMPLE5, "mirror pattern"
    )
    with pytest.raises(UnidentifiableModelError):
        em_fit(data, gf, scn.response.h_basis, verdict=verdict)
    fit = em_fit(data, gf, scn.response.h_basis, verdict=verdict, force=True)
    assert fit.converged


def test_em_warns_on_not_provable():
    scn = scenario_s1(1.0, n=300)
    data = generate(scn, 12)
    gf = fit_glm(data.y_observed, data.respondent_columns(), Family.NORMAL, B1XX)
    verdict = IdentifyVerdict(Status.NOT_PROVABLE, Rule.NONE, "no rule applies")
    with pytest.warns(UserWarning, match="not provable"):
        em_fit(data, gf, scn.response.h_basis, verdict=verdict)


def test_parametric_engine_cross_checks_donor_engine():
    scn = scenario_s1(1.0, n=2000)
    data = generate(scn, 31)
    gf = fit_glm(data.y_observed, data.respondent_columns(), Family.NORMAL, B1XX)
    donor = em_fit(data, gf, scn.response.h_basis)
    par = em_fit(
        data,
        gf,
        scn.response.h_basis,
        engine="parametric",
        m_draws=2000,
        rng=np.random.default_rng(8),
    )
    assert np.all(np.abs(par.phi - donor.phi) < 0.1)


def test_unknown_engine_rejected():
    scn = scenario_s1(1.0, n=300)
    data = generate(scn, 13)
    gf = fit_glm(data.y_observed, data.respondent_columns(), Family.NORMAL, B1XX)
    with pytest.raises(ValueError, match="unknown imputation engine"):
        em_fit(data, gf, scn.response.h_basis, engine="bootstrap")


# ---------------------------------------------------------------------------
# outcome-mean estimate
# ---------------------------------------------------------------------------


def test_mu_y_without_missing_is_sample_mean():
    rng = np.random.default_rng(14)
    y = rng.normal(size=70)
    data = make_dataset(rng.normal(size=70), y, 0)
    scnfit = fit_glm(data.y_observed, data.respondent_columns(), Family.NORMAL, B1X)
    fit = em_fit  # not needed; build the pieces directly
    w = fractional_weights(phi_spec(), scnfit.spec, data)
    from fimnar.fiem import FitResult

    res = FitResult(phi_spec(), scnfit, w, None, 0, 0.0, True)
    assert estimate_mu_y(res, data) == pytest.approx(float(y.mean()), abs=1e-12)


def test_mu_y_single_donor_substitution():
    x_obs = np.array([0.0])
    y0 = 2.5
    data = make_dataset(x_obs, [y0], 3, [0.1, -0.2, 0.4])
    gamma = normal_gamma((0.0, 0.0), 1.0)
    w = fractional_weights(phi_spec(), gamma, data)
    from fimnar.fiem import FitResult
    from fimnar.respondent import RespondentFit

    gf = RespondentFit(gamma, 0.0, 6.0, 3, 1, True)
    res = FitResult(phi_spec(), gf, w, None, 0, 0.0, True)
    # every missing unit is imputed by the single donor value
    assert estimate_mu_y(res, data) == pytest.approx((y0 + 3 * y0) / 4.0, abs=1e-12)
