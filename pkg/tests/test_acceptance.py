"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Monte Carlo criteria run at their stated replication counts, so this module
takes a few minutes; run with ``pytest -s tests/test_acceptance.py`` to watch
the per-criterion lines.
"""

import os
import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import IntegrationWarning, quad

from dlgee.auxiliary import (
    ParametricAuxFit,
    fit_truncated_normal,
    km_residual_cdf,
    truncated_normal_hessian,
    truncated_normal_loglik,
    truncated_normal_score,
)
from dlgee.data import Dataset, FitConfig
from dlgee.numerics import finite_diff_jacobian, is_psd, normal_pdf_cdf, truncated_mean_above, truncated_mean_below
from dlgee.primary import (
    MeanModel,
    complete_case_fit,
    fit_primary,
    gee_fit,
    variance_known_eta,
    wald_test,
)
from dlgee.simulation import TABLE1_PRESET, TABLE2_PRESET, TABLE3_PRESET, run_mc

warnings.filterwarnings("ignore", category=IntegrationWarning)

JOBS = min(2, os.cpu_count() or 1)
SEED = 1


def report(criterion, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


def simulate_primary(n, missing, seed, sigma2_x=0.2):
    rng = np.random.default_rng(seed)
    z1 = rng.normal(0, 1, n)
    z2 = rng.binomial(1, 0.5, n).astype(float)
    x = 1.0 + z1 + z2 + rng.normal(0, np.sqrt(sigma2_x), n)
    u1 = rng.normal(0, 1, n)
    u2 = rng.binomial(1, 0.5, n).astype(float)
    y = 1.0 + x + u1 + u2 + rng.normal(0, 1, n)
    delta = np.quantile(x, missing) if missing > 0 else x.min() - 10.0
    obs = x > delta
    return Dataset(y, np.where(obs, x, delta), obs, np.column_stack([u1, u2]),
                   np.column_stack([z1, z2]), float(delta))


def test_criterion_1_table1_calibration():
    """Design A, n in {200, 500}, both error kinds, 30% missing, M=500."""
    lines = []
    ok = True
    for n in (200, 500):
        for error in ("normal", "centered_chisq"):
            cfg = replace(TABLE1_PRESET, n=n, error_kind=error, mc_reps=500, seed=SEED)
            rep = run_mc(cfg, ["semi_para"], jobs=JOBS)
            s = rep.methods["semi_para"]
            ratio = s.mean_asymptotic_se / s.empirical_se
            cell_ok = (
                abs(s.mean_estimate - 1.0) <= 0.01
                and 0.03 <= s.rejection_rate <= 0.07
                and 0.85 <= ratio <= 1.15
            )
            ok &= cell_ok
            lines.append(
                f"n={n} {error}: mean={s.mean_estimate:.4f} typeI={s.rejection_rate:.3f} "
                f"SEratio={ratio:.3f}{'' if cell_ok else '  <-- out of band'}"
            )
    report("criterion 1 (Table 1 calibration)", ok, "; ".join(lines))


def test_criterion_2_table2_reproduction():
    """Transformed design, n=400, 30% missing, M=500: biases and empirical SEs."""
    cfg = replace(TABLE2_PRESET, mc_reps=500, seed=SEED)
    rep = run_mc(cfg, ["full_data", "semi_semi", "semi_para", "complete_case"], jobs=JOBS)
    targets = {"full_data": 0.202, "semi_semi": 0.205, "semi_para": 0.204, "complete_case": 0.329}
    ok = True
    lines = []
    for method, target in targets.items():
        s = rep.methods[method]
        se_ok = abs(s.empirical_se - target) <= 0.15 * target
        bias_ok = method == "complete_case" or abs(s.bias) <= 0.02
        ok &= se_ok and bias_ok
        lines.append(
            f"{method}: bias={s.bias:+.4f} empSE={s.empirical_se:.3f} (target {target})"
            f"{'' if se_ok and bias_ok else '  <-- out of band'}"
        )
    # efficiency ordering with 10% MC slack: full <= semi-para <= complete-case
    se = {m: rep.methods[m].empirical_se for m in targets}
    ordering = (
        se["full_data"] <= 1.1 * se["semi_para"]
        and se["semi_para"] <= 1.1 * se["complete_case"]
    )
    ok &= ordering
    lines.append(f"SE ordering full<=semi-para<=observed: {ordering}")
    report("criterion 2 (Table 2 reproduction)", ok, "; ".join(lines))


def test_criterion_3a_power_gain():
    """sigma_x^2/sigma_y^2 = 0.1, 30% missing: semi-para beats complete-case by >= 0.15."""
    cfg = replace(TABLE3_PRESET, mc_reps=500, seed=SEED)
    rep = run_mc(cfg, ["complete_case", "semi_para"], jobs=JOBS)
    sp = rep.methods["semi_para"].rejection_rate
    cc = rep.methods["complete_case"].rejection_rate
    report(
        "criterion 3a (power gain at variance ratio 0.1)",
        sp - cc >= 0.15,
        f"semi-para {sp:.3f} vs complete-case {cc:.3f} (reference: 0.603 vs 0.332)",
    )


def test_criterion_3b_power_reversal():
    """sigma_x^2/sigma_y^2 = 5, 60% missing: the reference power ordering reverses.

    Known red: the reference complete-case power column pins the effect size
    near 0.1, at which the calibrated two-component estimator remains strictly
    more efficient than complete case, so no reversal can occur.  Asserted as
    stated anyway.
    """
    cfg = replace(TABLE3_PRESET, sigma2_x=5.0, target_missing_frac=0.6, mc_reps=500, seed=SEED)
    rep = run_mc(cfg, ["complete_case", "semi_para"], jobs=JOBS)
    sp = rep.methods["semi_para"].rejection_rate
    cc = rep.methods["complete_case"].rejection_rate
    report(
        "criterion 3b (power reversal at variance ratio 5)",
        sp < cc,
        f"semi-para {sp:.3f} vs complete-case {cc:.3f} (reference: 0.137 vs 0.524)",
    )


def test_criterion_4_oracle_equivalence():
    """No censoring: GEE+sandwich equals the least-squares+robust oracle."""
    worst = 0.0
    config = FitConfig()
    for seed in range(20):
        d = simulate_primary(n=120, missing=0.0, seed=1000 + seed)
        fit = gee_fit(d, None, config)
        X = np.column_stack([np.ones(d.n), d.x_value, d.u])
        ols, *_ = np.linalg.lstsq(X, d.y, rcond=None)
        resid = d.y - X @ ols
        bread = np.linalg.inv(X.T @ X / d.n)
        meat = (X * resid[:, None]).T @ (X * resid[:, None]) / d.n
        oracle = bread @ meat @ bread
        sigma = variance_known_eta(d, fit, None, config)
        worst = max(worst, float(np.max(np.abs(fit.beta_hat - ols))))
        worst = max(worst, float(np.max(np.abs(sigma - oracle))))
        th = fit_primary(d, config, variance="theorem1")
        kn = fit_primary(d, config, variance="known")
        assert np.array_equal(th.sigma_beta, kn.sigma_beta)
    report("criterion 4 (oracle equivalence)", worst <= 1e-8,
           f"max |difference| = {worst:.2e} over 20 datasets; theorem1 == known exactly")


def test_criterion_5_truncated_moments():
    """1,000 random (mu, sigma2, delta) against adaptive integration."""

    def phi(z):
        return np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)

    rng = np.random.default_rng(SEED)
    worst_mean, worst_total = 0.0, 0.0
    for _ in range(1000):
        mu = rng.normal(0, 3)
        s2 = rng.uniform(0.05, 6)
        a = rng.uniform(-8, 8)
        sigma = np.sqrt(s2)
        delta = mu + a * sigma
        num, _ = quad(lambda z: z * phi(z), a - 40, a, epsabs=0.0, epsrel=1e-12, limit=200)
        den, _ = quad(phi, a - 40, a, epsabs=0.0, epsrel=1e-12, limit=200)
        worst_mean = max(worst_mean, abs(truncated_mean_below(mu, s2, delta) - (mu + sigma * num / den)))
        num, _ = quad(lambda z: z * phi(z), a, a + 40, epsabs=0.0, epsrel=1e-12, limit=200)
        den, _ = quad(phi, a, a + 40, epsabs=0.0, epsrel=1e-12, limit=200)
        worst_mean = max(worst_mean, abs(truncated_mean_above(mu, s2, delta) - (mu + sigma * num / den)))
        _, cum = normal_pdf_cdf(delta, mu, s2)
        total = cum * truncated_mean_below(mu, s2, delta) + (1 - cum) * truncated_mean_above(mu, s2, delta)
        worst_total = max(worst_total, abs(total - mu))
    ok = worst_mean <= 1e-8 and worst_total <= 1e-10
    report("criterion 5 (truncated-moment suite)", ok,
           f"max quadrature gap {worst_mean:.2e} (tol 1e-8), max total-expectation gap {worst_total:.2e} (tol 1e-10)")


def _rel_gap(a, b, floor):
    scale = np.maximum(np.abs(b), floor)
    return float(np.max(np.abs(a - b) / scale))


def test_criterion_6_derivative_suite():
    """Analytic D, M, score, and Hessian vs central differences, 50 configs each."""
    rng = np.random.default_rng(SEED)
    worst = {"D": 0.0, "M": 0.0, "score": 0.0, "hessian": 0.0}
    for rep in range(50):
        d = simulate_primary(n=40, missing=rng.uniform(0.2, 0.5), seed=2000 + rep)
        link = "identity" if rep % 2 == 0 else "logit"
        if link == "logit":
            d = Dataset((d.y > np.median(d.y)).astype(float), d.x_value, d.x_observed,
                        d.u, d.z, d.delta)
        aux = fit_truncated_normal(d)
        model = MeanModel(d, aux, link)
        beta = rng.normal(0, 0.4, 4)

        D = model.jac_beta(beta)
        fd_D = np.empty_like(D)
        h = 1e-6
        for j in range(4):
            bp, bm = beta.copy(), beta.copy()
            bp[j] += h
            bm[j] -= h
            fd_D[:, j] = (model.means(bp) - model.means(bm)) / (2 * h)
        worst["D"] = max(worst["D"], _rel_gap(D, fd_D, 1e-3))

        eta0 = np.concatenate([aux.gamma, [aux.sigma2_x]])

        def means_at(eta):
            aux_e = ParametricAuxFit(eta[:3], float(eta[3]), aux.fisher_info, aux.n_obs, True)
            return MeanModel(d, aux_e, link).means(beta)

        M = model.jac_eta(beta)
        fd_M = np.empty_like(M)
        for j in range(4):
            ep, em = eta0.copy(), eta0.copy()
            ep[j] += h
            em[j] -= h
            fd_M[:, j] = (means_at(ep) - means_at(em)) / (2 * h)
        worst["M"] = max(worst["M"], _rel_gap(M, fd_M, 1e-3))

        gamma = rng.normal(1.0, 0.2, 3)
        s2 = rng.uniform(0.1, 0.5)
        fd_score = finite_diff_jacobian(
            lambda e: truncated_normal_loglik(e[:3], e[3], d),
            np.concatenate([gamma, [s2]]), h=1e-6,
        )[0]
        score = truncated_normal_score(gamma, s2, d)
        worst["score"] = max(worst["score"], _rel_gap(score, fd_score, 1e-2))

        fd_hess = finite_diff_jacobian(
            lambda e: truncated_normal_score(e[:3], e[3], d),
            np.concatenate([gamma, [s2]]), h=1e-6,
        )
        hess = truncated_normal_hessian(gamma, s2, d)
        worst["hessian"] = max(worst["hessian"], _rel_gap(hess, fd_hess, 1e-1))

    ok = all(v <= 1e-5 for v in worst.values())
    report("criterion 6 (derivative suite)", ok,
           ", ".join(f"{k}: {v:.2e}" for k, v in worst.items()) + " (tol 1e-5 relative)")


def test_criterion_7_km_suite():
    """ECDF degeneracy and the four-point hand example."""
    rng = np.random.default_rng(SEED)
    n = 40
    z = rng.normal(size=(n, 1))
    x = 1.0 + z[:, 0] + rng.normal(0, 0.3, n)
    d = Dataset(rng.normal(size=n), x, np.ones(n, bool), np.zeros((n, 1)), z, float(x.min() - 1))
    fit = km_residual_cdf(d, np.array([1.0, 1.0]), "negate")
    ecdf_ok = np.allclose(fit.xi_hat.jump_masses, 1.0 / n) and fit.xi_hat.total_mass == pytest.approx(1.0)

    observed = np.array([True, False, True, False])
    xs = np.array([-1.0, -9.0, -3.0, -9.0])
    hand = Dataset(np.zeros(4), xs, observed, np.zeros((4, 1)),
                   np.column_stack([[0.0, 1.0, 0.0, 5.0 / 7.0]]), -9.0)
    fit2 = km_residual_cdf(hand, np.array([0.0, 7.0]), "negate")
    hand_ok = np.allclose(fit2.xi_hat.jump_masses, [0.25, 0.375]) and np.allclose(
        fit2.xi_hat.jump_points, [1.0, 3.0]
    )
    report("criterion 7 (KM suite)", ecdf_ok and hand_ok,
           f"no-censoring masses uniform: {ecdf_ok}; hand example masses (1/4, 3/8): {hand_ok}")


def test_criterion_8_sscf():
    """Determinism at fixed seed; SSCF SE within 20% of the corrected sandwich."""
    d = simulate_primary(n=300, missing=0.3, seed=77)
    config = FitConfig(seed=5)
    f1 = fit_primary(d, config, variance="sscf")
    f2 = fit_primary(d, config, variance="sscf")
    deterministic = np.array_equal(f1.beta_hat, f2.beta_hat) and np.array_equal(
        f1.sigma_beta, f2.sigma_beta
    )

    cfg = replace(TABLE1_PRESET, n=500, mc_reps=200, seed=SEED)
    rep = run_mc(cfg, ["semi_para", "semi_para_sscf"], jobs=JOBS)
    se_t1 = rep.methods["semi_para"].mean_asymptotic_se
    se_sscf = rep.methods["semi_para_sscf"].mean_asymptotic_se
    close = abs(se_sscf / se_t1 - 1.0) <= 0.20
    report("criterion 8 (SSCF determinism and consistency)", deterministic and close,
           f"deterministic: {deterministic}; SSCF SE {se_sscf:.4f} vs corrected {se_t1:.4f} "
           f"(ratio {se_sscf / se_t1:.3f})")


def test_criterion_9_properties():
    """Surrogate irrelevance, PSD variances, and the Wald reference value."""
    rng = np.random.default_rng(SEED)
    surrogate_ok = True
    psd_ok = True
    for seed in range(10):
        d = simulate_primary(n=150, missing=0.35, seed=3000 + seed)
        aux = fit_truncated_normal(d)
        model = MeanModel(d, aux, "identity")
        beta = rng.normal(0, 0.5, 4)
        g1 = model.means(beta)
        z2 = d.z + np.where(d.x_observed[:, None], rng.normal(size=(d.n, 2)), 0.0)
        g2 = MeanModel(Dataset(d.y, d.x_value, d.x_observed, d.u, z2, d.delta), aux, "identity").means(beta)
        surrogate_ok &= bool(np.all(g1[d.x_observed] == g2[d.x_observed]))

        for variance in ("known", "theorem1", "sscf"):
            fit = fit_primary(d, FitConfig(seed=seed), variance=variance)
            psd_ok &= is_psd(fit.sigma_beta, tol=1e-8)
        cc = complete_case_fit(d, FitConfig())
        psd_ok &= is_psd(cc.sigma_beta, tol=1e-8)

    d = simulate_primary(n=200, missing=0.3, seed=4000)
    fit = fit_primary(d, FitConfig(), variance="theorem1")
    se = fit.std_errors[1]
    res = wald_test(fit, np.array([[0.0, 1.0, 0.0, 0.0]]),
                    [fit.beta_hat[1] - np.sqrt(3.841459) * se])
    wald_ok = abs(res.p_value - 0.05) <= 1e-6
    report("criterion 9 (property suite)", surrogate_ok and psd_ok and wald_ok,
           f"surrogate irrelevance: {surrogate_ok}; all variances PSD: {psd_ok}; "
           f"Wald p at 3.841459 = {res.p_value:.8f}")
