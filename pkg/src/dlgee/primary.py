"""Two-component conditional mean, GEE estimation, variance, and Wald tests.

For rows with the covariate observed above the detection limit the mean is the
plain regression function; for censored rows it is the conditional expectation
of that function given the surrogates and the censoring event, supplied either
in closed form (parametric normal auxiliary), by Gauss-Legendre quadrature
(logit link), or as a jump sum against the Kaplan-Meier residual CDF
(semiparametric auxiliary).  Coefficients solve the estimating equations
sum_i D_i' V_i^{-1} (y_i - g_i) = 0; three variance estimators are provided:
the plain sandwich (nuisance treated as known), the nuisance-corrected
sandwich for the parametric auxiliary, and the sample-splitting/cross-fitting
(SSCF) estimator, which is the required route for the semiparametric
auxiliary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import expit, log_ndtr
from scipy.stats import chi2

from .auxiliary import ParametricAuxFit, SemiparAuxFit, fit_auxiliary
from .data import Dataset, FitConfig, check_valid, split_two_folds, take_rows
from .errors import ConvergenceError, ModelError, SingularSystemError
from .numerics import (
    RootSolveOptions,
    invert_spd,
    mills_lower,
    newton_solve,
    solve_spd,
    truncated_mean_below,
)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_GL_NODES, _GL_WEIGHTS = leggauss(64)


def _linkinv(link: str, eta):
    return eta if link == "identity" else expit(eta)


def _dlinkinv(link: str, eta):
    if link == "identity":
        return np.ones_like(np.asarray(eta, dtype=float))
    p = expit(eta)
    return p * (1.0 - p)


@dataclass(frozen=True)
class PrimaryFit:
    """Fitted primary coefficients with (optionally) a variance estimate.

    ``sigma_beta`` is the estimated variance of beta_hat itself (the
    asymptotic matrix divided by the number of rows used), so standard errors
    are the square roots of its diagonal.
    """

    beta_hat: np.ndarray
    sigma_beta: Optional[np.ndarray]
    std_errors: Optional[np.ndarray]
    variance_method: str
    n: int
    n_obs: int
    p_hat2: float
    iterations: int
    converged: bool
    flagged_rows: tuple[int, ...] = ()
    diagnostics: dict = field(default_factory=dict)

    def p_values(self) -> np.ndarray:
        """Two-sided p-values for the per-coefficient nulls beta_j = 0."""
        if self.std_errors is None:
            raise ModelError("fit has no variance estimate")
        w = (self.beta_hat / self.std_errors) ** 2
        return chi2.sf(w, 1)

    def to_dict(self) -> dict:
        out = {
            "beta": [float(v) for v in self.beta_hat],
            "variance_method": self.variance_method,
            "n": int(self.n),
            "n_obs": int(self.n_obs),
            "p_hat2": float(self.p_hat2),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "flagged_rows": [int(r) for r in self.flagged_rows],
        }
        if self.sigma_beta is not None:
            out["std_errors"] = [float(v) for v in self.std_errors]
            out["sigma_beta"] = [float(v) for v in np.asarray(self.sigma_beta).ravel()]
            out["p_values"] = [float(v) for v in self.p_values()]
        return out


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    dof: int
    p_value: float
    C: np.ndarray
    b: np.ndarray


class MeanModel:
    """Per-row conditional mean of y and its derivatives.

    Precomputes everything that does not depend on beta (truncated means,
    quadrature nodes, KM jump windows), so repeated evaluations inside the GEE
    iteration stay cheap.
    """

    def __init__(self, d: Dataset, aux, link: str = "identity", normalize_htilde: bool = True):
        self.d = d
        self.aux = aux
        self.link = link
        self.normalize_htilde = normalize_htilde
        self.n = d.n
        self.p = 2 + d.u.shape[1]
        self.obs = d.x_observed
        self.cens = ~self.obs
        self.flagged_rows: tuple[int, ...] = ()

        # Design rows for observed x: (1, x, u).  Surrogates never enter here.
        self.X = np.zeros((self.n, self.p))
        self.X[:, 0] = 1.0
        self.X[self.obs, 1] = d.x_value[self.obs]
        self.X[:, 2:] = d.u

        if not self.cens.any():
            self.kind = "none"
            return
        if aux is None:
            raise ModelError("censored rows present but no auxiliary fit supplied")
        if isinstance(aux, ParametricAuxFit):
            self.kind = "parametric"
            self._setup_parametric()
        elif isinstance(aux, SemiparAuxFit):
            self.kind = "semiparametric"
            self._setup_semiparametric()
        else:
            raise ModelError(f"unsupported auxiliary fit {type(aux).__name__}")

    # -- parametric auxiliary ------------------------------------------------

    def _setup_parametric(self):
        d, aux = self.d, self.aux
        zc = d.z[self.cens]
        self.zd_cens = np.column_stack([np.ones(zc.shape[0]), zc])
        mu = self.zd_cens @ aux.gamma
        theta = aux.sigma2_x
        sigma = math.sqrt(theta)
        if aux.scale == "identity":
            delta_w = d.delta
        elif d.delta > 0.0:
            delta_w = math.log(d.delta)
        else:
            raise ModelError("log-scale auxiliary requires a positive detection limit")
        a = (delta_w - mu) / sigma
        lt = mills_lower(a)
        ltp = -lt * (a + lt)
        if aux.scale == "identity":
            self.ex = truncated_mean_below(mu, theta, delta_w)
            self.dex_dmu = 1.0 + ltp
            self.dex_dtheta = (a * ltp - lt) / (2.0 * sigma)
        else:
            # x = exp(w) with w | z censored below delta_w: the lower partial
            # expectation of a log-normal, exp(mu + theta/2) Phi(a - sigma)/Phi(a).
            lts = mills_lower(a - sigma)
            self.ex = np.exp(mu + 0.5 * theta + log_ndtr(a - sigma) - log_ndtr(a))
            self.dex_dmu = self.ex * (1.0 - (lts - lt) / sigma)
            self.dex_dtheta = self.ex * (
                0.5 - lts * (a / (2.0 * theta) + 1.0 / (2.0 * sigma)) + lt * a / (2.0 * theta)
            )
        self.X[self.cens, 1] = self.ex
        if self.link == "logit":
            # Two Gauss-Legendre panels covering the effective support of the
            # lower-truncated normal on the model scale:
            # [min(mu, delta_w) - 8 sigma, min(delta_w, mu + 8 sigma)].
            lo = np.minimum(mu, delta_w) - 8.0 * sigma
            hi = np.minimum(delta_w, mu + 8.0 * sigma)
            mid = 0.5 * (lo + hi)
            nodes, weights = [], []
            for a_end, b_end in ((lo, mid), (mid, hi)):
                half = 0.5 * (b_end - a_end)
                centre = 0.5 * (a_end + b_end)
                nodes.append(centre[:, None] + half[:, None] * _GL_NODES[None, :])
                weights.append(half[:, None] * _GL_WEIGHTS[None, :])
            wq_nodes = np.concatenate(nodes, axis=1)  # (n_cens, 128)
            wq = np.concatenate(weights, axis=1)
            s = (wq_nodes - mu[:, None]) / sigma
            log_flow = -np.log(sigma) - _LOG_SQRT_2PI - 0.5 * s**2 - log_ndtr(a)[:, None]
            self.qx = wq_nodes if aux.scale == "identity" else np.exp(wq_nodes)
            self.qw = wq * np.exp(log_flow)  # rows integrate to ~1
            self.q_sc_mu = (s + lt[:, None]) / sigma
            self.q_sc_theta = (s**2 - 1.0 + (a * lt)[:, None]) / (2.0 * theta)

    # -- semiparametric auxiliary ---------------------------------------------

    def _setup_semiparametric(self):
        d, aux = self.d, self.aux
        zc = d.z[self.cens]
        zd = np.column_stack([np.ones(zc.shape[0]), zc])
        mu_g = zd @ aux.gamma
        lower = aux.nu - mu_g
        e = aux.xi_hat.jump_points
        masses = aux.xi_hat.jump_masses
        cens_rows = np.nonzero(self.cens)[0]
        self.jump_x: list[np.ndarray] = []
        self.jump_w: list[np.ndarray] = []
        self.jump_scale: np.ndarray = np.ones(zc.shape[0])
        flagged = []
        for i in range(zc.shape[0]):
            sel = (e >= lower[i]) & (e <= aux.tau)
            if sel.any():
                pts, w = e[sel], masses[sel]
            else:
                # Finite-sample fallback: no KM jump inside the window, use the
                # nearest jump and flag the row.
                j = int(np.argmin(np.abs(e - lower[i])))
                pts, w = e[j : j + 1], np.ones(1)
                flagged.append(int(cens_rows[i]))
            total = w.sum()
            if self.normalize_htilde:
                w = w / total
            else:
                self.jump_scale[i] = total
                w = w / total
            self.jump_x.append(aux.transform.apply(pts + mu_g[i]))
            self.jump_w.append(w)
        self.flagged_rows = tuple(flagged)

    # -- evaluation ------------------------------------------------------------

    def means(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        g = np.empty(self.n)
        g[self.obs] = _linkinv(self.link, self.X[self.obs] @ beta)
        if self.kind == "none":
            return g
        u_c = self.d.u[self.cens]
        if self.kind == "parametric" and self.link == "identity":
            g[self.cens] = self.X[self.cens] @ beta
        elif self.kind == "parametric":
            eta = beta[0] + beta[1] * self.qx + (u_c @ beta[2:])[:, None]
            g[self.cens] = np.sum(self.qw * _linkinv(self.link, eta), axis=1)
        else:
            vals = np.empty(len(self.jump_x))
            for i, (xs, ws) in enumerate(zip(self.jump_x, self.jump_w)):
                eta = beta[0] + beta[1] * xs + u_c[i] @ beta[2:]
                vals[i] = self.jump_scale[i] * np.sum(ws * _linkinv(self.link, eta))
            g[self.cens] = vals
        return g

    def jac_beta(self, beta) -> np.ndarray:
        """D_i = d g_i / d beta, one row per observation."""
        beta = np.asarray(beta, dtype=float)
        D = np.zeros((self.n, self.p))
        eta_obs = self.X[self.obs] @ beta
        D[self.obs] = _dlinkinv(self.link, eta_obs)[:, None] * self.X[self.obs]
        if self.kind == "none":
            return D
        u_c = self.d.u[self.cens]
        if self.kind == "parametric" and self.link == "identity":
            D[self.cens] = self.X[self.cens]
        elif self.kind == "parametric":
            eta = beta[0] + beta[1] * self.qx + (u_c @ beta[2:])[:, None]
            dmu = self.qw * _dlinkinv(self.link, eta)
            rows = np.empty((self.qx.shape[0], self.p))
            rows[:, 0] = dmu.sum(axis=1)
            rows[:, 1] = (dmu * self.qx).sum(axis=1)
            rows[:, 2:] = dmu.sum(axis=1)[:, None] * u_c
            D[self.cens] = rows
        else:
            rows = np.empty((len(self.jump_x), self.p))
            for i, (xs, ws) in enumerate(zip(self.jump_x, self.jump_w)):
                eta = beta[0] + beta[1] * xs + u_c[i] @ beta[2:]
                dwin = self.jump_scale[i] * ws * _dlinkinv(self.link, eta)
                rows[i, 0] = dwin.sum()
                rows[i, 1] = (dwin * xs).sum()
                rows[i, 2:] = dwin.sum() * u_c[i]
            D[self.cens] = rows
        return D

    def jac_eta(self, beta) -> np.ndarray:
        """M_i = d g_i / d eta; zero on observed rows (parametric auxiliary only)."""
        if self.kind == "none":
            q = 2 + self.d.z.shape[1]
            return np.zeros((self.n, q))
        if self.kind != "parametric":
            raise ModelError("eta-jacobian is defined for the parametric auxiliary only")
        beta = np.asarray(beta, dtype=float)
        q = self.aux.gamma.shape[0] + 1
        M = np.zeros((self.n, q))
        u_c = self.d.u[self.cens]
        if self.link == "identity":
            dmu = beta[1] * self.dex_dmu
            M[self.cens, :-1] = dmu[:, None] * self.zd_cens
            M[self.cens, -1] = beta[1] * self.dex_dtheta
        else:
            eta = beta[0] + beta[1] * self.qx + (u_c @ beta[2:])[:, None]
            hq = self.qw * _linkinv(self.link, eta)
            dmu = (hq * self.q_sc_mu).sum(axis=1)
            M[self.cens, :-1] = dmu[:, None] * self.zd_cens
            M[self.cens, -1] = (hq * self.q_sc_theta).sum(axis=1)
        return M

    def working_variance(self, g: np.ndarray, working: str) -> np.ndarray:
        if working == "constant":
            return np.ones_like(g)
        return np.clip(g * (1.0 - g), 1e-10, None)


def conditional_mean(model: MeanModel, beta, row: int) -> float:
    """Mean of y for a single dataset row at the given coefficients."""
    return float(model.means(np.asarray(beta, dtype=float))[row])


def gee_fit(
    d: Dataset,
    aux,
    config: FitConfig,
    opts: RootSolveOptions | None = None,
    beta0=None,
) -> PrimaryFit:
    """Solve the estimating equations for beta; variance left unattached.

    The residual is the per-observation average (1/n) sum D_i' V_i^{-1} (y_i -
    g_i) and the Newton direction uses the Fisher-scoring Jacobian, so the
    identity-link equations (linear in beta) converge in a single step.
    """
    model = MeanModel(d, aux, config.link, config.normalize_htilde)
    if config.link == "logit":
        values = np.unique(d.y)
        if not np.all(np.isin(values, (0.0, 1.0))):
            raise ModelError("logit link requires a 0/1 response")
    y, n = d.y, d.n

    def residual(beta):
        g = model.means(beta)
        if not np.all(np.isfinite(g)):
            bad = int(np.nonzero(~np.isfinite(g))[0][0])
            raise ModelError(f"non-finite conditional mean at row {bad}")
        v = model.working_variance(g, config.working_variance)
        return model.jac_beta(beta).T @ ((y - g) / v) / n

    def jacobian(beta):
        g = model.means(beta)
        v = model.working_variance(g, config.working_variance)
        D = model.jac_beta(beta)
        return -(D.T @ (D / v[:, None])) / n

    x0 = np.zeros(model.p) if beta0 is None else np.asarray(beta0, dtype=float)
    try:
        res = newton_solve(residual, jacobian, x0, opts or RootSolveOptions(tol=1e-10))
    except ConvergenceError as exc:
        raise ModelError("GEE did not converge") from exc
    return PrimaryFit(
        beta_hat=res.x,
        sigma_beta=None,
        std_errors=None,
        variance_method="none",
        n=n,
        n_obs=d.n_obs,
        p_hat2=d.n_obs / n,
        iterations=res.iterations,
        converged=True,
        flagged_rows=model.flagged_rows,
    )


def _sandwich_parts(model: MeanModel, beta, y, working):
    g = model.means(beta)
    v = model.working_variance(g, working)
    D = model.jac_beta(beta)
    s = y - g
    Dv = D / v[:, None]
    B = D.T @ Dv / model.n
    U = Dv * s[:, None]
    sigma_u = U.T @ U / model.n
    return B, sigma_u, Dv


def variance_known_eta(d: Dataset, fit: PrimaryFit, aux, config: FitConfig) -> np.ndarray:
    """Plain sandwich B^{-1} Sigma_U B^{-T}, nuisance treated as known.

    Returns the asymptotic matrix; divide by n for the variance of beta_hat.
    """
    model = MeanModel(d, aux, config.link, config.normalize_htilde)
    B, sigma_u, _ = _sandwich_parts(model, fit.beta_hat, d.y, config.working_variance)
    try:
        binv = invert_spd(B)
    except SingularSystemError as exc:
        raise ModelError("rank-deficient information") from exc
    out = binv @ sigma_u @ binv.T
    return 0.5 * (out + out.T)


def variance_theorem1(d: Dataset, fit: PrimaryFit, aux: ParametricAuxFit, config: FitConfig) -> np.ndarray:
    """Nuisance-corrected sandwich B^{-1}(Sigma_U + Phi)B^{-T} for the parametric auxiliary.

    Phi = (n/n_o) C I^{-1} C' with C = (1/n) sum D_i' V_i^{-1} M_i and I the
    per-observed-row Fisher information: the influence function of the plug-in
    estimator contributes p^{-2} C I^{-1} q_i 1(observed), whose variance is
    p^{-2} C I^{-1} C' because E(q q' 1(observed)) = p^2 I.  Phi is PSD by
    construction, so the corrected variance dominates the known-eta one.
    """
    if not isinstance(aux, ParametricAuxFit):
        raise ModelError("corrected variance requires the parametric auxiliary fit")
    model = MeanModel(d, aux, config.link, config.normalize_htilde)
    B, sigma_u, Dv = _sandwich_parts(model, fit.beta_hat, d.y, config.working_variance)
    M = model.jac_eta(fit.beta_hat)
    C = Dv.T @ M / model.n
    p_hat2 = d.n_obs / d.n
    try:
        iinv = invert_spd(aux.fisher_info)
    except SingularSystemError as exc:
        raise ModelError("auxiliary information singular") from exc
    phi = (C @ iinv @ C.T) / p_hat2
    try:
        binv = invert_spd(B)
    except SingularSystemError as exc:
        raise ModelError("rank-deficient information") from exc
    out = binv @ (sigma_u + phi) @ binv.T
    return 0.5 * (out + out.T)


def _attach_variance(fit: PrimaryFit, sigma_asym: np.ndarray, method: str, **diag) -> PrimaryFit:
    sigma = np.asarray(sigma_asym, dtype=float) / fit.n
    return replace(
        fit,
        sigma_beta=sigma,
        std_errors=np.sqrt(np.diag(sigma)),
        variance_method=method,
        diagnostics={**fit.diagnostics, **diag},
    )


def variance_sscf(d: Dataset, config: FitConfig) -> PrimaryFit:
    """Sample-splitting/cross-fitting fit: full-sample point estimate, SSCF variance.

    Fold 2 supplies the nuisance for fold 1's GEE and vice versa; each fold
    contributes the empirical variance of its influence functions, combined as
    a fold-size weighted average.
    """
    aux_full = fit_auxiliary(d, config)
    fit_full = gee_fit(d, aux_full, config)
    fold1, fold2, _ = split_two_folds(d, config.seed)
    sigmas, betas = [], []
    for k, (target, other) in enumerate(((fold1, fold2), (fold2, fold1)), start=1):
        try:
            aux_other = fit_auxiliary(other, config)
            fit_k = gee_fit(target, aux_other, config, beta0=fit_full.beta_hat)
            model = MeanModel(target, aux_other, config.link, config.normalize_htilde)
            B, sigma_u, _ = _sandwich_parts(model, fit_k.beta_hat, target.y, config.working_variance)
            binv = invert_spd(B)
            sigmas.append(binv @ sigma_u @ binv.T)
            betas.append(fit_k.beta_hat)
        except (ModelError, SingularSystemError) as exc:
            raise ModelError(f"SSCF fold failure (fold {k}): {exc}") from exc
    sigma = (fold1.n * sigmas[0] + fold2.n * sigmas[1]) / d.n
    sigma = 0.5 * (sigma + sigma.T)
    return _attach_variance(
        fit_full,
        sigma,
        "sscf",
        sscf_fold_betas=[[float(v) for v in b] for b in betas],
    )


def complete_case_fit(d: Dataset, config: FitConfig) -> PrimaryFit:
    """GEE on the rows with observed x only; plain sandwich variance."""
    obs_idx = np.nonzero(d.x_observed)[0]
    if obs_idx.size < 2 + d.u.shape[1]:
        raise ModelError("too few observed rows for a complete-case fit")
    sub = take_rows(d, obs_idx)
    fit = gee_fit(sub, None, config)
    sigma = variance_known_eta(sub, fit, None, config)
    return _attach_variance(fit, sigma, "known_eta")


def fit_primary(d: Dataset, config: FitConfig, variance: str = "theorem1") -> PrimaryFit:
    """Fit auxiliary and primary models, then attach the requested variance.

    ``variance`` is one of "known", "theorem1", or "sscf"; theorem1 requires
    the parametric auxiliary, and sscf is the supported route for the
    semiparametric one.
    """
    check_valid(d)
    if variance == "sscf":
        return variance_sscf(d, config)
    aux = fit_auxiliary(d, config) if (~d.x_observed).any() else None
    fit = gee_fit(d, aux, config)
    if variance == "known":
        return _attach_variance(fit, variance_known_eta(d, fit, aux, config), "known_eta")
    if variance == "theorem1":
        if aux is None:
            return _attach_variance(fit, variance_known_eta(d, fit, None, config), "theorem1")
        if not isinstance(aux, ParametricAuxFit):
            raise ModelError("theorem1 variance requires the parametric auxiliary")
        return _attach_variance(fit, variance_theorem1(d, fit, aux, config), "theorem1")
    raise ModelError(f"unknown variance method '{variance}'")


def wald_test(fit: PrimaryFit, C, b) -> WaldResult:
    """Chi-square test of the linear hypothesis C beta = b."""
    if fit.sigma_beta is None:
        raise ModelError("fit has no variance estimate")
    C = np.atleast_2d(np.asarray(C, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    s, p = C.shape
    if p != fit.beta_hat.shape[0] or b.shape[0] != s:
        raise ModelError("constraint dimensions do not match the fit")
    if np.linalg.matrix_rank(C) < s:
        raise ModelError("constraint matrix rank-deficient")
    dev = C @ fit.beta_hat - b
    cov = C @ fit.sigma_beta @ C.T
    try:
        stat = float(dev @ solve_spd(cov, dev))
    except (SingularSystemError, ValueError) as exc:
        raise ModelError("constraint covariance not invertible") from exc
    stat = max(stat, 0.0)
    return WaldResult(
        statistic=stat,
        dof=s,
        p_value=float(chi2.sf(stat, s)),
        C=C,
        b=b,
    )
