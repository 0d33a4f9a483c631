"""Nuisance models for the censored covariate.

Two routes are supported.  The parametric route fits x = gamma0 + gamma1'z + e
with normal errors by maximum likelihood on the rows observed above the
detection limit, viewing them as draws from the left-truncated conditional
density.  The semiparametric route transforms the left-censored x into a
right-censored t, estimates the regression coefficients by minimizing the
convex Gehan rank loss, and estimates the residual distribution with the
Kaplan-Meier product-limit curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import log_ndtr

from .data import Dataset, FitConfig, Violation
from .errors import ModelError, ValidationError
from .numerics import RootSolveOptions, mills_upper

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class Transform:
    """Strictly decreasing map x = T(t) linking the censored covariate to AFT time."""

    def __init__(self, name: str):
        if name not in ("negate", "neg_exp"):
            raise ModelError(f"unknown transform '{name}'")
        self.name = name

    def apply(self, t):
        """x = T(t)."""
        t = np.asarray(t, dtype=float)
        return -t if self.name == "negate" else np.exp(-t)

    def inverse(self, x):
        """t = T^{-1}(x); neg_exp requires positive x."""
        x = np.asarray(x, dtype=float)
        if self.name == "negate":
            return -x
        if np.any(x <= 0.0):
            raise ModelError("neg_exp transform requires positive covariate values")
        return -np.log(x)


@dataclass(frozen=True)
class ParametricAuxFit:
    """Truncated-normal MLE of the auxiliary regression.

    ``gamma`` stacks the intercept and surrogate slopes; ``fisher_info`` is the
    observed per-row information on the natural (gamma, sigma2_x) scale.
    With ``scale == "log"`` the normal model holds for log(x) (equivalently,
    the neg_exp-transformed AFT time with normal errors) and the detection
    limit moves to log(delta); everything downstream maps back to x.
    """

    gamma: np.ndarray
    sigma2_x: float
    fisher_info: np.ndarray
    n_obs: int
    converged: bool
    scale: str = "identity"
    loglik_trace: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "model": "parametric_normal",
            "scale": self.scale,
            "gamma": [float(v) for v in self.gamma],
            "sigma2_x": float(self.sigma2_x),
            "fisher_info": [[float(v) for v in row] for row in self.fisher_info],
            "n_obs": int(self.n_obs),
            "converged": bool(self.converged),
        }


@dataclass(frozen=True)
class StepCDF:
    """Nondecreasing right-continuous step function from the KM analysis."""

    jump_points: np.ndarray
    jump_masses: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "jump_points", np.asarray(self.jump_points, dtype=float))
        object.__setattr__(self, "jump_masses", np.asarray(self.jump_masses, dtype=float))
        if self.jump_points.shape != self.jump_masses.shape:
            raise ModelError("jump points and masses must align")
        if np.any(np.diff(self.jump_points) < 0):
            raise ModelError("jump points must be sorted")
        if np.any(self.jump_masses < 0):
            raise ModelError("jump masses must be nonnegative")

    @property
    def total_mass(self) -> float:
        return float(self.jump_masses.sum())

    def evaluate(self, t):
        """xi(t) = sum of masses at jump points <= t (right-continuous)."""
        t = np.asarray(t, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(self.jump_masses)])
        out = cum[np.searchsorted(self.jump_points, t, side="right")]
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class SemiparAuxFit:
    """Gehan coefficients plus KM residual CDF for the transformed model."""

    gamma: np.ndarray
    xi_hat: StepCDF
    transform: Transform
    nu: float
    tau: float
    n_obs: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": "semiparametric_aft",
            "gamma": [float(v) for v in self.gamma],
            "transform": self.transform.name,
            "nu": float(self.nu),
            "tau": float(self.tau),
            "jump_points": [float(v) for v in self.xi_hat.jump_points],
            "jump_masses": [float(v) for v in self.xi_hat.jump_masses],
            "total_mass": self.xi_hat.total_mass,
            "n_obs": int(self.n_obs),
            "diagnostics": {k: v for k, v in self.diagnostics.items() if not k.startswith("_")},
        }


def _observed_design(d: Dataset) -> tuple[np.ndarray, np.ndarray]:
    obs = d.x_observed
    if not obs.any():
        raise ValidationError([Violation("no-observed-x", None, "every x is censored")])
    zd = np.column_stack([np.ones(int(obs.sum())), d.z[obs]])
    return d.x_value[obs], zd


def _trunc_pieces(gamma, sigma2, x, zd, delta):
    """Per-row standardized quantities for the left-truncated likelihood."""
    mu = zd @ gamma
    sigma = math.sqrt(sigma2)
    s = (x - mu) / sigma
    a = (delta - mu) / sigma
    lam = mills_upper(a)
    return mu, sigma, s, a, lam


def truncated_normal_loglik(gamma, sigma2, d: Dataset) -> float:
    """Log-likelihood of the observed rows under the left-truncated normal."""
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    x, zd = _observed_design(d)
    _, sigma, s, a, _ = _trunc_pieces(np.asarray(gamma, float), sigma2, x, zd, d.delta)
    return float(np.sum(-math.log(sigma) - _LOG_SQRT_2PI - 0.5 * s**2 - log_ndtr(-a)))


def truncated_normal_score(gamma, sigma2, d: Dataset) -> np.ndarray:
    """Score of the truncated log-likelihood w.r.t. (gamma, sigma2), summed over rows."""
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    x, zd = _observed_design(d)
    _, sigma, s, a, lam = _trunc_pieces(np.asarray(gamma, float), sigma2, x, zd, d.delta)
    score_gamma = zd.T @ ((s - lam) / sigma)
    score_theta = float(np.sum(s**2 - 1.0 - a * lam) / (2.0 * sigma2))
    return np.concatenate([score_gamma, [score_theta]])


def truncated_normal_hessian(gamma, sigma2, d: Dataset) -> np.ndarray:
    """Hessian of the truncated log-likelihood w.r.t. (gamma, sigma2), summed over rows."""
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    x, zd = _observed_design(d)
    _, sigma, s, a, lam = _trunc_pieces(np.asarray(gamma, float), sigma2, x, zd, d.delta)
    lamp = lam * (lam - a)  # d/da of the upper Mills ratio
    h_mm = (lamp - 1.0) / sigma2
    h_mt = (lam - 2.0 * s + a * lamp) / (2.0 * sigma2 * sigma)
    h_tt = (1.0 - 2.0 * s**2 + 1.5 * a * lam + 0.5 * a**2 * lamp) / (2.0 * sigma2**2)
    q = zd.shape[1]
    hess = np.empty((q + 1, q + 1))
    hess[:q, :q] = zd.T @ (h_mm[:, None] * zd)
    hess[:q, q] = zd.T @ h_mt
    hess[q, :q] = hess[:q, q]
    hess[q, q] = float(np.sum(h_tt))
    return hess


def to_model_scale(d: Dataset, scale: str) -> Dataset:
    """Dataset with x and delta mapped to the auxiliary model scale."""
    if scale == "identity":
        return d
    if scale != "log":
        raise ModelError(f"unknown auxiliary scale '{scale}'")
    if d.delta <= 0.0 or np.any(d.x_value[d.x_observed] <= 0.0):
        raise ModelError("log-scale auxiliary requires positive covariate and detection limit")
    from dataclasses import replace as _dc_replace

    x_new = np.where(d.x_observed, np.log(np.where(d.x_observed, d.x_value, 1.0)), math.log(d.delta))
    return _dc_replace(d, x_value=x_new, delta=math.log(d.delta))


def fit_truncated_normal(
    d: Dataset, opts: RootSolveOptions | None = None, scale: str = "identity"
) -> ParametricAuxFit:
    """MLE of (gamma, sigma2_x) from the rows observed above the detection limit.

    Newton iterations run on (gamma, log sigma2) to keep the variance positive,
    with step halving so the log-likelihood never decreases across accepted
    steps.  Initialization is OLS on the observed rows; a few inflated-variance
    restarts are attempted before giving up.
    """
    opts = opts or RootSolveOptions(tol=1e-9)
    d = to_model_scale(d, scale)
    x, zd = _observed_design(d)
    n_obs = x.shape[0]
    q = zd.shape[1]
    if n_obs < q + 1:
        raise ModelError(f"{n_obs} observed rows cannot identify {q + 1} auxiliary parameters")
    if np.linalg.matrix_rank(zd) < q:
        raise ModelError("singular auxiliary design")

    gamma0, *_ = np.linalg.lstsq(zd, x, rcond=None)
    resid = x - zd @ gamma0
    sigma2_0 = max(float(resid @ resid) / n_obs, 1e-12)

    for attempt in range(4):
        gamma = gamma0.copy()
        sigma2 = sigma2_0 * 4.0**attempt
        trace = [truncated_normal_loglik(gamma, sigma2, d)]
        converged = False
        for _ in range(opts.max_iter):
            score = truncated_normal_score(gamma, sigma2, d)
            if np.max(np.abs(score)) <= opts.tol * max(1.0, n_obs):
                converged = True
                break
            hess = truncated_normal_hessian(gamma, sigma2, d)
            # chain rule to psi = (gamma, log sigma2)
            score_psi = score.copy()
            score_psi[q] *= sigma2
            hess_psi = hess.copy()
            hess_psi[:q, q] *= sigma2
            hess_psi[q, :q] *= sigma2
            hess_psi[q, q] = sigma2**2 * hess[q, q] + sigma2 * score[q]
            try:
                step = np.linalg.solve(hess_psi, -score_psi)
            except np.linalg.LinAlgError:
                break
            damp, accepted = 1.0, False
            for _ in range(opts.step_halving_max + 1):
                gamma_new = gamma + damp * step[:q]
                sigma2_new = sigma2 * math.exp(min(damp * step[q], 50.0))
                try:
                    ll_new = truncated_normal_loglik(gamma_new, sigma2_new, d)
                except (ValueError, FloatingPointError):
                    ll_new = -np.inf
                if np.isfinite(ll_new) and ll_new >= trace[-1]:
                    accepted = True
                    break
                damp *= 0.5
            if not accepted:
                break
            gamma, sigma2 = gamma_new, sigma2_new
            trace.append(ll_new)
        if converged:
            hess = truncated_normal_hessian(gamma, sigma2, d)
            info = -hess / n_obs
            info = 0.5 * (info + info.T)
            return ParametricAuxFit(
                gamma=gamma,
                sigma2_x=float(sigma2),
                fisher_info=info,
                n_obs=n_obs,
                converged=True,
                scale=scale,
                loglik_trace=tuple(trace),
            )
    raise ModelError("auxiliary MLE did not converge")


def gehan_loss(gamma, d: Dataset, transform: Transform) -> float:
    """Convex Gehan rank loss at ``gamma`` for the transformed right-censored model."""
    m, event, zd = _aft_arrays(d, transform)
    return _gehan_loss_subgrad(np.asarray(gamma, float), m, event, zd)[0]


def _aft_arrays(d: Dataset, transform: Transform):
    """min(t, nu), event flags, and the (1, z) design for the AFT fit."""
    nu = float(transform.inverse(d.delta))
    m = np.full(d.n, nu)
    m[d.x_observed] = transform.inverse(d.x_value[d.x_observed])
    event = d.x_observed.copy()
    zd = np.column_stack([np.ones(d.n), d.z])
    return m, event, zd


def _gehan_loss_subgrad(gamma, m, event, zd):
    n = m.shape[0]
    e = m - zd @ gamma
    diff = e[None, :] - e[event][:, None]  # events in rows
    pos = diff > 0.0
    loss = float(diff[pos].sum()) / n**2
    row_counts = pos.sum(axis=1)
    grad = (zd[event].T @ row_counts - zd.T @ pos.sum(axis=0)) / n**2
    return loss, grad


def fit_aft_gehan(
    d: Dataset, transform: Transform | str, opts: RootSolveOptions | None = None
) -> np.ndarray:
    """Gehan rank estimate of the AFT coefficients.

    The loss depends on residual differences only, so the intercept is left at
    its OLS starting value; the KM residual distribution absorbs location.
    Minimization runs damped subgradient descent from the observed-rows OLS
    start, then a shrinking pattern-search polish (axial plus pairwise-diagonal
    moves) down to the requested tolerance.
    """
    if isinstance(transform, str):
        transform = Transform(transform)
    opts = opts or RootSolveOptions(tol=1e-8, max_iter=200)
    m, event, zd = _aft_arrays(d, transform)
    n_ev = int(event.sum())
    q = zd.shape[1]
    if n_ev < q + 1:
        raise ModelError(f"{n_ev} uncensored rows cannot identify {q} AFT coefficients")

    anchor, *_ = np.linalg.lstsq(zd[event], m[event], rcond=None)
    gamma = anchor.copy()
    # scaling must ignore the intercept: the loss is translation invariant and
    # the fitted slopes should be too
    scale0 = 1.0 + float(np.linalg.norm(gamma[1:]))
    loss0, _ = _gehan_loss_subgrad(gamma, m, event, zd)
    # Tiny strictly-convex tiebreaker toward the OLS slopes: the rank loss is
    # piecewise linear with flat minimizing facets, and this pins a unique,
    # data-continuous point of the facet without moving it materially.
    reg = 1e-10 * (1.0 + abs(loss0)) / scale0**2

    def objective(g):
        loss, grad = _gehan_loss_subgrad(g, m, event, zd)
        dg = g - anchor
        dg[0] = 0.0
        return loss + reg * float(dg @ dg), grad + 2.0 * reg * dg

    obj, grad = objective(gamma)

    # Phase 1: damped subgradient descent (slope components only move; the
    # intercept coordinate of the subgradient is identically zero).
    step0 = scale0 / (1.0 + float(np.linalg.norm(grad)) * m.shape[0])
    for it in range(opts.max_iter):
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= opts.tol:
            break
        direction = -grad
        damp = step0 / math.sqrt(1.0 + it)
        improved = False
        for _ in range(opts.step_halving_max + 1):
            cand = gamma + damp * direction
            obj_new, grad_new = objective(cand)
            if obj_new < obj:
                gamma, obj, grad = cand, obj_new, grad_new
                improved = True
                break
            damp *= 0.5
        if not improved:
            break
        if np.linalg.norm(gamma[1:]) > 1e6 * scale0:
            raise ModelError("Gehan loss unbounded -- check censoring pattern")

    # Phase 2: pattern-search polish over slope coordinates (axial plus
    # pairwise diagonals, which plain axial moves need on a nonsmooth loss).
    dirs = []
    for k in range(1, q):
        ek = np.zeros(q)
        ek[k] = 1.0
        dirs.extend([ek, -ek])
    for k in range(1, q):
        for j in range(k + 1, q):
            ekj = np.zeros(q)
            ekj[k] = ekj[j] = math.sqrt(0.5)
            emj = np.zeros(q)
            emj[k], emj[j] = math.sqrt(0.5), -math.sqrt(0.5)
            dirs.extend([ekj, -ekj, emj, -emj])
    h = 1e-2 * scale0
    while h > 1e-9 * scale0:
        moved = False
        for dvec in dirs:
            cand = gamma + h * dvec
            obj_new = objective(cand)[0]
            if obj_new < obj:
                gamma, obj = cand, obj_new
                moved = True
        if not moved:
            h *= 0.5
        if np.linalg.norm(gamma[1:]) > 1e6 * scale0:
            raise ModelError("Gehan loss unbounded -- check censoring pattern")
    return gamma


def km_residual_cdf(
    d: Dataset,
    gamma,
    transform: Transform | str,
    tau_override: Optional[float] = None,
) -> SemiparAuxFit:
    """Kaplan-Meier CDF of the AFT residuals, packaged with the fitted gamma.

    Residuals use min(t, nu) with event flag 1(t <= nu); at tied residual
    values events precede censorings.  The truncation constant tau defaults to
    the largest uncensored residual; jumps above tau are discarded and counted
    in the diagnostics.
    """
    if isinstance(transform, str):
        transform = Transform(transform)
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise ModelError("gamma must be finite")
    m, event, zd = _aft_arrays(d, transform)
    resid = m - zd @ gamma
    if not event.any():
        raise ModelError("KM undefined: no uncensored residuals")

    order = np.lexsort((~event, resid))  # events first at ties
    r_sorted = resid[order]
    e_sorted = event[order]
    n = r_sorted.shape[0]

    jump_points: list[float] = []
    jump_masses: list[float] = []
    surv = 1.0
    i = 0
    while i < n:
        v = r_sorted[i]
        j = i
        deaths = 0
        while j < n and r_sorted[j] == v:
            deaths += int(e_sorted[j])
            j += 1
        at_risk = n - i
        if deaths:
            surv_new = surv * (1.0 - deaths / at_risk)
            jump_points.append(float(v))
            jump_masses.append(surv - surv_new)
            surv = surv_new
        i = j

    points = np.asarray(jump_points)
    masses = np.asarray(jump_masses)
    tau = float(points[-1]) if tau_override is None else float(tau_override)
    keep = points <= tau
    if not keep.any():
        raise ModelError("truncation constant discards every KM jump")
    discarded = int((~keep).sum())
    xi = StepCDF(points[keep], masses[keep])
    return SemiparAuxFit(
        gamma=gamma,
        xi_hat=xi,
        transform=transform,
        nu=float(transform.inverse(d.delta)),
        tau=tau,
        n_obs=int(event.sum()),
        diagnostics={"discarded_jumps": discarded, "gehan_loss": gehan_loss(gamma, d, transform)},
    )


def fit_auxiliary(d: Dataset, config: FitConfig):
    """Fit whichever nuisance model the configuration asks for.

    A transform combined with the parametric auxiliary means the normal model
    holds on the transformed scale: ``negate`` coincides with the plain model,
    ``neg_exp`` gives the log-normal one.
    """
    if config.auxiliary == "parametric_normal":
        scale = "log" if config.transform == "neg_exp" else "identity"
        return fit_truncated_normal(d, scale=scale)
    gamma = fit_aft_gehan(d, config.transform)
    return km_residual_cdf(d, gamma, config.transform, config.tau_override)
