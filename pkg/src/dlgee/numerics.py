"""Normal-tail special functions, damped Newton, and small dense-matrix helpers.

Everything here is a pure function of its inputs and safe to call from
concurrent workers.  The tail quantities are evaluated in log space via
``scipy.special.log_ndtr`` (erfc-based, with asymptotic expansions deep in the
tail), so the Mills ratios stay accurate even when the underlying normal CDF
underflows double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import log_ndtr

from .errors import ConvergenceError, SingularSystemError

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
# log(1e-300): below this the truncation probability is treated as zero.
_LOG_MASS_FLOOR = -690.7755278982137


def _log_std_pdf(z):
    return -0.5 * np.square(z) - _LOG_SQRT_2PI


def normal_pdf_cdf(x: float, mu: float, sigma2: float) -> tuple[float, float]:
    """Density and CDF of N(mu, sigma2) evaluated at ``x``.

    Raises
    ------
    ValueError
        If ``sigma2`` is not strictly positive or ``x`` is not finite.
    """
    if not sigma2 > 0.0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if not np.isfinite(x):
        raise ValueError(f"x must be finite, got {x}")
    sigma = np.sqrt(sigma2)
    z = (x - mu) / sigma
    density = np.exp(_log_std_pdf(z)) / sigma
    return float(density), float(np.exp(log_ndtr(z)))


def mills_lower(z):
    """Lower-tail Mills ratio phi(z)/Phi(z), stable for z -> -infinity.

    Accepts scalars or arrays.  Raises ValueError when Phi(z) is numerically
    zero (below 1e-300).
    """
    z = np.asarray(z, dtype=float)
    log_cdf = log_ndtr(z)
    if np.any(log_cdf < _LOG_MASS_FLOOR):
        raise ValueError("truncation mass numerically zero")
    out = np.exp(_log_std_pdf(z) - log_cdf)
    return out if out.ndim else float(out)


def mills_upper(z):
    """Upper-tail Mills ratio phi(z)/(1 - Phi(z)), stable for z -> +infinity."""
    z = np.asarray(z, dtype=float)
    log_sf = log_ndtr(-z)
    if np.any(log_sf < _LOG_MASS_FLOOR):
        raise ValueError("truncation mass numerically zero")
    out = np.exp(_log_std_pdf(z) - log_sf)
    return out if out.ndim else float(out)


def truncated_mean_below(mu, sigma2, delta):
    """E(X | X <= delta) for X ~ N(mu, sigma2); vectorized over ``mu``.

    Always <= min(mu, delta).
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0.0):
        raise ValueError("sigma2 must be positive")
    sigma = np.sqrt(sigma2)
    z = (np.asarray(delta, float) - np.asarray(mu, float)) / sigma
    out = np.asarray(mu - sigma * mills_lower(z))
    return out if out.ndim else float(out)


def truncated_mean_above(mu, sigma2, delta):
    """E(X | X > delta) for X ~ N(mu, sigma2); always >= max(mu, delta)."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0.0):
        raise ValueError("sigma2 must be positive")
    sigma = np.sqrt(sigma2)
    z = (np.asarray(delta, float) - np.asarray(mu, float)) / sigma
    out = np.asarray(mu + sigma * mills_upper(z))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class RootSolveOptions:
    """Controls for :func:`newton_solve` (max-norm tolerance on the residual)."""

    tol: float = 1e-10
    max_iter: int = 50
    step_halving_max: int = 30

    def __post_init__(self):
        if not self.tol > 0.0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class NewtonResult:
    x: np.ndarray
    iterations: int
    residual_norm: float


def newton_solve(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    jacobian_fn: Callable[[np.ndarray], np.ndarray],
    x0,
    opts: RootSolveOptions | None = None,
) -> NewtonResult:
    """Damped Newton root finder with step halving as globalization.

    A full step is halved (up to ``step_halving_max`` times) whenever it fails
    to reduce the residual max-norm.  Linear residuals therefore converge in a
    single step.

    Raises
    ------
    SingularSystemError
        If the Jacobian is singular.
    ConvergenceError
        If ``max_iter`` is exceeded or halving cannot find a decrease; the
        exception carries the last iterate.
    """
    opts = opts or RootSolveOptions()
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    r = np.atleast_1d(np.asarray(residual_fn(x), dtype=float))
    rnorm = float(np.max(np.abs(r)))
    for it in range(opts.max_iter):
        if rnorm <= opts.tol:
            return NewtonResult(x, it, rnorm)
        jac = np.atleast_2d(np.asarray(jacobian_fn(x), dtype=float))
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("singular system") from exc
        scale = 1.0
        for _ in range(opts.step_halving_max + 1):
            x_new = x + scale * step
            r_new = np.atleast_1d(np.asarray(residual_fn(x_new), dtype=float))
            rnorm_new = float(np.max(np.abs(r_new)))
            if np.isfinite(rnorm_new) and (rnorm_new < rnorm or rnorm_new <= opts.tol):
                break
            scale *= 0.5
        else:
            raise ConvergenceError("no convergence", last_iterate=x)
        x, r, rnorm = x_new, r_new, rnorm_new
    if rnorm <= opts.tol:
        return NewtonResult(x, opts.max_iter, rnorm)
    raise ConvergenceError("no convergence", last_iterate=x)


def finite_diff_jacobian(fn, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x``; shape (m, n).

    Test/fallback utility only; propagates errors raised by ``fn``.
    """
    if not h > 0.0:
        raise ValueError("h must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    f0 = np.atleast_1d(np.asarray(fn(x), dtype=float))
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.atleast_1d(np.asarray(fn(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(fn(xm), dtype=float))
        jac[:, j] = (fp - fm) / (2.0 * h)
    return jac


def _check_symmetric(a: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise ValueError("matrix not symmetric")
    return 0.5 * (a + a.T)


def solve_spd(a, b) -> np.ndarray:
    """Solve a @ x = b for symmetric positive-definite ``a`` (Cholesky)."""
    import scipy.linalg

    a = _check_symmetric(a)
    b = np.asarray(b, dtype=float)
    try:
        c, low = scipy.linalg.cho_factor(a, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("matrix not positive definite") from exc
    except scipy.linalg.LinAlgError as exc:  # scipy raises its own subclass
        raise SingularSystemError("matrix not positive definite") from exc
    return scipy.linalg.cho_solve((c, low), b, check_finite=False)


def invert_spd(a) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    inv = solve_spd(a, np.eye(a.shape[0]))
    return 0.5 * (inv + inv.T)


def is_psd(a, tol: float = 1e-8) -> bool:
    """True when ``a`` is symmetric positive semidefinite within ``tol``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > tol * scale:
        return False
    eigvals = np.linalg.eigvalsh(0.5 * (a + a.T))
    return bool(eigvals.min() >= -tol * scale)
