"""Independent oracles used to derive expected values.

Everything here is deliberately written from first principles (finite
differences, plain likelihood formulas, direct simulation) so the tests never
share a code path with the implementation they check.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln


def finite_diff_hessian(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    hess = np.empty((p, p))
    hs = h * (1.0 + np.abs(theta))
    for i in range(p):
        for j in range(i, p):
            pp = theta.copy(); pp[i] += hs[i]; pp[j] += hs[j]
            pm = theta.copy(); pm[i] += hs[i]; pm[j] -= hs[j]
            mp = theta.copy(); mp[i] -= hs[i]; mp[j] += hs[j]
            mm = theta.copy(); mm[i] -= hs[i]; mm[j] -= hs[j]
            hess[i, j] = hess[j, i] = (f(pp) - f(pm) - f(mp) + f(mm)) / (4 * hs[i] * hs[j])
    return hess


def se_from_loglik(loglik, theta_true: np.ndarray) -> np.ndarray:
    """Standard errors from the observed information at the truth."""
    hess = finite_diff_hessian(loglik, theta_true)
    cov = np.linalg.inv(-hess)
    return np.sqrt(np.diag(cov))


def ols_sandwich_se(x: np.ndarray, var_diag: np.ndarray) -> np.ndarray:
    """SEs of the OLS estimator under known heteroscedastic variance."""
    xtx_inv = np.linalg.inv(x.T @ x)
    meat = x.T @ (x * var_diag[:, None])
    cov = xtx_inv @ meat @ xtx_inv
    return np.sqrt(np.diag(cov))


def logistic_loglik_plain(x: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = x @ beta
    p = expit(eta)
    p = np.clip(p, 1e-300, 1 - 1e-16)
    return float(np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))


def beta_loglik_plain(x: np.ndarray, y: np.ndarray, theta: np.ndarray) -> float:
    """Beta regression log-likelihood; theta = (coefs..., log phi)."""
    b, phi = theta[:-1], float(np.exp(theta[-1]))
    mu = expit(x @ b)
    a_shape = mu * phi
    b_shape = (1 - mu) * phi
    return float(
        np.sum(
            gammaln(phi) - gammaln(a_shape) - gammaln(b_shape)
            + (a_shape - 1) * np.log(y) + (b_shape - 1) * np.log(1 - y)
        )
    )


def gaussian_logvar_loglik_plain(z: np.ndarray, r2: np.ndarray, gamma: np.ndarray) -> float:
    lp = z @ gamma
    return float(-0.5 * np.sum(lp + r2 * np.exp(-lp)))


def simulate_realized_costs(
    p1: np.ndarray,
    eta2: np.ndarray,
    c2: np.ndarray,
    n: int,
    fixed_cost: float,
    n_draws: int,
    seed: int,
) -> np.ndarray:
    """Direct simulation of total study cost.

    Population composition per support point is multinomial; joint phase-1+2
    inclusion is binomial thinning at eta2 = lambda1*lambda2.
    """
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(int(round(n)), p1, size=n_draws)
    drawn = rng.binomial(counts, eta2[None, :])
    return fixed_cost + drawn @ c2


def grid_min_brute(coef_var, coef_budget, remaining, step):
    """Tiny reference brute-force for the grid scan (small grids only)."""
    cv = np.asarray(coef_var, float)
    cb = np.asarray(coef_budget, float)
    k = cv.size
    m = int(round(1.0 / step))
    grid = (np.arange(m) + 1.0) * step
    best, best_lam = np.inf, None
    import itertools

    for combo in itertools.product(range(m), repeat=k - 1):
        lam = np.array([grid[i] for i in combo])
        last = (remaining - float(np.sum(cb[:-1] * lam))) / cb[-1]
        if not 0.0 < last <= 1.0:
            continue
        full = np.append(lam, last)
        val = float(np.sum(cv / full))
        if val < best:
            best, best_lam = val, full
    return best, best_lam
