"""Self-contained regression engines.

Four fitters cover everything the package needs: (weighted, optionally
Huber-robust) linear means, a log-linear conditional-variance model fit by
Fisher scoring on the Gaussian likelihood, logistic regression by IRLS, and
beta regression with a logit mean link and constant precision.

All iterative fitters use relative parameter change < 1e-8 (or 100
iterations) as the stopping rule, with step-halving whenever a proposed step
would decrease the objective. Each records its objective trace so that
monotonicity is checkable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.linalg import qr as _qr
from scipy.special import digamma, expit, gammaln

from .errors import ConvergenceError, InputError, SeparationError
from .featurespec import FeatureSpec

MAX_ITER = 100
REL_TOL = 1e-8
ETA_CAP = 700.0  # exp() overflow guard on log-variance linear predictors
HUBER_C = 1.345
SEPARATION_NORM = 30.0


def _check_design(x: np.ndarray, spec: FeatureSpec) -> None:
    n, p = x.shape
    if n < p + 1:
        raise InputError(f"need at least {p + 1} rows to fit {p} parameters, got {n}")
    if not np.all(np.isfinite(x)):
        raise InputError("design matrix contains non-finite values")
    _, r, piv = _qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(n, p) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < p:
        collinear = [spec.terms[j] for j in piv[rank:]]
        raise InputError(f"design matrix is rank deficient; collinear columns: {collinear}")


def _solve_wls(x: np.ndarray, y: np.ndarray, w: Optional[np.ndarray]) -> np.ndarray:
    if w is None:
        return np.linalg.lstsq(x, y, rcond=None)[0]
    sw = np.sqrt(w)
    return np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)[0]


@dataclass(frozen=True)
class MeanModelFit:
    """Linear conditional-mean model over a feature spec."""

    coefficients: np.ndarray
    spec: FeatureSpec
    converged: bool = True
    iterations: int = 0
    robust: bool = False

    def predict(self, cols: Mapping[str, np.ndarray]) -> np.ndarray:
        return self.spec.matrix(cols) @ self.coefficients

    def to_dict(self) -> dict:
        return {
            "family": "linear",
            "design_spec": self.spec.to_list(),
            "coefficients": [float(c) for c in self.coefficients],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }

    @staticmethod
    def from_dict(d: dict) -> "MeanModelFit":
        return MeanModelFit(
            coefficients=np.asarray(d["coefficients"], dtype=float),
            spec=FeatureSpec.from_list(d["design_spec"]),
            converged=bool(d.get("converged", True)),
            iterations=int(d.get("iterations", 0)),
        )


@dataclass(frozen=True)
class VarianceModelFit:
    """Log-linear conditional-variance model: Var = exp(z @ gamma)."""

    coefficients: np.ndarray
    spec: FeatureSpec
    converged: bool
    iterations: int
    loglik_trace: tuple[float, ...] = field(default=(), repr=False)

    def predict(self, cols: Mapping[str, np.ndarray]) -> np.ndarray:
        lp = self.spec.matrix(cols) @ self.coefficients
        if np.any(np.abs(lp) > ETA_CAP):
            warnings.warn("variance linear predictor clipped to +/-700 to avoid overflow")
            lp = np.clip(lp, -ETA_CAP, ETA_CAP)
        return np.exp(lp)

    def to_dict(self) -> dict:
        return {
            "family": "logvariance",
            "design_spec": self.spec.to_list(),
            "coefficients": [float(c) for c in self.coefficients],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }

    @staticmethod
    def from_dict(d: dict) -> "VarianceModelFit":
        return VarianceModelFit(
            coefficients=np.asarray(d["coefficients"], dtype=float),
            spec=FeatureSpec.from_list(d["design_spec"]),
            converged=bool(d.get("converged", True)),
            iterations=int(d.get("iterations", 0)),
        )


@dataclass(frozen=True)
class GlmFit:
    """Logistic or beta regression fit."""

    family: str  # "logistic" | "beta"
    coefficients: np.ndarray
    spec: FeatureSpec
    dispersion: float = float("nan")  # beta-family precision phi
    converged: bool = True
    iterations: int = 0
    loglik_trace: tuple[float, ...] = field(default=(), repr=False)

    def predict(self, cols: Mapping[str, np.ndarray]) -> np.ndarray:
        """Mean response (a probability for both families)."""
        return expit(self.spec.matrix(cols) @ self.coefficients)

    def to_dict(self) -> dict:
        out = {
            "family": self.family,
            "design_spec": self.spec.to_list(),
            "coefficients": [float(c) for c in self.coefficients],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }
        if self.family == "beta":
            out["dispersion"] = float(self.dispersion)
        return out

    @staticmethod
    def from_dict(d: dict) -> "GlmFit":
        return GlmFit(
            family=str(d["family"]),
            coefficients=np.asarray(d["coefficients"], dtype=float),
            spec=FeatureSpec.from_list(d["design_spec"]),
            dispersion=float(d.get("dispersion", float("nan"))),
            converged=bool(d.get("converged", True)),
            iterations=int(d.get("iterations", 0)),
        )


# --- mean -------------------------------------------------------------------


def fit_mean(
    cols: Mapping[str, np.ndarray],
    y: np.ndarray,
    spec: FeatureSpec,
    robust: bool = False,
    variance_weights: Optional[np.ndarray] = None,
) -> MeanModelFit:
    """Least-squares fit of y on the spec's features.

    variance_weights are precision weights (1/Var); with robust=True an IRLS
    Huber downweighting (c=1.345, MAD scale) is layered on top.
    """
    y = np.asarray(y, dtype=float)
    x = spec.matrix(cols)
    _check_design(x, spec)
    if not np.all(np.isfinite(y)):
        raise InputError("response contains non-finite values")
    vw = None
    if variance_weights is not None:
        vw = np.asarray(variance_weights, dtype=float)
        if np.any(vw <= 0) or not np.all(np.isfinite(vw)):
            raise InputError("variance weights must be positive and finite")
        # Relative clipping keeps extreme fitted variances from collapsing
        # the working sample onto a handful of rows.
        vw = vw / vw.mean()
        vw = np.clip(vw, 1e-6, 1e6)
    beta = _solve_wls(x, y, vw)
    if not robust:
        return MeanModelFit(beta, spec, converged=True, iterations=0, robust=False)

    iterations = 0
    for iterations in range(1, MAX_ITER + 1):
        resid = (y - x @ beta) * (np.sqrt(vw) if vw is not None else 1.0)
        scale = 1.4826 * np.median(np.abs(resid - np.median(resid)))
        if scale <= 0:
            break
        u = np.abs(resid) / (HUBER_C * scale)
        hub = np.where(u <= 1.0, 1.0, 1.0 / np.maximum(u, 1e-300))
        w = hub if vw is None else hub * vw
        new = _solve_wls(x, y, w)
        delta = np.max(np.abs(new - beta)) / (1.0 + np.max(np.abs(beta)))
        beta = new
        if delta < REL_TOL:
            return MeanModelFit(beta, spec, converged=True, iterations=iterations, robust=True)
    return MeanModelFit(beta, spec, converged=iterations < MAX_ITER,
                        iterations=iterations, robust=True)


# --- variance ---------------------------------------------------------------


def _variance_loglik(z: np.ndarray, r2: np.ndarray, gamma: np.ndarray) -> float:
    lp = np.clip(z @ gamma, -ETA_CAP, ETA_CAP)
    return float(-0.5 * np.sum(lp + r2 * np.exp(-lp)))


def fit_variance(
    cols: Mapping[str, np.ndarray],
    y: np.ndarray,
    mean_fit: MeanModelFit,
    spec: FeatureSpec,
    reml: bool = True,
) -> VarianceModelFit:
    """Gaussian ML for Var(y|x) = exp(z @ gamma) given a fitted mean.

    Fisher scoring with step-halving; reml=True multiplies the squared
    residuals by n/(n-p_mean) as a degrees-of-freedom correction.
    """
    y = np.asarray(y, dtype=float)
    z = spec.matrix(cols)
    _check_design(z, spec)
    resid = y - mean_fit.predict(cols)
    r2 = resid**2
    if reml:
        n, p = len(y), mean_fit.spec.n_params
        if n <= p:
            raise InputError("not enough rows for the REML degrees-of-freedom correction")
        r2 = r2 * (n / (n - p))
    r2 = np.maximum(r2, 1e-300)

    gamma = np.zeros(spec.n_params)
    gamma[_intercept_index(spec)] = np.log(r2.mean())
    ztz = z.T @ z
    ll = _variance_loglik(z, r2, gamma)
    trace = [ll]
    converged = False
    iterations = 0
    for iterations in range(1, MAX_ITER + 1):
        lp = np.clip(z @ gamma, -ETA_CAP, ETA_CAP)
        score_vec = z.T @ (r2 * np.exp(-lp) - 1.0)
        try:
            step = np.linalg.solve(ztz, score_vec)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        # step-halving against the Gaussian log-likelihood
        new_ll = _variance_loglik(z, r2, gamma + step)
        halvings = 0
        while new_ll < ll - 1e-10 and halvings < 30:
            step = step / 2.0
            new_ll = _variance_loglik(z, r2, gamma + step)
            halvings += 1
        if new_ll < ll - 1e-10:
            break
        gamma = gamma + step
        trace.append(new_ll)
        delta = np.max(np.abs(step)) / (1.0 + np.max(np.abs(gamma)))
        ll = new_ll
        if delta < REL_TOL:
            converged = True
            break
    return VarianceModelFit(gamma, spec, converged=converged, iterations=iterations,
                            loglik_trace=tuple(trace))


def _intercept_index(spec: FeatureSpec) -> int:
    for j, t in enumerate(spec.terms):
        if t == "1":
            return j
    return 0


# --- logistic ---------------------------------------------------------------


def _logistic_loglik(x: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = x @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(cols: Mapping[str, np.ndarray], y: np.ndarray, spec: FeatureSpec) -> GlmFit:
    """Logit-link MLE by iteratively reweighted least squares.

    Raises SeparationError when the likelihood is monotone (detected by a
    diverging coefficient norm > 30).
    """
    y = np.asarray(y, dtype=float)
    if set(np.unique(y)) - {0.0, 1.0}:
        raise InputError("logistic response must be binary 0/1")
    if y.min() == y.max():
        raise SeparationError("logistic fit needs both classes present")
    x = spec.matrix(cols)
    _check_design(x, spec)

    beta = np.zeros(spec.n_params)
    ybar = y.mean()
    beta[_intercept_index(spec)] = np.log(ybar / (1.0 - ybar))
    ll = _logistic_loglik(x, y, beta)
    trace = [ll]
    converged = False
    iterations = 0
    for iterations in range(1, MAX_ITER + 1):
        mu = expit(x @ beta)
        w = np.maximum(mu * (1.0 - mu), 1e-12)
        score_vec = x.T @ (y - mu)
        info = (x * w[:, None]).T @ x
        try:
            step = np.linalg.solve(info, score_vec)
        except np.linalg.LinAlgError:
            break
        new_ll = _logistic_loglik(x, y, beta + step)
        halvings = 0
        while new_ll < ll - 1e-10 and halvings < 30:
            step = step / 2.0
            new_ll = _logistic_loglik(x, y, beta + step)
            halvings += 1
        if new_ll < ll - 1e-10:
            break
        beta = beta + step
        trace.append(new_ll)
        if np.max(np.abs(beta)) > SEPARATION_NORM:
            raise SeparationError(
                f"coefficient norm exceeded {SEPARATION_NORM}: complete separation likely"
            )
        delta = np.max(np.abs(step)) / (1.0 + np.max(np.abs(beta)))
        ll = new_ll
        if delta < REL_TOL:
            converged = True
            break
    return GlmFit("logistic", beta, spec, converged=converged, iterations=iterations,
                  loglik_trace=tuple(trace))


# --- beta regression --------------------------------------------------------


def beta_loglik(x: np.ndarray, y: np.ndarray, beta: np.ndarray, phi: float) -> float:
    mu = expit(x @ beta)
    mu = np.clip(mu, 1e-12, 1.0 - 1e-12)
    a = mu * phi
    b = (1.0 - mu) * phi
    return float(
        np.sum(
            gammaln(phi) - gammaln(a) - gammaln(b)
            + (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y)
        )
    )


def _beta_score(x: np.ndarray, y: np.ndarray, beta: np.ndarray, zeta: float) -> np.ndarray:
    """Analytic score in (beta, zeta) with zeta = log(phi)."""
    phi = np.exp(zeta)
    mu = np.clip(expit(x @ beta), 1e-12, 1.0 - 1e-12)
    a, b = mu * phi, (1.0 - mu) * phi
    ystar = np.log(y) - np.log1p(-y)
    mustar = digamma(a) - digamma(b)
    d_beta = x.T @ (phi * (ystar - mustar) * mu * (1.0 - mu))
    d_phi = np.sum(
        digamma(phi) - mu * digamma(a) - (1.0 - mu) * digamma(b)
        + mu * np.log(y) + (1.0 - mu) * np.log1p(-y)
    )
    return np.append(d_beta, phi * d_phi)


def fit_beta(
    cols: Mapping[str, np.ndarray],
    y: np.ndarray,
    spec: FeatureSpec,
    compress_boundary: bool = False,
) -> GlmFit:
    """Beta-regression MLE: logit-link mean, constant precision.

    Newton iteration with the analytic score (Hessian by central differences
    of the score) and step-halving on the log-likelihood. Responses at 0 or 1
    are refused unless compress_boundary applies (y*(n-1)+0.5)/n first.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0) or np.any(y >= 1.0):
        if not compress_boundary:
            raise InputError(
                "beta responses must lie strictly in (0, 1); "
                "pass compress_boundary=True to apply (y*(n-1)+0.5)/n"
            )
        n = len(y)
        y = (y * (n - 1) + 0.5) / n
    x = spec.matrix(cols)
    _check_design(x, spec)

    # start values: OLS on the logit scale, moment estimate for phi
    ystar = np.log(y) - np.log1p(-y)
    beta = np.linalg.lstsq(x, ystar, rcond=None)[0]
    mu0 = np.clip(expit(x @ beta), 1e-6, 1.0 - 1e-6)
    resid_var = max(float(np.var(y - mu0, ddof=min(len(y) - 1, spec.n_params))), 1e-12)
    phi0 = max(float(np.mean(mu0 * (1.0 - mu0)) / resid_var - 1.0), 0.1)
    theta = np.append(beta, np.log(phi0))

    def loglik(th: np.ndarray) -> float:
        return beta_loglik(x, y, th[:-1], float(np.exp(np.clip(th[-1], -30, 30))))

    ll = loglik(theta)
    trace = [ll]
    converged = False
    iterations = 0
    eye = np.eye(theta.size)
    for iterations in range(1, MAX_ITER + 1):
        score_vec = _beta_score(x, y, theta[:-1], float(theta[-1]))
        # numeric Hessian of the analytic score (small p; robust and simple)
        h = 1e-6 * (1.0 + np.abs(theta))
        hess = np.empty((theta.size, theta.size))
        for j in range(theta.size):
            sp = _beta_score(x, y, *_split(theta + h[j] * eye[j]))
            sm = _beta_score(x, y, *_split(theta - h[j] * eye[j]))
            hess[:, j] = (sp - sm) / (2.0 * h[j])
        hess = 0.5 * (hess + hess.T)
        try:
            step = -np.linalg.solve(hess - 1e-10 * eye, score_vec)
        except np.linalg.LinAlgError:
            step = score_vec / max(np.abs(score_vec).max(), 1.0)
        if not np.all(np.isfinite(step)):
            break
        norm = np.max(np.abs(step))
        if norm > 10.0:
            step = step * (10.0 / norm)
        new_ll = loglik(theta + step)
        halvings = 0
        while (not np.isfinite(new_ll) or new_ll < ll - 1e-10) and halvings < 30:
            step = step / 2.0
            new_ll = loglik(theta + step)
            halvings += 1
        if not np.isfinite(new_ll) or new_ll < ll - 1e-10:
            break
        theta = theta + step
        trace.append(new_ll)
        delta = np.max(np.abs(step)) / (1.0 + np.max(np.abs(theta)))
        ll = new_ll
        if delta < REL_TOL:
            converged = True
            break
    phi = float(np.exp(theta[-1]))
    if phi <= 0 or not np.isfinite(phi):
        raise ConvergenceError("beta regression produced a non-positive precision")
    return GlmFit("beta", theta[:-1], spec, dispersion=phi, converged=converged,
                  iterations=iterations, loglik_trace=tuple(trace))


def _split(theta: np.ndarray):
    return theta[:-1], float(theta[-1])


# --- joint mean/variance (heteroscedastic Gaussian MLE) -----------------------


def fit_joint_mean_variance(
    cols: Mapping[str, np.ndarray],
    y: np.ndarray,
    mean_spec: FeatureSpec,
    var_spec: FeatureSpec,
    robust: bool = False,
    reml: bool = True,
    max_rounds: int = 8,
) -> tuple[MeanModelFit, VarianceModelFit]:
    """Alternate precision-weighted mean fits and variance fits to the MLE.

    This is the estimation path for heteroscedastic Gaussian data: the mean is
    refit with weights 1/Var-hat until both fits stabilize.
    """
    mean_fit = fit_mean(cols, y, mean_spec, robust=robust)
    var_fit = fit_variance(cols, y, mean_fit, var_spec, reml=reml)
    for _ in range(max_rounds):
        fitted = var_fit.predict(cols)
        # relative floor: keeps the alternation from collapsing onto a
        # near-interpolated subset (unbounded-likelihood degeneracy)
        floor = 0.01 * float(np.median(fitted))
        weights = 1.0 / np.maximum(fitted, max(floor, 1e-300))
        new_mean = fit_mean(cols, y, mean_spec, robust=robust, variance_weights=weights)
        new_var = fit_variance(cols, y, new_mean, var_spec, reml=reml)
        shift = max(
            np.max(np.abs(new_mean.coefficients - mean_fit.coefficients)),
            np.max(np.abs(new_var.coefficients - var_fit.coefficients)),
        )
        mean_fit, var_fit = new_mean, new_var
        if shift < 1e-9:
            break
    return mean_fit, var_fit


# --- proportion of variance explained ----------------------------------------


def compute_pve(mean_fit_w0, frame, var_y: Optional[float] = None) -> float:
    """Var-hat[E(Y|W0)] / Var-hat(Y) over a frame, clipped to [0, 1].

    Var(Y) comes from var_y when given, otherwise from the frame's observed
    outcomes (pilot and second-phase rows).
    """
    from .featurespec import columns_from_arrays

    preds = mean_fit_w0.predict(columns_from_arrays(frame.w0))
    explained = float(np.var(preds, ddof=0))
    if var_y is None:
        observed = ~np.isnan(frame.y)
        if observed.sum() < 2:
            raise InputError("no observed outcomes to estimate Var(Y) from")
        var_y = float(np.var(frame.y[observed], ddof=1))
    if var_y <= 0:
        raise InputError("outcome variance must be positive")
    return float(np.clip(explained / var_y, 0.0, 1.0))
