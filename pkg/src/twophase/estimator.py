"""Doubly-robust mean estimation with bootstrap inference.

The point estimate decomposes into three terms: a population imputation mean,
a first-phase augmentation correcting the cohort's selection bias, and a
second-phase inverse-probability-weighted residual term. The estimate is
consistent when either the selection probabilities or the outcome regressions
are correctly specified.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConvergenceError, InputError
from .featurespec import columns_from_arrays
from .frames import (
    ExternalProbabilitySample,
    Individual,
    IndividualLevel,
    KnownDistribution,
    PopulationFrame,
    W0Source,
)
from .regress import MeanModelFit, fit_mean
from .selection import SelectionModel

GAUSS_HERMITE_NODES = 64


@dataclass(frozen=True)
class EstimateResult:
    beta_hat: float
    ci_lo: float
    ci_hi: float
    boot_var: float
    n_boot: int
    components: tuple[float, float, float]  # imputation, phase-1 aug, phase-2 ipw
    seed: int

    def to_dict(self) -> dict:
        return {
            "beta_hat": float(self.beta_hat),
            "ci": [float(self.ci_lo), float(self.ci_hi)],
            "boot_var": float(self.boot_var),
            "n_boot": int(self.n_boot),
            "components": {
                "imputation": float(self.components[0]),
                "phase1_augmentation": float(self.components[1]),
                "phase2_ipw": float(self.components[2]),
            },
            "seed": int(self.seed),
        }


@dataclass(frozen=True)
class InfluenceContext:
    """Everything the estimating function needs besides the data."""

    selection: SelectionModel
    mean_w0: MeanModelFit
    mean_w1: MeanModelFit
    w0_source: W0Source
    lambda2_rule: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = field(
        default=None, repr=False
    )

    def lambda2_for(self, frame: PopulationFrame, rows: np.ndarray) -> np.ndarray:
        """Second-phase probabilities for the given rows: recorded values
        first, the design rule as fallback."""
        vals = frame.lambda2[rows].copy()
        missing = np.isnan(vals)
        if np.any(missing):
            if self.lambda2_rule is None:
                raise InputError("lambda2 missing on rows and no rule supplied")
            sub = rows[missing]
            vals[missing] = self.lambda2_rule(frame.w0[sub], frame.w1[sub])
        if np.any(vals <= 0):
            raise InputError("second-phase probability evaluated as 0")
        return vals


def influence(ctx: InfluenceContext, individual: Individual, beta: float) -> float:
    """Efficient estimating-function value for one individual at beta.

    Terms multiplied by absent indicators contribute zero without touching
    missing fields; the second-phase probability cancels algebraically for
    undrawn first-phase rows.
    """
    w0 = np.asarray(individual.w0, dtype=float).reshape(1, -1)
    lam1 = float(ctx.selection.evaluate(w0)[0])
    e0 = float(ctx.mean_w0.predict(columns_from_arrays(w0))[0])
    value = -((individual.r1 - lam1) / lam1) * (e0 - beta)
    if individual.r1 == 0:
        return value
    if individual.w1 is None:
        raise InputError("first-phase row lacks auxiliary covariates")
    w1 = np.asarray(individual.w1, dtype=float).reshape(1, -1)
    e1 = float(ctx.mean_w1.predict(columns_from_arrays(w0, w1))[0])
    if individual.r2 == 0:
        # (r2 - lam2*r1)/(lam1*lam2) collapses to -1/lam1
        return value + (e1 - beta) / lam1
    if individual.y is None:
        raise InputError("second-phase row lacks the outcome")
    lam2 = individual.lambda2
    if lam2 is None:
        raise InputError("second-phase row lacks its sampling probability")
    value += (individual.y - beta) / (lam1 * lam2)
    value -= ((1.0 - lam2) / (lam1 * lam2)) * (e1 - beta)
    return value


def impute_population_mean(mean_w0: MeanModelFit, source: W0Source) -> float:
    """Population mean of the fitted w0-regression under a covariate source.

    Individual-level: plain average of predictions. Known distribution:
    probability-weighted sum for a discrete pmf, Gauss-Hermite quadrature (64
    nodes per dimension) for normal components. External probability sample:
    Hajek-normalized inverse-probability average.
    """
    if isinstance(source, IndividualLevel):
        frame = source.frame
        if frame.n == 0:
            raise InputError("empty population frame")
        return float(np.mean(mean_w0.predict(columns_from_arrays(frame.w0))))
    if isinstance(source, KnownDistribution):
        if source.points is not None:
            preds = mean_w0.predict(columns_from_arrays(source.points))
            return float(np.sum(np.asarray(source.probs) * preds))
        nodes, weights = np.polynomial.hermite.hermgauss(GAUSS_HERMITE_NODES)
        weights = weights / np.sqrt(np.pi)
        dims = source.normal_mean.shape[0]
        axes = [source.normal_mean[d] + np.sqrt(2.0) * source.normal_sd[d] * nodes
                for d in range(dims)]
        if dims == 1:
            pts = axes[0].reshape(-1, 1)
            wts = weights
        else:
            g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
            pts = np.column_stack([g0.ravel(), g1.ravel()])
            wts = np.outer(weights, weights).ravel()
        preds = mean_w0.predict(columns_from_arrays(pts))
        return float(np.sum(wts * preds))
    if isinstance(source, ExternalProbabilitySample):
        inv = 1.0 / np.asarray(source.samp_prob, dtype=float)
        preds = mean_w0.predict(columns_from_arrays(source.w0))
        return float(np.sum(inv * preds) / np.sum(inv))
    raise InputError(f"unknown w0 source {type(source).__name__}")


def _component_terms(
    ctx: InfluenceContext, frame: PopulationFrame, n_population: Optional[float]
) -> tuple[float, float, float, float]:
    ehr = frame.ehr_ids
    s2 = frame.second_phase_ids
    if s2.size == 0:
        raise InputError("no second-phase rows to estimate from")
    lam1_ehr = ctx.selection.evaluate(frame.w0[ehr])
    if n_population is None:
        if isinstance(ctx.w0_source, IndividualLevel):
            n_population = float(frame.n)
        else:
            n_population = float(np.sum(1.0 / lam1_ehr))
    cols_ehr = columns_from_arrays(frame.w0[ehr], frame.w1[ehr])
    e1_ehr = ctx.mean_w1.predict(cols_ehr)
    e0_ehr = ctx.mean_w0.predict(columns_from_arrays(frame.w0[ehr]))

    t0 = impute_population_mean(ctx.mean_w0, ctx.w0_source)
    t1 = float(np.sum((e1_ehr - e0_ehr) / lam1_ehr)) / n_population

    lam1_s2 = ctx.selection.evaluate(frame.w0[s2])
    lam2_s2 = ctx.lambda2_for(frame, s2)
    e1_s2 = ctx.mean_w1.predict(columns_from_arrays(frame.w0[s2], frame.w1[s2]))
    t2 = float(np.sum((frame.y[s2] - e1_s2) / (lam1_s2 * lam2_s2))) / n_population
    return t0, t1, t2, n_population


def rr_estimate(
    ctx: InfluenceContext,
    frame: PopulationFrame,
    n_population: Optional[float] = None,
) -> float:
    """Point estimate of the population mean outcome.

    n_population defaults to the frame size under an individual-level source
    and to the inverse-probability population-size estimate otherwise.
    """
    t0, t1, t2, _ = _component_terms(ctx, frame, n_population)
    return t0 + t1 + t2


def bootstrap_ci(
    ctx: InfluenceContext,
    frame: PopulationFrame,
    n_boot: int,
    seed: int,
    refit: bool = True,
    fit_rows: str = "pilot",
    robust: bool = False,
    n_population: Optional[float] = None,
) -> EstimateResult:
    """Percentile bootstrap for the mean estimate.

    Second-phase rows are resampled with replacement; with refit=True the
    fitting pool (pilot, second_phase, or all measured rows) is resampled too
    and both mean models are refit per replicate. Design probabilities stay
    fixed. Replicates that fail numerically are redrawn (at most 100 retries).
    """
    if n_boot < 100:
        raise InputError("need at least 100 bootstrap replicates")
    if fit_rows not in ("pilot", "second_phase", "measured"):
        raise InputError(f"unknown fitting pool {fit_rows!r}")
    ehr = frame.ehr_ids
    s2 = frame.second_phase_ids
    if s2.size == 0:
        raise InputError("no second-phase rows to resample")

    t0, t1, t2, n_pop = _component_terms(ctx, frame, n_population)
    beta_hat = t0 + t1 + t2

    lam1_ehr = ctx.selection.evaluate(frame.w0[ehr])
    lam1_s2 = ctx.selection.evaluate(frame.w0[s2])
    lam2_s2 = ctx.lambda2_for(frame, s2)
    ipw_s2 = 1.0 / (lam1_s2 * lam2_s2)

    if fit_rows == "pilot":
        pool = frame.pilot_ids
    elif fit_rows == "second_phase":
        pool = s2
    else:
        pool = np.flatnonzero(~np.isnan(frame.y))
    if refit and pool.size == 0:
        raise InputError(f"empty fitting pool {fit_rows!r}")

    cols_ehr = columns_from_arrays(frame.w0[ehr], frame.w1[ehr])
    x1_ehr = ctx.mean_w1.spec.matrix(cols_ehr)
    x0_ehr = ctx.mean_w0.spec.matrix(columns_from_arrays(frame.w0[ehr]))
    x1_s2_full = ctx.mean_w1.spec.matrix(
        columns_from_arrays(frame.w0[s2], frame.w1[s2])
    )

    estimates = np.empty(n_boot)
    for b in range(n_boot):
        # per-replicate derived seed: deterministic for any worker split
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xB007, b)))
        ok = False
        for _ in range(100):
            take = rng.integers(0, s2.size, s2.size)
            if refit:
                fit_take = pool[rng.integers(0, pool.size, pool.size)]
                try:
                    m0, m1 = _refit_means(ctx, frame, fit_take, robust)
                except (InputError, ConvergenceError):
                    continue
                rep_ctx = InfluenceContext(
                    selection=ctx.selection, mean_w0=m0, mean_w1=m1,
                    w0_source=_rebind_source(ctx.w0_source, frame),
                    lambda2_rule=ctx.lambda2_rule,
                )
                b_t0 = impute_population_mean(m0, rep_ctx.w0_source)
                e1_ehr = x1_ehr @ m1.coefficients
                e0_ehr = x0_ehr @ m0.coefficients
                e1_s2 = x1_s2_full @ m1.coefficients
            else:
                b_t0 = t0
                e1_ehr = x1_ehr @ ctx.mean_w1.coefficients
                e0_ehr = x0_ehr @ ctx.mean_w0.coefficients
                e1_s2 = x1_s2_full @ ctx.mean_w1.coefficients
            b_t1 = float(np.sum((e1_ehr - e0_ehr) / lam1_ehr)) / n_pop
            b_t2 = float(np.sum((frame.y[s2][take] - e1_s2[take]) * ipw_s2[take])) / n_pop
            value = b_t0 + b_t1 + b_t2
            if np.isfinite(value):
                estimates[b] = value
                ok = True
                break
        if not ok:
            raise ConvergenceError(f"bootstrap replicate {b} failed after 100 retries")

    ci_lo, ci_hi = np.percentile(estimates, [2.5, 97.5])
    return EstimateResult(
        beta_hat=float(beta_hat),
        ci_lo=float(min(ci_lo, ci_hi)),
        ci_hi=float(max(ci_lo, ci_hi)),
        boot_var=float(np.var(estimates, ddof=1)),
        n_boot=int(n_boot),
        components=(float(t0), float(t1), float(t2)),
        seed=int(seed),
    )


def _refit_means(ctx, frame, rows, robust):
    cols01 = columns_from_arrays(frame.w0[rows], frame.w1[rows])
    cols0 = columns_from_arrays(frame.w0[rows])
    y = frame.y[rows]
    if np.any(np.isnan(y)):
        raise InputError("fitting pool contains unmeasured outcomes")
    m1 = fit_mean(cols01, y, ctx.mean_w1.spec, robust=robust)
    m0 = fit_mean(cols0, y, ctx.mean_w0.spec, robust=robust)
    return m0, m1


def _rebind_source(source: W0Source, frame: PopulationFrame) -> W0Source:
    if isinstance(source, IndividualLevel):
        return IndividualLevel(frame)
    return source
