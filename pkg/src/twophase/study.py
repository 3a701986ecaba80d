"""End-to-end sampling-and-estimation pipeline plus the Monte Carlo study.

Each replication generates a population, fits pilot models, solves the
optimal second-phase rule, draws, and estimates the mean under every
configured approach: naive random sampling with the sample mean ("1"),
random sampling with the doubly-robust estimator ("2"), and the optimal
design with the doubly-robust estimator under a correctly specified ("3a"),
misspecified ("3b"), or known-truth ("3c") variance model.

Approach draws share one uniform vector per replication (common random
numbers), and every replication derives its seeds from (study seed, rep
index), so results are invariant to execution order and worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT_GAMMA_SHAPE, SimulationConfig
from .design import DesignInputs, baseline_lambda2, optimal_lambda2
from .errors import ConvergenceError, InputError, TwophaseError
from .estimator import InfluenceContext, rr_estimate
from .featurespec import FeatureSpec, columns_from_arrays, linear_spec
from .frames import ExternalProbabilitySample, IndividualLevel, generate_population
from .regress import VarianceModelFit, fit_joint_mean_variance, fit_mean
from .selection import SelectionModel, fit_composed, fit_direct, known_selection

MEAN_SPEC = linear_spec(["w0_1", "w1_1"])
MEAN_SPEC_W0 = linear_spec(["w0_1"])
VAR_SPEC_FULL = linear_spec(["w0_1", "w1_1"], squares=True)
VAR_SPEC_NOSQ = linear_spec(["w0_1", "w1_1"])


# --- gamma calibration --------------------------------------------------------


def calibrate_gamma(
    pve_target: float,
    alpha,
    base_gamma_shape=DEFAULT_GAMMA_SHAPE,
    w_mean: float = 3.3,
    w_sd: float = 0.5,
    tol: float = 0.01,
    n_draws: int = 100_000,
    seed: int = 0,
) -> tuple[float, ...]:
    """Bisect the log-variance intercept until the Monte Carlo proportion of
    variance explained hits the target.

    The slope shape stays fixed; the same covariate draws are reused across
    bisection steps, making the objective exactly monotone in the intercept.
    """
    if not 0.0 < pve_target < 1.0:
        raise InputError("pve_target must lie in (0, 1)")
    a0, a1, a2 = (float(a) for a in alpha)
    g0, g1, g2, g3 = (float(g) for g in base_gamma_shape)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xCA11)))
    w0 = rng.normal(w_mean, w_sd, size=int(n_draws))
    w1 = rng.normal(w_mean, w_sd, size=int(n_draws))
    mean_w0 = a0 + a1 * w0 + a2 * w_mean
    mean_w1bar = a0 + a1 * w0 + a2 * w1
    var_explained = float(np.var(mean_w0))
    var_mean = float(np.var(mean_w1bar))
    slope_lp = g0 * w0 + g1 * w0**2 + g2 * w1 + g3 * w1**2

    def pve_at(g00: float) -> float:
        ev = float(np.mean(np.exp(np.clip(g00 + slope_lp, -700, 700))))
        return var_explained / (var_mean + ev)

    lo, hi = -20.0, 5.0
    if not pve_at(hi) <= pve_target <= pve_at(lo):
        raise InputError(
            f"pve_target={pve_target} unreachable for intercepts in [-20, 5]"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pve_at(mid) > pve_target:
            lo = mid  # larger intercept -> more noise -> smaller pve
        else:
            hi = mid
        if abs(pve_at(0.5 * (lo + hi)) - pve_target) <= tol * 0.1:
            break
    g00 = 0.5 * (lo + hi)
    if abs(pve_at(g00) - pve_target) > tol:
        raise InputError(f"calibration missed the target by more than {tol}")
    return (g00, g0, g1, g2, g3)


def resolve_gamma(config: SimulationConfig) -> SimulationConfig:
    if config.gamma is not None:
        return config
    return config.with_gamma(
        calibrate_gamma(config.pve_target, config.alpha, w_mean=config.w_mean, w_sd=config.w_sd)
    )


# --- study results ------------------------------------------------------------


@dataclass(frozen=True)
class StudyResult:
    """Per-replication estimates plus failure records for one study run."""

    approaches: tuple[str, ...]
    estimates: dict[str, np.ndarray]  # NaN where the replication failed
    failures: tuple[tuple[int, str], ...]  # (rep index, reason)
    budget_checks: np.ndarray  # formula cost of the solved rule per rep (NaN if none)
    config: SimulationConfig = field(repr=False)
    seed: int = 0
    elapsed_seconds: float = 0.0  # informational; excluded from serialization

    @property
    def n_reps(self) -> int:
        return self.config.n_reps

    def ok_mask(self) -> np.ndarray:
        ok = np.ones(self.n_reps, dtype=bool)
        for rep, _ in self.failures:
            ok[rep] = False
        return ok

    def mc_stats(self) -> dict[str, dict[str, float]]:
        ok = self.ok_mask()
        out = {}
        for a in self.approaches:
            vals = self.estimates[a][ok]
            vals = vals[~np.isnan(vals)]
            out[a] = {
                "mean": float(np.mean(vals)) if vals.size else float("nan"),
                "variance": float(np.var(vals, ddof=1)) if vals.size > 1 else float("nan"),
                "n": int(vals.size),
            }
        return out

    def records(self) -> list[tuple[int, str, float, bool, int]]:
        """Flat (rep, approach, beta_hat, feasible, seed) rows."""
        ok = self.ok_mask()
        rows = []
        for rep in range(self.n_reps):
            rep_seed = derive_seed(self.seed, rep)
            for a in self.approaches:
                rows.append(
                    (rep, a, float(self.estimates[a][rep]), bool(ok[rep]), rep_seed)
                )
        return rows

    def to_dict(self) -> dict:
        stats = self.mc_stats()
        try:
            table = compare_designs(self)
        except InputError:
            table = None
        return {
            "n_reps": int(self.n_reps),
            "approaches": list(self.approaches),
            "stats": stats,
            "re_table": table,
            "n_failures": len(self.failures),
            "failures": [[int(r), reason] for r, reason in self.failures],
            "seed": int(self.seed),
        }


def compare_designs(result: StudyResult) -> dict:
    """Relative-efficiency table: each approach versus approach 1, plus the
    optimal-design-versus-random contrast, with jackknife standard errors."""
    ok = result.ok_mask()
    present = [a for a in result.approaches if np.sum(~np.isnan(result.estimates[a][ok])) >= 30]
    if not present:
        raise InputError("no approach has 30 successful replications")
    if len(present) == 1:
        # degenerate self-ratio table
        return {"vs_1": {present[0]: {"re": 1.0, "jackknife_se": 0.0}}, "contrasts": {}}
    table: dict = {"vs_1": {}, "contrasts": {}}
    if "1" in present:
        for a in present:
            re, se = _jackknife_ratio(
                result.estimates[a][ok], result.estimates["1"][ok]
            )
            table["vs_1"][a] = {"re": re, "jackknife_se": se}
    if "3a" in present and "2" in present:
        re, se = _jackknife_ratio(result.estimates["3a"][ok], result.estimates["2"][ok])
        table["contrasts"]["3a_vs_2"] = {"re": re, "jackknife_se": se}
    return table


def _jackknife_ratio(num_vals: np.ndarray, den_vals: np.ndarray) -> tuple[float, float]:
    """Delete-one jackknife SE for var(num)/var(den) over paired replications."""
    keep = ~np.isnan(num_vals) & ~np.isnan(den_vals)
    x, y = num_vals[keep], den_vals[keep]
    n = x.size
    if n < 3:
        raise InputError("too few paired replications for a ratio")
    vx = float(np.var(x, ddof=1))
    vy = float(np.var(y, ddof=1))
    if vy == 0:
        raise InputError("degenerate denominator variance")
    ratio = vx / vy
    # leave-one-out variances in O(n) from running sums
    sx, sxx = x.sum(), (x**2).sum()
    sy, syy = y.sum(), (y**2).sum()
    mx = (sx - x) / (n - 1)
    my = (sy - y) / (n - 1)
    vx_i = (sxx - x**2 - (n - 1) * mx**2) / (n - 2)
    vy_i = (syy - y**2 - (n - 1) * my**2) / (n - 2)
    r_i = vx_i / vy_i
    se = math.sqrt((n - 1) / n * float(np.sum((r_i - r_i.mean()) ** 2)))
    return ratio, se


# --- single replication -------------------------------------------------------


def derive_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence((int(seed), int(rep))).generate_state(1)[0])


def _variance_fits(config, cols_pilot, y_pilot, robust):
    """Joint mean/variance fits on the pilot for each variance-model variant."""
    mean_fit, var_full = fit_joint_mean_variance(
        cols_pilot, y_pilot, MEAN_SPEC, VAR_SPEC_FULL, robust=robust
    )
    _, var_nosq = fit_joint_mean_variance(
        cols_pilot, y_pilot, MEAN_SPEC, VAR_SPEC_NOSQ, robust=robust
    )
    return mean_fit, {"3a": var_full, "2": var_full, "3b": var_nosq}


VAR_FLOOR_FRACTION = 0.01  # of the median fitted variance


def bounded_variance_fn(var_fit: VarianceModelFit, cols_fit):
    """Evaluator for a fitted log-linear variance, bounded to the fitted range.

    Two guards against small-pilot pathologies, neither binding on honest
    fits: the linear predictor is clipped to its fitted span (quadratic
    log-variance models extrapolate explosively), and the result is floored
    at a fraction of the median fitted variance (near-zero fitted variances
    on a subset otherwise produce unbounded precision weights and starved
    sampling rules).
    """
    lp_fit = var_fit.spec.matrix(cols_fit) @ var_fit.coefficients
    lo, hi = float(np.min(lp_fit)), float(np.max(lp_fit))
    floor = VAR_FLOOR_FRACTION * float(np.exp(np.median(lp_fit)))

    def v2_fn(w0, w1):
        cols = columns_from_arrays(w0, w1)
        lp = var_fit.spec.matrix(cols) @ var_fit.coefficients
        return np.maximum(np.exp(np.clip(lp, lo, hi)), floor)

    return v2_fn


def _true_variance_fit(config) -> VarianceModelFit:
    g00, g0, g1, g2, g3 = config.gamma
    return VarianceModelFit(
        coefficients=np.array([g00, g0, g1, g2, g3]),
        spec=FeatureSpec(("1", "w0_1", "w0_1^2", "w1_1", "w1_1^2")),
        converged=True,
        iterations=0,
    )


def _selection_for_mode(config, frame, rng) -> SelectionModel:
    if config.lambda1_mode == "known":
        return known_selection(config.lambda1.evaluate)
    if config.lambda1_mode == "direct":
        return fit_direct(frame)
    # composed: synthesize a disjoint external probability sample from the
    # non-cohort rows at a known constant rate
    outside = np.flatnonzero(frame.r1 == 0)
    if outside.size == 0:
        raise InputError("composed mode needs non-cohort rows for the external sample")
    p_ext = 0.05
    take = outside[rng.random(outside.size) < p_ext]
    if take.size < 10:
        raise InputError("external sample too small to fit the composition")
    external = ExternalProbabilitySample(
        w0=frame.w0[take], samp_prob=np.full(take.size, p_ext)
    )
    return fit_composed(frame.w0[frame.ehr_ids], external)


def run_replication(
    config: SimulationConfig,
    rep: int,
    seed: int,
    baseline_population: str = "nominal",
    robust_means: bool = False,
    estimation_rows: str = "measured",
) -> dict:
    """Execute one full replication; returns estimates plus diagnostics."""
    rep_seed = derive_seed(seed, rep)
    frame = generate_population(config, rep_seed)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), int(rep), 0xD0)))

    ehr = frame.ehr_ids
    pilot = frame.pilot_ids
    cols_pilot = columns_from_arrays(frame.w0[pilot], frame.w1[pilot])
    y_pilot = frame.y[pilot]
    _, var_fits = _variance_fits(config, cols_pilot, y_pilot, robust_means)
    # fitted models get the extrapolation bound; the known-truth variant ("3c")
    # is evaluated as-is
    v2_fns = {a: bounded_variance_fn(fit, cols_pilot) for a, fit in var_fits.items()}
    var_fits = dict(var_fits)
    var_fits["3c"] = _true_variance_fit(config)
    v2_fns["3c"] = lambda w0, w1: var_fits["3c"].predict(columns_from_arrays(w0, w1))

    selection = _selection_for_mode(config, frame, rng)
    lam1_ehr = selection.evaluate(frame.w0[ehr])

    # population expectations estimated from the cohort by inverse weighting;
    # the budget identity then matches the realized cohort spend exactly
    inv = 1.0 / lam1_ehr
    p1 = inv / inv.sum()
    n_model = float(inv.sum())

    def make_inputs(v2_fn) -> DesignInputs:
        return DesignInputs(
            support_w0=frame.w0[ehr],
            support_w1=frame.w1[ehr],
            p1=p1,
            v2=v2_fn(frame.w0[ehr], frame.w1[ehr]),
            v1=np.zeros(ehr.size),
            selection=selection,
            cost=config.cost,
            n=n_model,
            n_e=frame.n_e,
            v2_fn=v2_fn,
        )

    u = rng.random(ehr.size)  # common random numbers across approaches
    out: dict = {"estimates": {}, "budget_check": float("nan")}

    base_inputs = make_inputs(v2_fns["2"])
    n_base = config.n if baseline_population == "nominal" else n_model
    lam2_base = baseline_lambda2(base_inputs, n=n_base)
    if np.any(lam2_base > 1.0):
        raise InputError("baseline rule exceeds 1; budget too generous for n")

    rules: dict[str, np.ndarray] = {}
    for a in config.approaches:
        if a in ("1", "2"):
            rules[a] = lam2_base
        else:
            solution = optimal_lambda2(make_inputs(v2_fns[a]))
            if not solution.feasible:
                raise InputError(f"approach {a}: infeasible design (cap violations "
                                 f"{solution.cap_violations})")
            rules[a] = solution.lambda2
            if a == "3a":
                out["budget_check"] = solution.budget_spent

    for a in config.approaches:
        lam2 = rules[a]
        drawn = u < lam2
        s2_rows = ehr[drawn]
        if s2_rows.size == 0:
            raise InputError(f"approach {a}: empty second-phase draw")
        if a == "1":
            y_latent = frame.y_latent
            out["estimates"][a] = float(np.mean(y_latent[s2_rows]))
            continue
        lam2_col = np.full(frame.n, np.nan)
        lam2_col[ehr] = lam2
        r2 = np.zeros(frame.n, dtype=np.int8)
        r2[s2_rows] = 1
        drawn_frame = frame.with_second_phase(r2=r2, lambda2=lam2_col)
        mean_w0, mean_w1 = _estimation_means(
            drawn_frame, v2_fns[a], estimation_rows, robust_means
        )
        ctx = InfluenceContext(
            selection=selection,
            mean_w0=mean_w0,
            mean_w1=mean_w1,
            w0_source=IndividualLevel(drawn_frame),
        )
        out["estimates"][a] = float(rr_estimate(ctx, drawn_frame, n_population=config.n))
    return out


def _estimation_means(frame, v2_fn, estimation_rows, robust):
    if estimation_rows == "pilot":
        rows = frame.pilot_ids
    elif estimation_rows == "second_phase":
        rows = frame.second_phase_ids
    else:
        rows = np.flatnonzero(~np.isnan(frame.y))
    cols = columns_from_arrays(frame.w0[rows], frame.w1[rows])
    cols0 = columns_from_arrays(frame.w0[rows])
    y = frame.y[rows]
    weights = 1.0 / np.maximum(v2_fn(frame.w0[rows], frame.w1[rows]), 1e-300)
    mean_w1 = fit_mean(cols, y, MEAN_SPEC, robust=robust, variance_weights=weights)
    mean_w0 = fit_mean(cols0, y, MEAN_SPEC_W0, robust=robust, variance_weights=weights)
    return mean_w0, mean_w1


# --- the study loop -----------------------------------------------------------


def _replication_batch(args) -> list[tuple[int, dict | str]]:
    config, reps, seed, baseline_population, robust_means, estimation_rows = args
    results = []
    for rep in reps:
        try:
            results.append(
                (rep, run_replication(config, rep, seed, baseline_population,
                                      robust_means, estimation_rows))
            )
        except TwophaseError as exc:
            results.append((rep, f"{type(exc).__name__}: {exc}"))
        except np.linalg.LinAlgError as exc:
            results.append((rep, f"LinAlgError: {exc}"))
    return results


def run_study(
    config: SimulationConfig,
    workers: int = 1,
    baseline_population: str = "nominal",
    robust_means: bool = False,
    estimation_rows: str = "measured",
) -> StudyResult:
    """Run the full Monte Carlo study.

    Replications failing with a recorded reason are excluded from the
    aggregates; more than 5% failures aborts. baseline_population picks the
    population size in the random-sampling comparator: "nominal" uses the
    configured n (the literature's comparator), "estimated" uses the
    inverse-probability estimate implied by the realized cohort, which makes
    the comparator spend the same realized budget as the optimal rule.
    """
    import time

    t0 = time.monotonic()
    config = resolve_gamma(config)
    if baseline_population not in ("nominal", "estimated"):
        raise InputError(f"unknown baseline_population {baseline_population!r}")
    if estimation_rows not in ("pilot", "second_phase", "measured"):
        raise InputError(f"unknown estimation_rows {estimation_rows!r}")
    seed = config.seed
    reps = list(range(config.n_reps))

    def batch_args(rep_list):
        return (config, rep_list, seed, baseline_population, robust_means, estimation_rows)

    if workers <= 1:
        batches = [_replication_batch(batch_args(reps))]
    else:
        chunks = np.array_split(np.asarray(reps), workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(
                pool.map(
                    _replication_batch,
                    [batch_args(chunk.tolist()) for chunk in chunks if chunk.size],
                )
            )

    estimates = {a: np.full(config.n_reps, np.nan) for a in config.approaches}
    budget_checks = np.full(config.n_reps, np.nan)
    failures: list[tuple[int, str]] = []
    for batch in batches:
        for rep, payload in batch:
            if isinstance(payload, str):
                failures.append((rep, payload))
                continue
            for a, val in payload["estimates"].items():
                estimates[a][rep] = val
            budget_checks[rep] = payload["budget_check"]
    failures.sort()
    if len(failures) > 0.05 * config.n_reps:
        raise ConvergenceError(
            f"{len(failures)} of {config.n_reps} replications failed (>5%); "
            f"first: {failures[0]}"
        )
    return StudyResult(
        approaches=tuple(config.approaches),
        estimates=estimates,
        failures=tuple(failures),
        budget_checks=budget_checks,
        config=config,
        seed=seed,
        elapsed_seconds=time.monotonic() - t0,
    )
