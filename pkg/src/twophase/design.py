"""Budget-optimal second-phase sampling: the closed-form rule and diagnostics.

Inputs live on a discrete support of the auxiliary covariates (an explicit
probability table, or an empirical sample standing in for a continuous
density). The optimal second-phase probability is proportional to the square
root of the cost-standardized conditional outcome variance, scaled so the
expected spend exhausts the budget, and divided by the first-phase inclusion
probability. Solutions violating the probability cap are reported infeasible,
never silently clipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .costs import CostModel
from .errors import InfeasibleDesignError, InputError
from .featurespec import as_columns
from .frames import IndividualLevel, KnownDistribution, PopulationFrame, W0Source
from .selection import SelectionModel

V2_FLOOR_FRACTION = 1e-8  # relative floor keeping the rule positive


@dataclass(frozen=True)
class DesignInputs:
    """Everything the optimizer needs, evaluated on a discrete support.

    support_w0/support_w1: (K, k) covariate values per support point.
    p1: support probabilities (sum 1). v2: conditional outcome variance on
    the support. v1: residual first-phase variance component per point
    (conditional outcome variance given w0 minus the mean of v2 given w0).
    """

    support_w0: np.ndarray
    support_w1: np.ndarray
    p1: np.ndarray
    v2: np.ndarray
    v1: np.ndarray
    selection: SelectionModel
    cost: CostModel
    n: float
    n_e: float
    var_y: float = float("nan")
    pve: float = float("nan")
    v2_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = field(
        default=None, repr=False
    )

    def __post_init__(self):
        p1 = np.asarray(self.p1, dtype=float)
        if abs(float(p1.sum()) - 1.0) > 1e-10:
            raise InputError(f"support probabilities must sum to 1, got {p1.sum()!r}")
        if np.any(p1 < 0):
            raise InputError("support probabilities must be nonnegative")
        v2 = np.asarray(self.v2, dtype=float)
        if np.any(v2 < 0) or np.any(~np.isfinite(v2)):
            raise InputError("v2 must be finite and nonnegative on the support")
        if self.n_e > self.n:
            raise InputError(f"n_e={self.n_e} exceeds n={self.n}")
        floor = V2_FLOOR_FRACTION * float(v2.mean()) if v2.mean() > 0 else 0.0
        object.__setattr__(self, "support_w0", as_columns(self.support_w0))
        object.__setattr__(self, "support_w1", as_columns(self.support_w1))
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "v2", np.maximum(v2, floor))
        object.__setattr__(self, "v1", np.asarray(self.v1, dtype=float))

    @property
    def k_support(self) -> int:
        return self.p1.shape[0]

    @property
    def lam1(self) -> np.ndarray:
        return self.selection.evaluate(self.support_w0)

    @property
    def c2(self) -> np.ndarray:
        return self.cost.outcome_costs(self.support_w0, self.support_w1)

    @property
    def remaining_budget(self) -> float:
        return self.cost.remaining_after_phase1(self.n_e)

    def v2_at(self, w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
        if self.v2_fn is None:
            raise InputError("inputs carry no off-support variance function")
        floor = V2_FLOOR_FRACTION * float(np.asarray(self.v2).mean())
        return np.maximum(np.asarray(self.v2_fn(w0, w1), dtype=float), floor)


@dataclass(frozen=True)
class DesignSolution:
    """Solved second-phase rule on the support plus feasibility diagnostics."""

    lambda2: np.ndarray
    eta2: np.ndarray
    feasible: bool
    cap_violations: int
    ne_range: tuple[float, float]
    nu: float
    e_sqrt_cost_var: float  # mean of sqrt(C2 * v2) over the support
    scale: float  # eta2 = scale * sqrt(v2 / C2)
    budget_spent: float
    predicted_variance: float
    relative_efficiency: float
    inputs: DesignInputs = field(repr=False)

    def lambda2_at(self, w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
        """Evaluate the solved rule at arbitrary covariates.

        With a variance function on the inputs this is the closed form;
        otherwise rows fall back to their nearest support point (exact when
        the rows are the support, as in empirical-support workflows)."""
        inp = self.inputs
        if inp.v2_fn is None:
            pts = np.column_stack([inp.support_w0, inp.support_w1])
            x = np.column_stack([as_columns(w0), as_columns(w1)])
            d2 = ((x[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
            return self.lambda2[np.argmin(d2, axis=1)]
        v2 = inp.v2_at(w0, w1)
        c2 = inp.cost.outcome_costs(w0, w1)
        lam1 = inp.selection.evaluate(w0)
        return self.scale * np.sqrt(v2 / c2) / lam1

    def to_dict(self) -> dict:
        inp = self.inputs
        lam1 = inp.lam1
        table = [
            {
                "w0": inp.support_w0[k].tolist(),
                "w1": inp.support_w1[k].tolist(),
                "p1": float(inp.p1[k]),
                "lambda1": float(lam1[k]),
                "lambda2_star": float(self.lambda2[k]),
                "eta2_star": float(self.eta2[k]),
                "c2": float(inp.c2[k]),
                "v2": float(inp.v2[k]),
            }
            for k in range(inp.k_support)
        ]
        return {
            "support": table,
            "nu": float(self.nu),
            "e_sqrt_cost_var": float(self.e_sqrt_cost_var),
            "scale": float(self.scale),
            "budget_spent": float(self.budget_spent),
            "predicted_variance": _nan_none(self.predicted_variance),
            "relative_efficiency": _nan_none(self.relative_efficiency),
            "ne_range": [float(self.ne_range[0]), float(self.ne_range[1])],
            "feasible": bool(self.feasible),
            "cap_violations": int(self.cap_violations),
            "n": float(inp.n),
            "n_e": float(inp.n_e),
        }


def _nan_none(x: float):
    return None if x != x else float(x)


def expected_cost(inputs: DesignInputs, lambda2: np.ndarray) -> float:
    """Total expected study cost under a second-phase rule on the support."""
    lam2 = np.asarray(lambda2, dtype=float)
    if lam2.shape != inputs.p1.shape:
        raise InputError("rule must be given on the support")
    spend = float(np.sum(inputs.lam1 * lam2 * inputs.c2 * inputs.p1)) * inputs.n
    return inputs.cost.initial_cost + inputs.n_e * inputs.cost.per_record_cost + spend


def feasible_ne_range(inputs: DesignInputs) -> tuple[float, float, bool]:
    """(n_min, n_max) for the first-phase size, plus a verdict for inputs.n_e.

    n_max is exclusive. A zero per-record cost degenerates the range: n_max is
    unbounded and n_min collapses to 0 or infinity depending on whether the
    budget clears the binding support point.
    """
    b, c0, c1 = inputs.cost.total_budget, inputs.cost.initial_cost, inputs.cost.per_record_cost
    lam1, c2, v2 = inputs.lam1, inputs.c2, inputs.v2
    e_scv = float(np.sum(inputs.p1 * np.sqrt(c2 * v2)))
    with np.errstate(divide="ignore"):
        binding = float(np.min(inputs.n * lam1 * np.sqrt(c2 / np.maximum(v2, 1e-300))))
    if c1 == 0.0:
        n_max = float("inf")
        n_min = 0.0 if (b - c0) <= binding * e_scv else float("inf")
    else:
        n_max = (b - c0) / c1
        n_min = max(0.0, (b - c0 - binding * e_scv) / c1)
    ok = n_min <= inputs.n_e < n_max
    return n_min, n_max, ok


def optimal_lambda2(inputs: DesignInputs) -> DesignSolution:
    """Closed-form variance-minimizing rule under the budget constraint.

    eta2* = (remaining budget) * sqrt(v2/C2) / (n * E[sqrt(C2 v2)]) and
    lambda2* = eta2*/lambda1. The budget identity holds exactly; any support
    point with lambda2* > 1 marks the whole solution infeasible.
    """
    remaining = inputs.remaining_budget
    if remaining <= 0:
        raise InfeasibleDesignError(
            f"budget is exhausted before the second phase "
            f"(remaining {remaining}); reduce n_e or costs",
            ne_range=feasible_ne_range(inputs)[:2],
        )
    lam1, c2, v2, p1 = inputs.lam1, inputs.c2, inputs.v2, inputs.p1
    e_scv = float(np.sum(p1 * np.sqrt(c2 * v2)))
    scale = remaining / (inputs.n * e_scv)
    eta2 = scale * np.sqrt(v2 / c2)
    lam2 = eta2 / lam1
    cap_violations = int(np.sum(lam2 > 1.0 + 1e-12))
    feasible = cap_violations == 0 and bool(np.all(eta2 > 0))
    nu = (e_scv / remaining) ** 2
    n_min, n_max, ne_ok = feasible_ne_range(inputs)
    feasible = feasible and ne_ok
    spent = expected_cost(inputs, lam2)
    pred_var = design_variance(inputs, lam2) if _have_var(inputs) else float("nan")
    re = relative_efficiency(inputs) if _have_var(inputs) else float("nan")
    return DesignSolution(
        lambda2=lam2,
        eta2=eta2,
        feasible=feasible,
        cap_violations=cap_violations,
        ne_range=(n_min, n_max),
        nu=nu,
        e_sqrt_cost_var=e_scv,
        scale=scale,
        budget_spent=spent,
        predicted_variance=pred_var,
        relative_efficiency=re,
        inputs=inputs,
    )


def _have_var(inputs: DesignInputs) -> bool:
    return inputs.var_y == inputs.var_y and inputs.pve == inputs.pve


def design_variance(
    inputs: DesignInputs,
    lambda2: np.ndarray,
    var_y: Optional[float] = None,
    pve: Optional[float] = None,
) -> float:
    """Influence-function variance of the mean estimator under a rule.

    Computed on the discrete support as the explained-variance constant plus
    the first-phase and second-phase inverse-probability terms.
    """
    var_y = inputs.var_y if var_y is None else var_y
    pve = inputs.pve if pve is None else pve
    if var_y != var_y or pve != pve:
        raise InputError("design variance needs var_y and pve")
    lam2 = np.asarray(lambda2, dtype=float)
    if np.any(lam2 <= 0):
        raise InputError("rule must be positive everywhere on the support")
    lam1, p1 = inputs.lam1, inputs.p1
    term1 = pve * var_y
    term2 = float(np.sum(inputs.v1 * p1 / lam1))
    term3 = float(np.sum(inputs.v2 * p1 / (lam1 * lam2)))
    return term1 + term2 + term3


def baseline_lambda2(inputs: DesignInputs, n: Optional[float] = None) -> np.ndarray:
    """Budget-matched simple-random rule: constant unconditional inclusion.

    lambda2-bar(w) = remaining / (n * lambda1(w0) * E[C2]); the product
    lambda1 * lambda2-bar is constant, so every individual in the population
    is equally likely to reach the second phase.
    """
    n = inputs.n if n is None else n
    remaining = inputs.remaining_budget
    if remaining <= 0:
        raise InfeasibleDesignError("budget exhausted before the second phase")
    e_c2 = float(np.sum(inputs.p1 * inputs.c2))
    return remaining / (n * e_c2 * inputs.lam1)


def relative_efficiency(
    inputs: DesignInputs,
    var_y: Optional[float] = None,
    pve: Optional[float] = None,
) -> float:
    """Asymptotic variance ratio of the optimal rule to budget-matched random
    sampling; at most 1, with equality when v2 and C2 are constant."""
    var_y = inputs.var_y if var_y is None else var_y
    pve = inputs.pve if pve is None else pve
    if var_y != var_y or pve != pve:
        raise InputError("relative efficiency needs var_y and pve")
    remaining = inputs.remaining_budget
    if remaining <= 0:
        raise InfeasibleDesignError("budget exhausted before the second phase")
    p1, lam1, c2, v2 = inputs.p1, inputs.lam1, inputs.c2, inputs.v2
    e_prime = float(np.sum(inputs.v1 * p1 / lam1))
    e_scv = float(np.sum(p1 * np.sqrt(c2 * v2)))
    base = pve * var_y + e_prime
    ratio_n = inputs.n / remaining
    num = base + ratio_n * e_scv**2
    den = base + ratio_n * float(np.sum(p1 * c2)) * float(np.sum(p1 * v2))
    if den <= 0:
        raise InputError("degenerate variance inputs: nonpositive denominator")
    return num / den


def kkt_residuals(solution: DesignSolution) -> np.ndarray:
    """Stationarity residuals of the solved rule at every support point.

    Zero (to numerical precision) at the interior optimum: the derivative of
    the variance objective plus nu times the derivative of the budget
    constraint, per support point.
    """
    inp = solution.inputs
    return (
        -inp.v2 * inp.p1 / (inp.n * solution.eta2**2)
        + solution.nu * inp.n * inp.c2 * inp.p1
    )


def draw_second_phase(frame: PopulationFrame, solution: DesignSolution, seed: int) -> PopulationFrame:
    """Independent Bernoulli second-phase draws on the first-phase rows.

    Rule values come from the solution's off-support evaluation on each row's
    covariates; outcomes are revealed on the drawn rows. Deterministic per seed.
    """
    if not solution.feasible:
        raise InfeasibleDesignError(
            "cannot draw from an infeasible solution",
            ne_range=solution.ne_range,
        )
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xD4A3)))
    ehr = frame.ehr_ids
    lam2_vals = solution.lambda2_at(frame.w0[ehr], frame.w1[ehr])
    if np.any(lam2_vals > 1.0 + 1e-12):
        raise InfeasibleDesignError(
            "rule exceeds 1 on frame rows outside the solved support",
            offending_points=np.flatnonzero(lam2_vals > 1.0 + 1e-12).tolist(),
        )
    lam2_vals = np.minimum(lam2_vals, 1.0)
    draws = rng.random(ehr.size) < lam2_vals
    r2 = np.zeros(frame.n, dtype=np.int8)
    r2[ehr[draws]] = 1
    lam2_col = np.full(frame.n, np.nan)
    lam2_col[ehr] = lam2_vals
    return frame.with_second_phase(r2=r2, lambda2=lam2_col)


def alternative_design(
    frame: PopulationFrame,
    target_w0: W0Source,
    n_e_prime: int,
    inputs: DesignInputs,
    var_y: Optional[float] = None,
    pve: Optional[float] = None,
    n_cells: int = 10,
    seed: int = 0,
) -> tuple[np.ndarray, DesignSolution, float]:
    """Representative-subcohort design: subsample the first phase to match the
    target covariate distribution, then solve the optimal rule under the
    constant inclusion probability n_e'/n.

    Stratified proportional allocation on quantile cells of the first w0
    column. Returns (subsample row ids, solution, relative efficiency of the
    alternative design versus budget-matched random sampling under the
    original biased first phase).
    """
    if n_e_prime > frame.n_e:
        raise InputError(f"n_e'={n_e_prime} exceeds the first-phase size {frame.n_e}")
    if n_e_prime < 1:
        raise InputError("n_e' must be positive")
    edges, target_share = _target_cells(target_w0, n_cells)
    ehr = frame.ehr_ids
    ehr_w0 = frame.w0[ehr, 0]
    cell_of = np.clip(np.searchsorted(edges, ehr_w0, side="right") - 1, 0, len(target_share) - 1)
    avail = np.bincount(cell_of, minlength=len(target_share))
    empty = np.flatnonzero((target_share > 0) & (avail == 0))
    if empty.size:
        cell = int(empty[0])
        raise InputError(
            f"target cell {cell} (w0 in [{edges[cell]:.6g}, {edges[cell + 1]:.6g})) "
            f"has no first-phase support"
        )

    counts = _allocate_with_caps(target_share * n_e_prime, avail, n_e_prime)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xA17E)))
    chosen: list[np.ndarray] = []
    for cell, want in enumerate(counts):
        if want == 0:
            continue
        rows = ehr[cell_of == cell]
        chosen.append(np.sort(rng.choice(rows, size=int(want), replace=False)))
    subsample = np.sort(np.concatenate(chosen))

    lam1_prime = n_e_prime / inputs.n
    sub_w0 = frame.w0[subsample]
    sub_w1 = frame.w1[subsample]
    from .selection import known_selection

    const_model = known_selection(
        lambda w0: np.full(as_columns(w0).shape[0], lam1_prime),
        clip_bounds=(min(lam1_prime, 1e-3) / 2.0, 1.0 - 1e-12),
    )
    sub_inputs = DesignInputs(
        support_w0=sub_w0,
        support_w1=sub_w1,
        p1=np.full(subsample.size, 1.0 / subsample.size),
        v2=inputs.v2_at(sub_w0, sub_w1),
        v1=np.zeros(subsample.size),
        selection=const_model,
        cost=inputs.cost,
        n=inputs.n,
        n_e=n_e_prime,
        var_y=inputs.var_y,
        pve=inputs.pve,
        v2_fn=inputs.v2_fn,
    )
    solution = optimal_lambda2(sub_inputs)

    var_y = inputs.var_y if var_y is None else var_y
    pve = inputs.pve if pve is None else pve
    if var_y != var_y or pve != pve:
        raise InputError("alternative design needs var_y and pve")
    p1, lam1, c2, v2 = inputs.p1, inputs.lam1, inputs.c2, inputs.v2
    e_v1 = float(np.sum(inputs.v1 * p1))
    e_prime = float(np.sum(inputs.v1 * p1 / lam1))
    e_triple = e_v1 / lam1_prime
    e_scv = float(np.sum(p1 * np.sqrt(c2 * v2)))
    rem_prime = inputs.cost.remaining_after_phase1(n_e_prime)
    rem = inputs.remaining_budget
    if rem_prime <= 0 or rem <= 0:
        raise InfeasibleDesignError("budget exhausted before the second phase")
    base = pve * var_y
    num = base + e_triple + (inputs.n / rem_prime) * e_scv**2
    den = base + e_prime + (inputs.n / rem) * float(np.sum(p1 * c2)) * float(np.sum(p1 * v2))
    return subsample, solution, num / den


def _target_cells(target_w0: W0Source, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell edges over the first w0 column plus target cell probabilities."""
    if isinstance(target_w0, IndividualLevel):
        vals = target_w0.frame.w0[:, 0]
        weights = np.full(vals.shape[0], 1.0 / vals.shape[0])
    elif isinstance(target_w0, KnownDistribution):
        if target_w0.points is None:
            qs = np.linspace(0.0, 1.0, n_cells + 1)
            from scipy.stats import norm

            edges = norm.ppf(qs, loc=target_w0.normal_mean[0], scale=target_w0.normal_sd[0])
            edges[0], edges[-1] = -np.inf, np.inf
            return edges, np.full(n_cells, 1.0 / n_cells)
        vals = target_w0.points[:, 0]
        weights = np.asarray(target_w0.probs, dtype=float)
    else:  # ExternalProbabilitySample
        vals = target_w0.w0[:, 0]
        w = 1.0 / np.asarray(target_w0.samp_prob, dtype=float)
        weights = w / w.sum()

    order = np.argsort(vals, kind="stable")
    sorted_vals = vals[order]
    cum = np.cumsum(weights[order])
    qs = np.linspace(0.0, 1.0, n_cells + 1)[1:-1]
    inner = np.interp(qs, cum, sorted_vals)
    edges = np.concatenate(([-np.inf], np.unique(inner), [np.inf]))
    share = np.empty(len(edges) - 1)
    for c in range(len(edges) - 1):
        in_cell = (sorted_vals >= edges[c]) & (sorted_vals < edges[c + 1])
        share[c] = weights[order][in_cell].sum()
    share = share / share.sum()
    return edges, share


def _largest_remainder(ideal: np.ndarray) -> np.ndarray:
    floors = np.floor(ideal).astype(int)
    short = int(round(ideal.sum())) - int(floors.sum())
    if short > 0:
        order = np.argsort(-(ideal - floors), kind="stable")
        floors[order[:short]] += 1
    return floors


def _allocate_with_caps(ideal: np.ndarray, avail: np.ndarray, total: int) -> np.ndarray:
    """Proportional allocation capped at availability; the deficit spills to
    cells with slack, proportionally to their target shares."""
    counts = np.minimum(_largest_remainder(ideal), avail)
    for _ in range(len(ideal) + 1):
        deficit = total - int(counts.sum())
        if deficit <= 0:
            return counts
        slack = avail - counts
        open_cells = slack > 0
        if not np.any(open_cells):
            raise InputError(f"n_e'={total} exceeds the achievable matched size")
        weights = np.where(open_cells, np.maximum(ideal, 1e-12), 0.0)
        extra = _largest_remainder(weights / weights.sum() * deficit)
        counts = np.minimum(counts + extra, avail)
    raise InputError(f"n_e'={total} exceeds the achievable matched size")
