"""Exhaustive grid search over the budget surface (the optimality oracle).

Minimizes sum(coef_var / lambda_k) over rules lambda in (0, 1]^K whose
expected spend sum(coef_budget * lambda_k) equals the remaining budget
exactly: all but the last coordinate sweep the grid {step, 2*step, ..., 1}
and the last is solved from the budget, so every evaluated point lies on the
constraint surface.

A compiled kernel is used when available; a NumPy fallback with identical
semantics is selected otherwise (or when TWOPHASE_PURE_GRID=1). Blocks of the
first free coordinate can be scanned in parallel threads; results are
independent of the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _gridpure
from .errors import InputError

try:  # pragma: no cover - environment-dependent
    from . import _gridcore
except ImportError:  # pragma: no cover
    _gridcore = None


def active_backend():
    if os.environ.get("TWOPHASE_PURE_GRID") == "1" or _gridcore is None:
        return _gridpure
    return _gridcore


def active_backend_name() -> str:
    return active_backend().BACKEND_NAME


@dataclass(frozen=True)
class GridResult:
    value: float
    lambda2: Optional[np.ndarray]
    n_feasible_blocks: int

    @property
    def feasible(self) -> bool:
        return self.lambda2 is not None


def min_variance_on_budget_surface(
    coef_var: np.ndarray,
    coef_budget: np.ndarray,
    remaining: float,
    step: float = 1e-3,
    workers: int = 1,
    backend=None,
) -> GridResult:
    """Exhaustive minimum of the rule-dependent variance term on the surface.

    coef_var[k] weights 1/lambda_k in the objective; coef_budget[k] weights
    lambda_k in the budget identity. Support sizes 1 through 4.
    """
    cv = np.ascontiguousarray(coef_var, dtype=float)
    cb = np.ascontiguousarray(coef_budget, dtype=float)
    if cv.shape != cb.shape or cv.ndim != 1:
        raise InputError("coefficient vectors must be 1-D and equal length")
    if np.any(cv < 0) or np.any(cb <= 0):
        raise InputError("need nonnegative variance and positive budget coefficients")
    k = cv.shape[0]
    if k == 1:
        lam = remaining / cb[0]
        if 0.0 < lam <= 1.0:
            return GridResult(float(cv[0] / lam), np.array([lam]), 1)
        return GridResult(float("inf"), None, 0)
    if k > 4:
        raise InputError("grid oracle supports at most 4 support points")

    kern = backend if backend is not None else active_backend()
    m = int(round(1.0 / step))
    workers = max(1, int(workers))
    bounds = np.linspace(0, m, workers + 1).astype(int) if workers > 1 else np.array([0, m])
    blocks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if a < b]

    if len(blocks) == 1:
        results = [kern.grid_scan(cv, cb, float(remaining), float(step), 0, m)]
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            futures = [
                pool.submit(kern.grid_scan, cv, cb, float(remaining), float(step), a, b)
                for a, b in blocks
            ]
            results = [f.result() for f in futures]

    best = float("inf")
    best_idx = None
    best_last = 0.0
    n_feasible = 0
    for value, idx, last in results:  # merge in block order: first minimum wins ties
        if idx is not None:
            n_feasible += 1
            if value < best:
                best, best_idx, best_last = value, idx, last
    if best_idx is None:
        return GridResult(float("inf"), None, 0)
    lam = np.empty(k)
    for j, i in enumerate(best_idx):
        lam[j] = (i + 1) * step
    lam[k - 1] = best_last
    return GridResult(float(best), lam, n_feasible)


def variance_term(coef_var: np.ndarray, lambda2: np.ndarray) -> float:
    """The rule-dependent part of the design variance for a given rule."""
    return float(np.sum(np.asarray(coef_var, float) / np.asarray(lambda2, float)))


def snap_to_surface_grid(
    lambda2: np.ndarray,
    coef_budget: np.ndarray,
    remaining: float,
    step: float = 1e-3,
) -> Optional[np.ndarray]:
    """Round all free coordinates of a rule to the grid and re-solve the last
    from the budget; None when the snapped point leaves (0, 1]."""
    lam = np.asarray(lambda2, dtype=float).copy()
    cb = np.asarray(coef_budget, dtype=float)
    k = lam.shape[0]
    for j in range(k - 1):
        i = int(np.clip(round(lam[j] / step), 1, round(1.0 / step)))
        lam[j] = i * step
    spent = float(np.sum(cb[: k - 1] * lam[: k - 1]))
    last = (remaining - spent) / cb[k - 1]
    if not 0.0 < last <= 1.0:
        return None
    lam[k - 1] = last
    return lam
