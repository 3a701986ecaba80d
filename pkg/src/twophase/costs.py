"""Study cost structure: total budget, fixed costs, and per-outcome cost.

The per-outcome cost may depend on the auxiliary covariates. Three forms are
built in: constant, affine in the covariates, and a tabulated lookup on an
explicit support. Arbitrary callables are accepted for in-process use but
cannot be serialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import InputError
from .featurespec import as_columns


@dataclass(frozen=True)
class ConstantCost:
    value: float

    def evaluate(self, w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
        return np.full(as_columns(w0).shape[0], float(self.value))

    def to_dict(self) -> dict:
        return {"form": "constant", "value": float(self.value)}


@dataclass(frozen=True)
class AffineCost:
    """intercept + coefs_w0 . w0 + coefs_w1 . w1, elementwise over rows."""

    intercept: float
    coefs_w0: tuple[float, ...] = ()
    coefs_w1: tuple[float, ...] = ()

    def evaluate(self, w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
        w0 = as_columns(w0)
        w1 = as_columns(w1)
        out = np.full(w0.shape[0], float(self.intercept))
        if self.coefs_w0:
            out = out + w0[:, : len(self.coefs_w0)] @ np.asarray(self.coefs_w0)
        if self.coefs_w1:
            out = out + w1[:, : len(self.coefs_w1)] @ np.asarray(self.coefs_w1)
        return out

    def to_dict(self) -> dict:
        return {
            "form": "affine",
            "intercept": float(self.intercept),
            "coefs_w0": [float(c) for c in self.coefs_w0],
            "coefs_w1": [float(c) for c in self.coefs_w1],
        }


@dataclass(frozen=True)
class TabulatedCost:
    """Nearest-point lookup on an explicit covariate support.

    points: (m, k) stacked [w0, w1] covariate rows; values: (m,) costs.
    """

    points: np.ndarray
    values: np.ndarray

    def evaluate(self, w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
        x = np.column_stack([as_columns(w0), as_columns(w1)])
        pts = np.asarray(self.points, dtype=float)
        d2 = ((x[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        return np.asarray(self.values, dtype=float)[np.argmin(d2, axis=1)]

    def to_dict(self) -> dict:
        return {
            "form": "tabulated",
            "points": np.asarray(self.points, dtype=float).tolist(),
            "values": np.asarray(self.values, dtype=float).tolist(),
        }


@dataclass(frozen=True)
class CallableCost:
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def evaluate(self, w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(as_columns(w0), as_columns(w1)), dtype=float)

    def to_dict(self) -> dict:
        raise InputError("callable outcome costs cannot be serialized")


OutcomeCost = Union[ConstantCost, AffineCost, TabulatedCost, CallableCost]


def outcome_cost_from_dict(d: dict) -> OutcomeCost:
    form = d.get("form")
    if form == "constant":
        return ConstantCost(float(d["value"]))
    if form == "affine":
        return AffineCost(
            float(d["intercept"]),
            tuple(d.get("coefs_w0", ())),
            tuple(d.get("coefs_w1", ())),
        )
    if form == "tabulated":
        return TabulatedCost(np.asarray(d["points"], float), np.asarray(d["values"], float))
    raise InputError(f"unknown outcome cost form: {form!r}")


@dataclass(frozen=True)
class CostModel:
    """Total budget and the three cost components of a two-phase study."""

    total_budget: float
    initial_cost: float
    per_record_cost: float
    outcome_cost: OutcomeCost = field(default_factory=lambda: ConstantCost(1.0))

    def __post_init__(self):
        if not self.total_budget > self.initial_cost:
            raise InputError(
                f"total budget {self.total_budget} must exceed initial cost {self.initial_cost}"
            )
        if self.per_record_cost < 0:
            raise InputError("per-record cost must be nonnegative")

    def outcome_costs(self, w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
        """Per-individual outcome-measurement cost, validated positive."""
        c = self.outcome_cost.evaluate(w0, w1)
        if np.any(~np.isfinite(c)) or np.any(c <= 0):
            raise InputError("outcome cost must be finite and positive on all support points")
        return c

    def remaining_after_phase1(self, n_e: int) -> float:
        return self.total_budget - self.initial_cost - n_e * self.per_record_cost

    def to_dict(self) -> dict:
        return {
            "total_budget": float(self.total_budget),
            "initial_cost": float(self.initial_cost),
            "per_record_cost": float(self.per_record_cost),
            "outcome_cost": self.outcome_cost.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "CostModel":
        return CostModel(
            total_budget=float(d["total_budget"]),
            initial_cost=float(d["initial_cost"]),
            per_record_cost=float(d["per_record_cost"]),
            outcome_cost=outcome_cost_from_dict(d["outcome_cost"]),
        )
