"""First-phase selection mechanism: how likely each person is to be in the cohort.

Three ways to obtain it: a known functional form, a direct logistic
regression when cohort membership is observed population-wide, or the
composition of an external probability sample with a pooled source-membership
model (external-probability mean times cohort-vs-external odds).

Every evaluation is clipped into [clip_lo, clip_hi] to enforce positivity;
the probability divides both the estimator and the optimal rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InputError
from .featurespec import FeatureSpec, as_columns, columns_from_arrays, linear_spec
from .frames import ExternalProbabilitySample, PopulationFrame
from .regress import GlmFit, fit_beta, fit_logistic

DEFAULT_CLIP = (1e-3, 1.0 - 1e-3)


@dataclass(frozen=True)
class SelectionModel:
    """First-phase inclusion probability lambda1(w0), clipped to (0, 1).

    variant is one of "known", "direct", "composed". Known models wrap a
    callable; direct models hold a logistic fit of the phase-1 indicator;
    composed models hold a beta-regression fit of the external sampling
    probability and a logistic fit of cohort-vs-external membership.
    """

    variant: str
    clip_bounds: tuple[float, float] = DEFAULT_CLIP
    known_fn: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    direct_fit: Optional[GlmFit] = None
    ext_fit: Optional[GlmFit] = None
    pool_fit: Optional[GlmFit] = None

    def __post_init__(self):
        lo, hi = self.clip_bounds
        if not (0.0 < lo < hi < 1.0):
            raise InputError("clip bounds must satisfy 0 < lo < hi < 1")
        if self.variant == "known" and self.known_fn is None:
            raise InputError("known variant requires a function")
        if self.variant == "direct" and self.direct_fit is None:
            raise InputError("direct variant requires a logistic fit")
        if self.variant == "composed" and (self.ext_fit is None or self.pool_fit is None):
            raise InputError("composed variant requires both component fits")

    def evaluate_raw(self, w0: np.ndarray) -> np.ndarray:
        """Pre-clip probability; exposed for the composition identity."""
        w0 = as_columns(w0)
        cols = columns_from_arrays(w0)
        if self.variant == "known":
            return np.asarray(self.known_fn(w0), dtype=float).reshape(w0.shape[0])
        if self.variant == "direct":
            return self.direct_fit.predict(cols)
        ext_mean = self.ext_fit.predict(cols)
        pool_p = np.clip(self.pool_fit.predict(cols), 1e-12, 1.0 - 1e-12)
        return ext_mean * pool_p / (1.0 - pool_p)

    def evaluate(self, w0: np.ndarray) -> np.ndarray:
        lo, hi = self.clip_bounds
        return np.clip(self.evaluate_raw(w0), lo, hi)

    def clip_diagnostics(self, w0: np.ndarray) -> dict:
        raw = self.evaluate_raw(w0)
        lo, hi = self.clip_bounds
        return {
            "n_below": int(np.sum(raw < lo)),
            "n_above": int(np.sum(raw > hi)),
            "n_at_least_one": int(np.sum(raw >= 1.0)),
        }

    def to_dict(self) -> dict:
        out = {"variant": self.variant, "clip_bounds": [float(b) for b in self.clip_bounds]}
        if self.variant == "direct":
            out["direct_fit"] = self.direct_fit.to_dict()
        elif self.variant == "composed":
            out["ext_fit"] = self.ext_fit.to_dict()
            out["pool_fit"] = self.pool_fit.to_dict()
        else:
            raise InputError("known-function selection models cannot be serialized")
        return out

    @staticmethod
    def from_dict(d: dict) -> "SelectionModel":
        variant = str(d["variant"])
        clip = tuple(float(b) for b in d.get("clip_bounds", DEFAULT_CLIP))
        if variant == "direct":
            return SelectionModel("direct", clip, direct_fit=GlmFit.from_dict(d["direct_fit"]))
        if variant == "composed":
            return SelectionModel(
                "composed", clip,
                ext_fit=GlmFit.from_dict(d["ext_fit"]),
                pool_fit=GlmFit.from_dict(d["pool_fit"]),
            )
        raise InputError(f"cannot deserialize selection variant {variant!r}")


def known_selection(
    fn: Callable[[np.ndarray], np.ndarray],
    clip_bounds: tuple[float, float] = DEFAULT_CLIP,
) -> SelectionModel:
    return SelectionModel("known", clip_bounds, known_fn=fn)


def fit_direct(
    frame: PopulationFrame,
    spec: Optional[FeatureSpec] = None,
    clip_bounds: tuple[float, float] = DEFAULT_CLIP,
) -> SelectionModel:
    """Logistic regression of the phase-1 indicator on w0 over the whole frame.

    Requires individual-level membership for the full target population.
    """
    if spec is None:
        spec = linear_spec([f"w0_{j + 1}" for j in range(frame.w0.shape[1])])
    cols = columns_from_arrays(frame.w0)
    fit = fit_logistic(cols, frame.r1.astype(float), spec)
    return SelectionModel("direct", clip_bounds, direct_fit=fit)


def fit_composed(
    ehr_w0: np.ndarray,
    external: ExternalProbabilitySample,
    spec: Optional[FeatureSpec] = None,
    clip_bounds: tuple[float, float] = DEFAULT_CLIP,
) -> SelectionModel:
    """Compose an external probability sample with a pooled membership model.

    Fits (1) a beta regression of the external sampling probability on w0 and
    (2) a logistic regression of source (cohort=1 vs external=0) on w0 over
    the pooled rows. The selection probability is the external-probability
    mean times the cohort-vs-external odds, clipped.
    """
    ehr_w0 = as_columns(ehr_w0)
    if ehr_w0.shape[0] == 0:
        raise InputError("cohort sample is empty")
    if ehr_w0.shape[1] != external.w0.shape[1]:
        raise InputError("cohort and external w0 dimensions disagree")
    if spec is None:
        spec = linear_spec([f"w0_{j + 1}" for j in range(ehr_w0.shape[1])])

    ext_fit = fit_beta(columns_from_arrays(external.w0), external.samp_prob, spec)
    pooled_w0 = np.vstack([ehr_w0, external.w0])
    source = np.concatenate([np.ones(ehr_w0.shape[0]), np.zeros(external.w0.shape[0])])
    pool_fit = fit_logistic(columns_from_arrays(pooled_w0), source, spec)
    return SelectionModel("composed", clip_bounds, ext_fit=ext_fit, pool_fit=pool_fit)


def evaluate(model: SelectionModel, w0: np.ndarray) -> np.ndarray:
    """Module-level alias for SelectionModel.evaluate."""
    return model.evaluate(w0)
