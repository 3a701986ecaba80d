"""Design-matrix construction from named covariate columns.

A FeatureSpec is a flat list of terms over named inputs: "1" for the
intercept, a bare column name for a linear term, and "name^2" for a squared
term. This is deliberately minimal; it covers every model in the package and
serializes to a list of strings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class FeatureSpec:
    terms: tuple[str, ...]

    def __post_init__(self):
        if not self.terms:
            raise InputError("feature spec needs at least one term")

    @property
    def n_params(self) -> int:
        return len(self.terms)

    def matrix(self, cols: Mapping[str, np.ndarray]) -> np.ndarray:
        """Stack the requested terms into an (n, p) design matrix."""
        first = next(iter(cols.values()))
        n = np.asarray(first).shape[0]
        out = np.empty((n, len(self.terms)))
        for j, term in enumerate(self.terms):
            if term == "1":
                out[:, j] = 1.0
                continue
            name, _, power = term.partition("^")
            if name not in cols:
                raise InputError(f"feature spec references unknown column {name!r}")
            col = np.asarray(cols[name], dtype=float)
            out[:, j] = col**2 if power == "2" else col
        return out

    def to_list(self) -> list[str]:
        return list(self.terms)

    @staticmethod
    def from_list(terms) -> "FeatureSpec":
        return FeatureSpec(tuple(str(t) for t in terms))


def linear_spec(names, intercept: bool = True, squares: bool = False) -> FeatureSpec:
    """Intercept + linear (+ optionally squared) terms for the given columns."""
    terms = ["1"] if intercept else []
    for name in names:
        terms.append(name)
        if squares:
            terms.append(f"{name}^2")
    return FeatureSpec(tuple(terms))


def as_columns(x) -> np.ndarray:
    """Coerce to an (n, k) float matrix; 1-D input is one column of n rows."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x.reshape(-1, 1)
    if x.ndim != 2:
        raise InputError(f"covariates must be 1-D or 2-D, got shape {x.shape}")
    return x


def columns_from_arrays(w0, w1=None) -> dict[str, np.ndarray]:
    """Name covariate matrix columns w0_1..w0_k / w1_1..w1_m."""
    w0 = as_columns(w0)
    cols = {f"w0_{j + 1}": w0[:, j] for j in range(w0.shape[1])}
    if w1 is not None:
        w1 = as_columns(w1)
        cols.update({f"w1_{j + 1}": w1[:, j] for j in range(w1.shape[1])})
    return cols
