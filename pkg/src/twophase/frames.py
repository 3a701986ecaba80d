"""Core data structures for multi-phase samples, plus generation and CSV I/O.

A PopulationFrame is column-oriented and immutable: per-individual covariates,
phase indicators, inclusion probabilities, and the outcome where observed.
Missing values are NaN in float columns and surface as None on the Individual
view; indicator columns are never missing.

Generated frames additionally carry a latent outcome column used to reveal y
when the second phase is drawn. It is never serialized.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .config import SimulationConfig
from .errors import InputError, SchemaError
from .featurespec import as_columns

FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class Individual:
    """Row view of a frame; optional fields are None when unobserved."""

    w0: np.ndarray
    w1: Optional[np.ndarray]
    y: Optional[float]
    r1: int
    r2: int
    lambda1: Optional[float]
    lambda2: Optional[float]
    pilot: bool = False


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PopulationFrame:
    """Target population with phase-1/phase-2 sample structure.

    w0: (n, k) always observed. w1: (n, m), NaN outside the first-phase
    sample. y: (n,), NaN where unobserved. r1, r2: int8 indicators.
    lambda1/lambda2: per-row inclusion probabilities where known (NaN else).
    pilot: boolean mask, subset of r1.
    """

    w0: np.ndarray
    w1: np.ndarray
    y: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    pilot: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    y_latent: Optional[np.ndarray] = None

    def __post_init__(self):
        w0 = _readonly(as_columns(self.w0))
        w1 = _readonly(as_columns(self.w1))
        y = _readonly(np.asarray(self.y, dtype=float))
        r1 = _readonly(np.asarray(self.r1, dtype=np.int8))
        r2 = _readonly(np.asarray(self.r2, dtype=np.int8))
        pilot = _readonly(np.asarray(self.pilot, dtype=bool))
        lam1 = _readonly(np.asarray(self.lambda1, dtype=float))
        lam2 = _readonly(np.asarray(self.lambda2, dtype=float))
        latent = self.y_latent
        if latent is not None:
            latent = _readonly(np.asarray(latent, dtype=float))
        for name, val in (
            ("w0", w0), ("w1", w1), ("y", y), ("r1", r1), ("r2", r2),
            ("pilot", pilot), ("lambda1", lam1), ("lambda2", lam2),
        ):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "y_latent", latent)
        self._validate()

    def _validate(self):
        n = self.w0.shape[0]
        for name in ("w1", "y", "r1", "r2", "pilot", "lambda1", "lambda2"):
            if getattr(self, name).shape[0] != n:
                raise InputError(f"column {name} length mismatch with w0 ({n} rows)")
        if np.any(~np.isfinite(self.w0)):
            raise InputError("w0 must be fully observed and finite")
        bad = np.flatnonzero((self.r2 == 1) & (self.r1 == 0))
        if bad.size:
            raise SchemaError(
                f"second-phase rows outside the first phase at rows {_fmt_rows(bad)}",
                rows=(bad + 1).tolist(),
            )
        if np.any(self.pilot & (self.r1 == 0)):
            bad = np.flatnonzero(self.pilot & (self.r1 == 0))
            raise SchemaError(
                f"pilot rows outside the first phase at rows {_fmt_rows(bad)}",
                rows=(bad + 1).tolist(),
            )
        ehr = self.r1 == 1
        if np.any(~np.isfinite(self.w1[ehr])):
            bad = np.flatnonzero(ehr & np.any(~np.isfinite(self.w1), axis=1))
            raise SchemaError(
                f"first-phase rows missing w1 at rows {_fmt_rows(bad)}",
                rows=(bad + 1).tolist(),
            )
        if np.any(np.isfinite(self.w1[~ehr])):
            bad = np.flatnonzero(~ehr & np.any(np.isfinite(self.w1), axis=1))
            raise SchemaError(
                f"w1 present outside the first phase at rows {_fmt_rows(bad)}",
                rows=(bad + 1).tolist(),
            )
        observed = (self.r2 == 1) | self.pilot
        if np.any(np.isnan(self.y[observed])):
            bad = np.flatnonzero(observed & np.isnan(self.y))
            raise SchemaError(
                f"outcome missing on measured rows {_fmt_rows(bad)}",
                rows=(bad + 1).tolist(),
            )
        if np.any(~np.isnan(self.y) & ~observed):
            bad = np.flatnonzero(~np.isnan(self.y) & ~observed)
            raise SchemaError(
                f"outcome present on unmeasured rows {_fmt_rows(bad)}",
                rows=(bad + 1).tolist(),
            )
        for name in ("lambda1", "lambda2"):
            vals = getattr(self, name)
            present = ~np.isnan(vals)
            if np.any((vals[present] <= 0) | (vals[present] > 1)):
                bad = np.flatnonzero(present & ((vals <= 0) | (vals > 1)))
                raise SchemaError(
                    f"{name} outside (0, 1] at rows {_fmt_rows(bad)}",
                    rows=(bad + 1).tolist(),
                )

    @property
    def n(self) -> int:
        return self.w0.shape[0]

    @property
    def n_e(self) -> int:
        return int(np.sum(self.r1 == 1))

    @property
    def n_s(self) -> int:
        return int(np.sum(self.r2 == 1))

    @property
    def n_p(self) -> int:
        return int(np.sum(self.pilot))

    @property
    def pilot_ids(self) -> np.ndarray:
        return np.flatnonzero(self.pilot)

    @property
    def ehr_ids(self) -> np.ndarray:
        return np.flatnonzero(self.r1 == 1)

    @property
    def second_phase_ids(self) -> np.ndarray:
        return np.flatnonzero(self.r2 == 1)

    def individual(self, i: int) -> Individual:
        r1 = int(self.r1[i])
        lam1 = self.lambda1[i]
        lam2 = self.lambda2[i]
        return Individual(
            w0=self.w0[i],
            w1=self.w1[i] if r1 == 1 else None,
            y=float(self.y[i]) if not np.isnan(self.y[i]) else None,
            r1=r1,
            r2=int(self.r2[i]),
            lambda1=float(lam1) if not np.isnan(lam1) else None,
            lambda2=float(lam2) if not np.isnan(lam2) else None,
            pilot=bool(self.pilot[i]),
        )

    def with_second_phase(
        self,
        r2: np.ndarray,
        lambda2: np.ndarray,
        y_revealed: Optional[np.ndarray] = None,
    ) -> "PopulationFrame":
        """New frame with a drawn second phase; outcomes revealed from
        y_revealed (or the latent column) on newly measured rows."""
        r2 = np.asarray(r2, dtype=np.int8)
        source = y_revealed if y_revealed is not None else self.y_latent
        y = np.array(self.y, dtype=float)
        new_rows = (r2 == 1) & np.isnan(y)
        if np.any(new_rows):
            if source is None:
                raise InputError("no outcome source to reveal on drawn rows")
            y[new_rows] = np.asarray(source, dtype=float)[new_rows]
        return PopulationFrame(
            w0=self.w0, w1=self.w1, y=y, r1=self.r1, r2=r2, pilot=self.pilot,
            lambda1=self.lambda1, lambda2=lambda2, y_latent=self.y_latent,
        )


def _fmt_rows(idx: np.ndarray, limit: int = 10) -> str:
    rows = (np.asarray(idx) + 1).tolist()
    if len(rows) > limit:
        return f"{rows[:limit]} (+{len(rows) - limit} more)"
    return str(rows)


def generate_population(config: SimulationConfig, seed: int) -> PopulationFrame:
    """Draw a synthetic target population with its first-phase sample and pilot.

    Baseline and auxiliary covariates are independent normals; the outcome is
    conditionally normal with a linear mean and log-linear variance. First-phase
    membership is either the top-n_e rows by inclusion probability (stable ties)
    or independent Bernoulli draws, per config.selection_mode. The outcome is
    revealed only on pilot rows; the full latent column rides along for later
    second-phase draws. Identical seeds give identical frames.
    """
    if config.gamma is None:
        raise InputError("gamma not resolved; calibrate or set explicitly")
    n, n_e, n_p = config.n, config.n_e, config.n_p
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x67E0)))
    w0 = rng.normal(config.w_mean, config.w_sd, size=n)
    w1 = rng.normal(config.w_mean, config.w_sd, size=n)
    lam1 = config.lambda1.evaluate(w0)
    if config.selection_mode == "top_ne":
        order = np.argsort(-lam1, kind="stable")
        r1 = np.zeros(n, dtype=np.int8)
        r1[order[:n_e]] = 1
    else:
        r1 = (rng.random(n) < lam1).astype(np.int8)
    mean = config.mean_at(w0, w1)
    var = config.variance_at(w0, w1)
    y_latent = rng.normal(mean, np.sqrt(var))

    ehr = np.flatnonzero(r1 == 1)
    if ehr.size < n_p:
        raise InputError(f"pilot size {n_p} exceeds realized first-phase size {ehr.size}")
    pilot_rows = rng.choice(ehr, size=n_p, replace=False)
    pilot = np.zeros(n, dtype=bool)
    pilot[pilot_rows] = True

    y = np.full(n, np.nan)
    y[pilot] = y_latent[pilot]
    w1_col = np.where(r1 == 1, w1, np.nan)
    return PopulationFrame(
        w0=w0.reshape(-1, 1),
        w1=w1_col.reshape(-1, 1),
        y=y,
        r1=r1,
        r2=np.zeros(n, dtype=np.int8),
        pilot=pilot,
        lambda1=lam1,
        lambda2=np.full(n, np.nan),
        y_latent=y_latent,
    )


# --- W0 sources -------------------------------------------------------------


@dataclass(frozen=True)
class IndividualLevel:
    """Baseline covariates observed for every individual in the population."""

    frame: PopulationFrame


@dataclass(frozen=True)
class KnownDistribution:
    """Distribution of the baseline covariates from a public source.

    Either a discrete pmf (points + probs) or independent normal components
    per dimension (mean + sd vectors).
    """

    points: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    normal_mean: Optional[np.ndarray] = None
    normal_sd: Optional[np.ndarray] = None

    def __post_init__(self):
        discrete = self.points is not None
        normal = self.normal_mean is not None
        if discrete == normal:
            raise InputError("give either a discrete pmf or normal components")
        if discrete:
            pts = as_columns(self.points)
            probs = np.asarray(self.probs, dtype=float)
            if probs.shape[0] != pts.shape[0]:
                raise InputError("pmf points and probabilities disagree in length")
            if np.any(probs < 0):
                raise InputError("pmf probabilities must be nonnegative")
            if abs(float(probs.sum()) - 1.0) > 1e-12:
                raise InputError(f"pmf must sum to 1 (got {probs.sum()!r})")
            object.__setattr__(self, "points", _readonly(pts))
            object.__setattr__(self, "probs", _readonly(probs))
        else:
            mean = np.atleast_1d(np.asarray(self.normal_mean, dtype=float))
            sd = np.atleast_1d(np.asarray(self.normal_sd, dtype=float))
            if mean.shape != sd.shape:
                raise InputError("normal mean and sd must have matching shapes")
            if np.any(sd <= 0):
                raise InputError("normal sd must be positive")
            if mean.size > 2:
                raise InputError("tensor quadrature supported up to 2 dimensions")
            object.__setattr__(self, "normal_mean", _readonly(mean))
            object.__setattr__(self, "normal_sd", _readonly(sd))


@dataclass(frozen=True)
class ExternalProbabilitySample:
    """External probability sample: w0 plus the known sampling probability."""

    w0: np.ndarray
    samp_prob: np.ndarray

    def __post_init__(self):
        w0 = as_columns(self.w0)
        p = np.asarray(self.samp_prob, dtype=float)
        if w0.shape[0] == 0:
            raise InputError("external sample is empty")
        if p.shape[0] != w0.shape[0]:
            raise InputError("sampling probabilities and w0 disagree in length")
        if np.any(~np.isfinite(p)) or np.any(p <= 0) or np.any(p > 1):
            bad = np.flatnonzero(~np.isfinite(p) | (p <= 0) | (p > 1))
            raise SchemaError(
                f"sampling probability outside (0, 1] at rows {_fmt_rows(bad)}",
                rows=(bad + 1).tolist(),
            )
        object.__setattr__(self, "w0", _readonly(w0))
        object.__setattr__(self, "samp_prob", _readonly(p))


W0Source = Union[IndividualLevel, KnownDistribution, ExternalProbabilitySample]


# --- CSV I/O ----------------------------------------------------------------


@dataclass(frozen=True)
class FrameSchema:
    """Expected covariate dimensions; None means infer from the header."""

    n_w0: Optional[int] = None
    n_w1: Optional[int] = None


def _parse_cell(text: str, row: int, col: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise SchemaError(f"non-numeric cell {text!r} in column {col} at row {row}", rows=[row])


def _parse_indicator(text: str, row: int, col: str) -> int:
    v = _parse_cell(text, row, col)
    if math.isnan(v) or v not in (0.0, 1.0):
        raise SchemaError(f"column {col} must be 0/1 at row {row}", rows=[row])
    return int(v)


def read_frame(path, schema: FrameSchema = FrameSchema()) -> PopulationFrame:
    """Load a population CSV (columns id,w0_*,w1_*,y,r1,r2,pilot).

    Rows violating the sample-structure invariants are rejected with their
    row numbers; the outcome column may be empty wherever unmeasured.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file")
        rows = list(reader)
    header = [h.strip() for h in header]
    w0_cols = [h for h in header if h.startswith("w0_")]
    w1_cols = [h for h in header if h.startswith("w1_")]
    required = ["id", *w0_cols, *w1_cols, "y", "r1", "r2", "pilot"]
    missing = [c for c in required if c not in header]
    if missing or not w0_cols:
        raise SchemaError(f"missing required columns: {missing or ['w0_1']}")
    if schema.n_w0 is not None and len(w0_cols) != schema.n_w0:
        raise SchemaError(f"expected {schema.n_w0} w0 columns, found {len(w0_cols)}")
    if schema.n_w1 is not None and len(w1_cols) != schema.n_w1:
        raise SchemaError(f"expected {schema.n_w1} w1 columns, found {len(w1_cols)}")
    pos = {name: header.index(name) for name in header}

    n = len(rows)
    w0 = np.empty((n, len(w0_cols)))
    w1 = np.full((n, len(w1_cols)), np.nan)
    y = np.full(n, np.nan)
    r1 = np.zeros(n, dtype=np.int8)
    r2 = np.zeros(n, dtype=np.int8)
    pilot = np.zeros(n, dtype=bool)
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise SchemaError(f"row {i} has {len(row)} cells, expected {len(header)}", rows=[i])
        for j, c in enumerate(w0_cols):
            w0[i - 1, j] = _parse_cell(row[pos[c]], i, c)
        for j, c in enumerate(w1_cols):
            w1[i - 1, j] = _parse_cell(row[pos[c]], i, c)
        y[i - 1] = _parse_cell(row[pos["y"]], i, "y")
        r1[i - 1] = _parse_indicator(row[pos["r1"]], i, "r1")
        r2[i - 1] = _parse_indicator(row[pos["r2"]], i, "r2")
        pilot[i - 1] = bool(_parse_indicator(row[pos["pilot"]], i, "pilot"))
    if np.any(~np.isfinite(w0)):
        bad = np.flatnonzero(np.any(~np.isfinite(w0), axis=1))
        raise SchemaError(f"w0 missing at rows {_fmt_rows(bad)}", rows=(bad + 1).tolist())
    return PopulationFrame(
        w0=w0, w1=w1, y=y, r1=r1, r2=r2, pilot=pilot,
        lambda1=np.full(n, np.nan), lambda2=np.full(n, np.nan),
    )


def write_frame(frame: PopulationFrame, path) -> None:
    """Write the population CSV; floats carry 17 significant digits."""
    k, m = frame.w0.shape[1], frame.w1.shape[1]
    header = (
        ["id"]
        + [f"w0_{j + 1}" for j in range(k)]
        + [f"w1_{j + 1}" for j in range(m)]
        + ["y", "r1", "r2", "pilot"]
    )

    def fmt(v: float) -> str:
        return "" if math.isnan(v) else FLOAT_FMT % v

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(frame.n):
            row = [str(i + 1)]
            row += [fmt(frame.w0[i, j]) for j in range(k)]
            row += [fmt(frame.w1[i, j]) for j in range(m)]
            row += [fmt(frame.y[i]), str(int(frame.r1[i])), str(int(frame.r2[i])),
                    str(int(frame.pilot[i]))]
            writer.writerow(row)


def read_external(path) -> ExternalProbabilitySample:
    """Load an external-sample CSV (columns id,w0_*,samp_prob)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file")
        rows = list(reader)
    header = [h.strip() for h in header]
    w0_cols = [h for h in header if h.startswith("w0_")]
    missing = [c for c in ["id", *w0_cols, "samp_prob"] if c not in header]
    if missing or not w0_cols:
        raise SchemaError(f"missing required columns: {missing or ['w0_1']}")
    pos = {name: header.index(name) for name in header}
    n = len(rows)
    w0 = np.empty((n, len(w0_cols)))
    p = np.empty(n)
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise SchemaError(f"row {i} has {len(row)} cells, expected {len(header)}", rows=[i])
        for j, c in enumerate(w0_cols):
            w0[i - 1, j] = _parse_cell(row[pos[c]], i, c)
        p[i - 1] = _parse_cell(row[pos["samp_prob"]], i, "samp_prob")
    return ExternalProbabilitySample(w0=w0, samp_prob=p)


def write_external(sample: ExternalProbabilitySample, path) -> None:
    k = sample.w0.shape[1]
    header = ["id"] + [f"w0_{j + 1}" for j in range(k)] + ["samp_prob"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(sample.w0.shape[0]):
            row = [str(i + 1)]
            row += [FLOAT_FMT % sample.w0[i, j] for j in range(k)]
            row += [FLOAT_FMT % sample.samp_prob[i]]
            writer.writerow(row)
