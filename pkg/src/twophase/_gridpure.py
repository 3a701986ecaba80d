"""NumPy fallback for the budget-surface grid scan.

Mirrors the compiled kernel operation-for-operation (same association order
of additions, same boundary comparisons) so both backends return bit-equal
results, including tie-breaking by first occurrence in lexicographic index
order.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def grid_scan(
    cv: np.ndarray,
    cb: np.ndarray,
    remaining: float,
    step: float,
    start: int,
    stop: int,
):
    """Scan the free-coordinate grid for K = len(cv) in {2, 3, 4}.

    Free coordinates take values (i+1)*step for i in 0..M-1 (M = round(1/step));
    the first free coordinate is restricted to indices [start, stop). The last
    coordinate is solved from the budget; points where it falls outside (0, 1]
    are skipped. Returns (best_value, best_free_indices, best_last) with
    best_free_indices None when no feasible point exists.
    """
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _scan(
            np.asarray(cv, dtype=float),
            np.asarray(cb, dtype=float),
            float(remaining),
            float(step),
            int(start),
            int(stop),
        )


def _scan(cv, cb, remaining, step, start, stop):
    k = cv.shape[0]
    m = int(round(1.0 / step))
    grid = (np.arange(m, dtype=float) + 1.0) * step
    if k == 2:
        g1 = grid[start:stop]
        s1 = cb[0] * g1
        lam_last = (remaining - s1) / cb[1]
        t = cv[0] / g1 + cv[1] / lam_last
        ok = (lam_last > 0.0) & (lam_last <= 1.0)
        if not ok.any():
            return np.inf, None, 0.0
        t = np.where(ok, t, np.inf)
        j = int(np.argmin(t))
        return float(t[j]), (start + j,), float(lam_last[j])
    if k == 3:
        g1 = grid[start:stop]
        t1 = (cv[0] / g1)[:, None]
        s1 = (cb[0] * g1)[:, None]
        t2 = t1 + cv[1] / grid[None, :]
        s2 = s1 + cb[1] * grid[None, :]
        lam_last = (remaining - s2) / cb[2]
        t = t2 + cv[2] / lam_last
        ok = (lam_last > 0.0) & (lam_last <= 1.0)
        if not ok.any():
            return np.inf, None, 0.0
        t = np.where(ok, t, np.inf)
        flat = int(np.argmin(t))
        i1, i2 = divmod(flat, m)
        return float(t[i1, i2]), (start + i1, i2), float(lam_last[i1, i2])
    if k == 4:
        best = np.inf
        best_idx = None
        best_last = 0.0
        t23 = cv[1] / grid[:, None] + cv[2] / grid[None, :]
        s23 = cb[1] * grid[:, None] + cb[2] * grid[None, :]
        for i1 in range(start, stop):
            l1 = (i1 + 1) * step
            s3 = cb[0] * l1 + s23
            lam_last = (remaining - s3) / cb[3]
            t = (cv[0] / l1 + t23) + cv[3] / lam_last
            ok = (lam_last > 0.0) & (lam_last <= 1.0)
            if not ok.any():
                continue
            t = np.where(ok, t, np.inf)
            flat = int(np.argmin(t))
            val = float(t.flat[flat])
            if val < best:
                i2, i3 = divmod(flat, m)
                best = val
                best_idx = (i1, i2, i3)
                best_last = float(lam_last[i2, i3])
        return best, best_idx, best_last
    raise ValueError(f"grid scan supports 2-4 support points, got {k}")
