# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled budget-surface grid scan: the hot kernel of the optimality oracle.

Semantics are identical to the NumPy fallback (same operation order, same
boundary comparisons, first-occurrence tie-breaking); only the iteration
strategy differs. GIL released during the scan so callers can thread over
blocks of the first free coordinate.
"""

from libc.math cimport INFINITY

BACKEND_NAME = "cython"


def grid_scan(double[::1] cv, double[::1] cb, double remaining, double step,
              Py_ssize_t start, Py_ssize_t stop):
    """See twophase._gridpure.grid_scan; same contract, compiled."""
    cdef Py_ssize_t k = cv.shape[0]
    cdef Py_ssize_t m = <Py_ssize_t> (1.0 / step + 0.5)
    cdef double best = INFINITY
    cdef double best_last = 0.0
    cdef Py_ssize_t b1 = -1, b2 = -1, b3 = -1

    if k == 2:
        with nogil:
            best = _scan2(&cv[0], &cb[0], remaining, step, start, stop,
                          &b1, &best_last)
        if b1 < 0:
            return INFINITY, None, 0.0
        return best, (b1,), best_last
    if k == 3:
        with nogil:
            best = _scan3(&cv[0], &cb[0], remaining, step, m, start, stop,
                          &b1, &b2, &best_last)
        if b1 < 0:
            return INFINITY, None, 0.0
        return best, (b1, b2), best_last
    if k == 4:
        with nogil:
            best = _scan4(&cv[0], &cb[0], remaining, step, m, start, stop,
                          &b1, &b2, &b3, &best_last)
        if b1 < 0:
            return INFINITY, None, 0.0
        return best, (b1, b2, b3), best_last
    raise ValueError(f"grid scan supports 2-4 support points, got {k}")


cdef double _scan2(const double* cv, const double* cb, double remaining,
                   double step, Py_ssize_t start, Py_ssize_t stop,
                   Py_ssize_t* b1, double* best_last) noexcept nogil:
    cdef double best = INFINITY
    cdef Py_ssize_t i1
    cdef double l1, lam_last, t
    for i1 in range(start, stop):
        l1 = (i1 + 1) * step
        lam_last = (remaining - cb[0] * l1) / cb[1]
        if lam_last > 0.0 and lam_last <= 1.0:
            t = cv[0] / l1 + cv[1] / lam_last
            if t < best:
                best = t
                b1[0] = i1
                best_last[0] = lam_last
    return best


cdef double _scan3(const double* cv, const double* cb, double remaining,
                   double step, Py_ssize_t m, Py_ssize_t start, Py_ssize_t stop,
                   Py_ssize_t* b1, Py_ssize_t* b2, double* best_last) noexcept nogil:
    cdef double best = INFINITY
    cdef Py_ssize_t i1, i2
    cdef double l1, l2, t1, s1, t2, s2, lam_last, t
    for i1 in range(start, stop):
        l1 = (i1 + 1) * step
        t1 = cv[0] / l1
        s1 = cb[0] * l1
        for i2 in range(m):
            l2 = (i2 + 1) * step
            s2 = s1 + cb[1] * l2
            lam_last = (remaining - s2) / cb[2]
            if lam_last > 0.0 and lam_last <= 1.0:
                t2 = t1 + cv[1] / l2
                t = t2 + cv[2] / lam_last
                if t < best:
                    best = t
                    b1[0] = i1
                    b2[0] = i2
                    best_last[0] = lam_last
    return best


cdef double _scan4(const double* cv, const double* cb, double remaining,
                   double step, Py_ssize_t m, Py_ssize_t start, Py_ssize_t stop,
                   Py_ssize_t* b1, Py_ssize_t* b2, Py_ssize_t* b3,
                   double* best_last) noexcept nogil:
    # Matches the fallback's association order:
    #   t = (cv0/l1 + (cv1/l2 + cv2/l3)) + cv3/lam_last
    #   s3 = cb0*l1 + (cb1*l2 + cb2*l3)
    cdef double best = INFINITY
    cdef Py_ssize_t i1, i2, i3, i3lo, i3hi
    cdef double l1, l2, l3, a1, sb1, t23a, s23a, s3, lam_last, t, lo, hi
    for i1 in range(start, stop):
        l1 = (i1 + 1) * step
        a1 = cv[0] / l1
        sb1 = cb[0] * l1
        for i2 in range(m):
            l2 = (i2 + 1) * step
            t23a = cv[1] / l2
            s23a = cb[1] * l2
            # feasible window in l3: lam_last in (0, 1] <=>
            #   remaining - cb3 <= sb1 + (s23a + cb2*l3) < remaining
            lo = (remaining - cb[3] - sb1 - s23a) / cb[2]
            hi = (remaining - sb1 - s23a) / cb[2]
            i3lo = <Py_ssize_t> (lo / step) - 2
            if i3lo < 0:
                i3lo = 0
            i3hi = <Py_ssize_t> (hi / step) + 2
            if i3hi > m:
                i3hi = m
            for i3 in range(i3lo, i3hi):
                l3 = (i3 + 1) * step
                s3 = sb1 + (s23a + cb[2] * l3)
                lam_last = (remaining - s3) / cb[3]
                if lam_last > 0.0 and lam_last <= 1.0:
                    t = (a1 + (t23a + cv[2] / l3)) + cv[3] / lam_last
                    if t < best:
                        best = t
                        b1[0] = i1
                        b2[0] = i2
                        b3[0] = i3
                        best_last[0] = lam_last
    return best
