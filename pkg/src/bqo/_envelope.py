"""Upper envelope of lines ``a_i + b_i z`` (compiled inner loop)."""

import numpy as np
from numba import njit


@njit(cache=True)
def _envelope(a, b, tol, lo, hi, absc):
    """Envelope of one line family.

    Writes, for each breakpoint ``i`` of the envelope, the indices of the
    lines meeting there (``lo[i]`` with the smaller slope, ``hi[i]``) and the
    absolute breakpoint location ``absc[i]``.  Returns the number of
    breakpoints.
    """
    L = a.size
    # sort by slope, ties by intercept descending
    order = np.argsort(b, kind="mergesort")
    # merge near-equal slopes keeping the larger intercept
    keep = np.empty(L, dtype=np.int64)
    nk = 0
    i = 0
    while i < L:
        best = order[i]
        j = i + 1
        while j < L and b[order[j]] - b[order[i]] <= tol:
            if a[order[j]] > a[best]:
                best = order[j]
            j += 1
        keep[nk] = best
        nk += 1
        i = j
    stack = np.empty(nk, dtype=np.int64)
    start = np.empty(nk)
    top = 0
    for k in range(nk):
        j = keep[k]
        while top > 0:
            t = stack[top - 1]
            z = (a[t] - a[j]) / (b[j] - b[t])
            if z <= start[top - 1]:
                top -= 1
            else:
                stack[top] = j
                start[top] = z
                top += 1
                break
        if top == 0:
            stack[0] = j
            start[0] = -np.inf
            top = 1
    for k in range(top - 1):
        lo[k] = stack[k]
        hi[k] = stack[k + 1]
        absc[k] = abs(start[k + 1])
    return top - 1


@njit(cache=True)
def envelope_batch(a, B, tol):
    """Envelopes for lines ``a_i + B[i, k] z``, one family per column ``k``.

    Returns ``(lo, hi, absc, count)`` with ``lo``/``hi``/``absc`` of shape
    ``(L - 1, K)`` padded with ``-1`` indices and zero breakpoints.
    """
    L, K = B.shape
    n = max(L - 1, 1)
    lo = -np.ones((n, K), dtype=np.int64)
    hi = -np.ones((n, K), dtype=np.int64)
    absc = np.zeros((n, K))
    count = np.zeros(K, dtype=np.int64)
    blo = np.empty(n, dtype=np.int64)
    bhi = np.empty(n, dtype=np.int64)
    babs = np.empty(n)
    for k in range(K):
        c = _envelope(a, np.ascontiguousarray(B[:, k]), tol, blo, bhi, babs)
        count[k] = c
        for i in range(c):
            lo[i, k] = blo[i]
            hi[i, k] = bhi[i]
            absc[i, k] = babs[i]
    return lo, hi, absc, count
