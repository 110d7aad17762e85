"""Independent reference computations used by the tests."""

import itertools

import numpy as np


def enumerate_nnls(X, y, w=None):
    """Exhaustive active-set NNLS: best feasible unconstrained fit over all supports."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    sw = np.ones(len(y)) if w is None else np.sqrt(np.asarray(w, float))
    A, b = X * sw[:, None], y * sw
    n = A.shape[1]
    best, best_x = float(b @ b), np.zeros(n)
    for k in range(1, n + 1):
        for S in itertools.combinations(range(n), k):
            z, *_ = np.linalg.lstsq(A[:, S], b, rcond=None)
            if np.all(z >= 0):
                x = np.zeros(n)
                x[list(S)] = z
                r = b - A @ x
                if r @ r < best:
                    best, best_x = float(r @ r), x
    return best_x, best


def brute_delay_fit(y, M, w):
    """Fixed-weight NNLS at every delay by enumeration; returns (index, coef, wrss)."""
    fits = [enumerate_nnls(M[d], y, w) for d in range(M.shape[0])]
    d = int(np.argmin([f[1] for f in fits]))
    return d, fits[d][0], fits[d][1]
