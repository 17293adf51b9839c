"""Compiled inner loops for the sparse Cholesky factorization and solves.

All routines operate on plain CSC arrays. ``L`` columns store the diagonal
entry first, followed by strictly-lower row indices in ascending order.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def etree(n, Up, Ui):
    """Elimination tree of a matrix given by its upper triangle in CSC form."""
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Up[k], Up[k + 1]):
            i = Ui[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def _ereach(Up, Ui, k, parent, s, w, mark):
    # Pattern of row k of L, returned in s[top:n] in topological order.
    n = parent.shape[0]
    top = n
    w[k] = mark
    for p in range(Up[k], Up[k + 1]):
        i = Ui[p]
        if i > k:
            continue
        length = 0
        while w[i] != mark:
            s[length] = i
            length += 1
            w[i] = mark
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


@njit(cache=True)
def column_counts(n, Up, Ui, parent):
    """Exact column counts of L (diagonal included) by row-subtree traversal."""
    counts = np.ones(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Up, Ui, k, parent, s, w, k)
        for t in range(top, n):
            counts[s[t]] += 1
    return counts


@njit(cache=True)
def row_patterns(n, Up, Ui, parent, Lp):
    """Concatenated row patterns of L (strictly lower part) in topological order."""
    Rp = np.zeros(n + 1, dtype=np.int64)
    for k in range(n):
        Rp[k + 1] = Rp[k] + (Lp[k + 1] - Lp[k] - 1)
    total = Rp[n]
    Rp = np.zeros(n + 1, dtype=np.int64)
    Rj = np.empty(total, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    pos = 0
    for k in range(n):
        top = _ereach(Up, Ui, k, parent, s, w, k)
        for t in range(top, n):
            Rj[pos] = s[t]
            pos += 1
        Rp[k + 1] = pos
    return Rp, Rj


@njit(cache=True)
def numeric_cholesky(n, Up, Ui, Ux, Rp, Rj, Lp, Li, Lx, pivot_tol):
    """Up-looking numeric factorization into preallocated ``Li``/``Lx``.

    ``Rp``/``Rj`` are the row patterns from :func:`row_patterns`. Returns -1
    on success, otherwise the (permuted) column index of the first pivot
    that fell below ``pivot_tol``.
    """
    c = Lp[:-1].copy()
    x = np.zeros(n)
    for k in range(n):
        for p in range(Up[k], Up[k + 1]):
            x[Ui[p]] = Ux[p]
        d = x[k]
        x[k] = 0.0
        for t in range(Rp[k], Rp[k + 1]):
            i = Rj[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
        if d <= pivot_tol:
            return k
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return -1


@njit(cache=True)
def lsolve(Lp, Li, Lx, x):
    n = Lp.shape[0] - 1
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        xj = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            x[Li[p]] -= Lx[p] * xj


@njit(cache=True)
def ltsolve(Lp, Li, Lx, x):
    n = Lp.shape[0] - 1
    for j in range(n - 1, -1, -1):
        acc = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            acc -= Lx[p] * x[Li[p]]
        x[j] = acc / Lx[Lp[j]]


@njit(cache=True)
def sym_matvec(n, Ap, Ai, Ax, v):
    """y = A v for A stored as its lower triangle in CSC form."""
    y = np.zeros(n)
    for j in range(n):
        vj = v[j]
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            y[i] += Ax[p] * vj
            if i != j:
                y[j] += Ax[p] * v[i]
    return y
