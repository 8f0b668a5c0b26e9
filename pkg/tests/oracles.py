"""Independent reference implementations used only by the tests."""

import numpy as np


def dense_mna_crossbar(g, v, r_wire, r_source, r_sink):
    """Modified nodal analysis over the full network, dense, with explicit voltage sources.

    Unknowns: every row/column line node, every driver node, then one branch
    current per driving source.  Requires all resistances > 0.
    """
    g = np.asarray(g, dtype=float)
    rows, cols = g.shape
    n_line = rows * cols

    def rn(i, j):
        return i * cols + j

    def cn(i, j):
        return n_line + i * cols + j

    def dn(i):
        return 2 * n_line + i

    n = 2 * n_line + rows
    size = n + rows
    a = np.zeros((size, size))
    b = np.zeros(size)

    def stamp(p, q, cond):
        a[p, p] += cond
        if q is not None:
            a[q, q] += cond
            a[p, q] -= cond
            a[q, p] -= cond

    gw = 1.0 / r_wire
    for i in range(rows):
        stamp(dn(i), rn(i, 0), 1.0 / r_source)
        for j in range(cols):
            stamp(rn(i, j), cn(i, j), g[i, j])
            if j + 1 < cols:
                stamp(rn(i, j), rn(i, j + 1), gw)
            if i + 1 < rows:
                stamp(cn(i, j), cn(i + 1, j), gw)
    for j in range(cols):
        stamp(cn(rows - 1, j), None, 1.0 / r_sink)  # to ground
    for i in range(rows):
        k = n + i
        a[dn(i), k] += 1.0
        a[k, dn(i)] += 1.0
        b[k] = v[i]
    x = np.linalg.solve(a, b)
    return np.array([x[cn(rows - 1, j)] / r_sink for j in range(cols)])


def integer_matmul(q, x):
    """Pure-Python integer dot products, q: (out, in), x: (in,)."""
    return [sum(int(q[o][i]) * int(x[i]) for i in range(len(x))) for o in range(len(q))]
