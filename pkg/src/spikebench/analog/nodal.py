"""Resistive crossbar network solved by sparse nodal analysis.

Topology: every cell (i, j) sits between a row-line node and a column-line node.
Row lines are driven from the left through ``r_source``; column lines are sensed
at the bottom through ``r_sink`` into virtual ground; adjacent line nodes are
joined by ``r_wire``.  Zero resistances merge nodes, so the lossless limit is
handled exactly instead of through huge conductances.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.sparse.linalg import splu

from ..errors import NumericalError


def _edges(rows: int, cols: int, g_cell: np.ndarray, r_wire: float, r_source: float,
           r_sink: float):
    n_cell = rows * cols
    grid = np.arange(n_cell).reshape(rows, cols)
    row_node, col_node = grid, grid + n_cell
    src = 2 * n_cell + np.arange(rows)
    snk = 2 * n_cell + rows + np.arange(cols)

    def cond(r):
        return np.inf if r == 0 else 1.0 / r

    a = [row_node[:, :-1].ravel(), col_node[:-1, :].ravel(), src, col_node[-1, :], row_node.ravel()]
    b = [row_node[:, 1:].ravel(), col_node[1:, :].ravel(), row_node[:, 0], snk, col_node.ravel()]
    g = [np.full(rows * (cols - 1), cond(r_wire)), np.full((rows - 1) * cols, cond(r_wire)),
         np.full(rows, cond(r_source)), np.full(cols, cond(r_sink)), g_cell.ravel()]
    return np.concatenate(a), np.concatenate(b), np.concatenate(g), src, snk


class CrossbarNetwork:
    """Factorized nodal system for one programmed crossbar.

    ``currents(V)`` returns the sense current of every column for row drive
    voltages ``V`` of shape (rows,) or (rows, n); the factorization is reused
    across right-hand sides.
    """

    def __init__(self, g: np.ndarray, r_wire: float, r_source: float, r_sink: float):
        g = np.asarray(g, dtype=np.float64)
        if g.ndim != 2 or np.any(g < 0) or not np.all(np.isfinite(g)):
            raise NumericalError("cell conductances must be a finite non-negative matrix")
        if min(r_wire, r_source, r_sink) < 0:
            raise NumericalError("resistances must be non-negative")
        self.rows, self.cols = g.shape
        a, b, cond, src, snk = _edges(self.rows, self.cols, g, r_wire, r_source, r_sink)
        n_nodes = 2 * g.size + self.rows + self.cols

        short = np.isinf(cond)
        adj = sp.coo_matrix((np.ones(short.sum()), (a[short], b[short])), shape=(n_nodes, n_nodes))
        _, label = connected_components(adj, directed=False)
        src_cls, snk_cls = label[src], label[snk]
        if len(set(src_cls)) != self.rows or set(src_cls) & set(snk_cls):
            raise NumericalError("zero-resistance path shorts a driver to another terminal")
        n_cls = label.max() + 1
        fixed = np.zeros(n_cls, dtype=bool)
        fixed[src_cls] = True
        fixed[snk_cls] = True

        keep = ~short & (label[a] != label[b]) & (cond > 0)
        ca, cb, gk = label[a[keep]], label[b[keep]], cond[keep]
        lap = sp.coo_matrix((np.concatenate([gk, gk, -gk, -gk]),
                             (np.concatenate([ca, cb, ca, cb]), np.concatenate([ca, cb, cb, ca]))),
                            shape=(n_cls, n_cls)).tocsc()

        free = np.flatnonzero(~fixed)
        self._free = free
        # source class of row i is driven at V_i; sink classes sit at 0 V
        self._src_cls = src_cls
        lap_fs = lap[free][:, src_cls]
        self._rhs = -lap_fs
        if free.size:
            self._check_grounded(ca, cb, gk, n_cls, fixed, free)
            try:
                self._lu = splu(lap[free][:, free].tocsc())
            except RuntimeError as exc:
                raise NumericalError(f"singular crossbar system ({self.rows}x{self.cols}): {exc}") from exc

        # column j current = sum over edges entering its sink class from outside
        rows_i, cols_i, vals = [], [], []
        col_of_sink = {int(c): j for j, c in enumerate(snk_cls)}
        for u, v in ((ca, cb), (cb, ca)):
            hit = np.isin(v, snk_cls) & ~np.isin(u, snk_cls)
            rows_i.append(np.array([col_of_sink[int(c)] for c in v[hit]], dtype=int))
            cols_i.append(u[hit])
            vals.append(gk[hit])
        meas = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows_i), np.concatenate(cols_i))),
                             shape=(self.cols, n_cls)).tocsr()
        self._meas_free = meas[:, free]
        self._meas_src = meas[:, src_cls]

    def _check_grounded(self, ca, cb, gk, n_cls, fixed, free):
        pos = gk > 0
        adj = sp.coo_matrix((np.ones(pos.sum()), (ca[pos], cb[pos])), shape=(n_cls, n_cls))
        n_comp, comp = connected_components(adj, directed=False)
        grounded = np.zeros(n_comp, dtype=bool)
        grounded[comp[fixed]] = True
        if not grounded[comp[free]].all():
            raise NumericalError(
                f"singular crossbar system ({self.rows}x{self.cols}): floating nodes with no path "
                "to a driver or sense line")

    def currents(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        vec = v.ndim == 1
        v2 = v.reshape(self.rows, -1)
        out = self._meas_src @ v2
        if self._free.size:
            v_free = self._lu.solve(np.asarray(self._rhs @ v2))
            out = out + self._meas_free @ v_free
        out = np.asarray(out)
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite crossbar currents")
        return out[:, 0] if vec else out


@lru_cache(maxsize=64)
def _banded_template(rows: int, cols: int, r_wire: float, r_source: float, r_sink: float):
    """Wire and terminal stamps of the banded nodal matrix, which only depend
    on the crossbar shape; cell conductances are added per instance."""
    gw, gs, gk = 1.0 / r_wire, 1.0 / r_source, 1.0 / r_sink
    # cell (i, j) -> position; row node 2*pos, column node 2*pos + 1
    col_major = rows <= cols
    pos = (np.arange(cols)[None, :] * rows + np.arange(rows)[:, None] if col_major
           else np.arange(rows)[:, None] * cols + np.arange(cols)[None, :])
    row_step = rows if col_major else 1      # pos distance between (i, j) and (i, j + 1)
    col_step = 1 if col_major else cols      # pos distance between (i, j) and (i + 1, j)
    n = 2 * rows * cols
    ab = np.zeros((2 * max(row_step, col_step) + 1, n))
    rn, cn = 2 * pos, 2 * pos + 1
    diag = ab[0]
    # row-line wires
    diag[rn[:, :-1]] += gw
    diag[rn[:, 1:]] += gw
    ab[2 * row_step][rn[:, :-1]] = -gw
    # column-line wires
    diag[cn[:-1, :]] += gw
    diag[cn[1:, :]] += gw
    ab[2 * col_step][cn[:-1, :]] = -gw
    diag[rn[:, 0]] += gs
    diag[cn[-1, :]] += gk
    for a in (ab, rn, cn):
        a.flags.writeable = False
    return ab, rn.ravel(), cn.ravel(), rn[:, 0].copy(), cn[-1, :].copy()


class ResistiveCrossbar:
    """Fast path of :class:`CrossbarNetwork` when every resistance is positive.

    Row- and column-line nodes of each cell are interleaved and cells are
    enumerated along the shorter crossbar dimension, which makes the nodal
    matrix banded (half-bandwidth ``2 * min(rows, cols)``); it is factorized
    with a banded Cholesky decomposition.
    """

    def __init__(self, g: np.ndarray, r_wire: float, r_source: float, r_sink: float):
        g = np.asarray(g, dtype=np.float64)
        if g.ndim != 2 or np.any(g < 0) or not np.all(np.isfinite(g)):
            raise NumericalError("cell conductances must be a finite non-negative matrix")
        rows, cols = self.rows, self.cols = g.shape
        base, rn, cn, drive, sense = _banded_template(rows, cols, r_wire, r_source, r_sink)
        ab = base.copy()
        gf = g.ravel()
        ab[0, rn] += gf
        ab[0, cn] += gf
        ab[1, rn] = -gf  # coupling row(i,j) -> col(i,j)
        try:
            self._chol = cholesky_banded(ab, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular crossbar system ({rows}x{cols}): {exc}") from exc
        self._n = ab.shape[1]
        self._drive, self._sense = drive, sense
        self._gs, self._gk = 1.0 / r_source, 1.0 / r_sink

    def currents(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        vec = v.ndim == 1
        v2 = v.reshape(self.rows, -1)
        rhs = np.zeros((self._n, v2.shape[1]))
        rhs[self._drive] = self._gs * v2
        x = cho_solve_banded((self._chol, True), rhs)
        out = self._gk * x[self._sense]
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite crossbar currents")
        return out[:, 0] if vec else out


def network(g: np.ndarray, r_wire: float, r_source: float, r_sink: float):
    """Pick the resistive fast path when no node merging is needed."""
    if min(r_wire, r_source, r_sink) > 0:
        return ResistiveCrossbar(g, r_wire, r_source, r_sink)
    return CrossbarNetwork(g, r_wire, r_source, r_sink)


def solve_crossbar(g: np.ndarray, v: np.ndarray, r_wire: float, r_source: float = 0.0,
                   r_sink: float = 0.0) -> np.ndarray:
    return network(g, r_wire, r_source, r_sink).currents(v)
