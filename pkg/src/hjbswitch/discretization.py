"""Tensor grids, discrete operators and the linear Dirichlet bound.

The second-order part of ``[c - L]`` uses central differences (mixed terms
by the monotone 4-point cross stencil), the drift uses first-order
differences upwinded against the sign of its coefficient, and the chain
coupling adds same-node entries between states.  Every interior row must
keep the M-matrix sign pattern (positive diagonal, nonpositive
off-diagonals); assembly fails loudly with the offending node otherwise,
since the comparison arguments used throughout rest on that structure.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import Domain, ProblemSpec

_SIGN_TOL = 1e-13


class MonotonicityLoss(Exception):
    """An assembled interior row violated the M-matrix sign pattern."""


class LinearSolveFailure(Exception):
    """Linear solve residual stayed above tolerance."""


class Grid:
    """Uniform tensor grid over an axis-aligned box (dim 1 or 2)."""

    def __init__(self, domain: Domain, nodes):
        if np.isscalar(nodes):
            nodes = (int(nodes),) * domain.dim
        nodes = tuple(int(nk) for nk in nodes)
        if len(nodes) != domain.dim:
            raise ValueError("one node count per axis required")
        if any(nk < 3 for nk in nodes):
            raise ValueError("need at least 3 nodes per axis")
        self.domain = domain
        self.dim = domain.dim
        self.nodes = nodes
        self.h = domain.widths / (np.array(nodes) - 1)
        self.axes = [np.linspace(domain.lower[k], domain.upper[k], nodes[k]) for k in range(self.dim)]
        self.n_total = int(np.prod(nodes))
        if self.dim == 1:
            self.points = self.axes[0][:, None]
            boundary = np.zeros(self.n_total, dtype=bool)
            boundary[[0, -1]] = True
        else:
            xx, yy = np.meshgrid(self.axes[0], self.axes[1], indexing="ij")
            self.points = np.column_stack([xx.ravel(), yy.ravel()])
            ii, jj = np.divmod(np.arange(self.n_total), nodes[1])
            boundary = (ii == 0) | (ii == nodes[0] - 1) | (jj == 0) | (jj == nodes[1] - 1)
        self.boundary_mask = boundary
        self.interior_mask = ~boundary
        self.interior_idx = np.flatnonzero(self.interior_mask)
        self.boundary_idx = np.flatnonzero(self.boundary_mask)
        self.n_interior = self.interior_idx.size
        # position of each full-grid node in the interior ordering (-1 on boundary)
        self._interior_pos = np.full(self.n_total, -1, dtype=np.int64)
        self._interior_pos[self.interior_idx] = np.arange(self.n_interior)

    def flat(self, multi):
        if self.dim == 1:
            return int(multi[0])
        return int(multi[0]) * self.nodes[1] + int(multi[1])

    def shift(self, flat_idx, axis, step):
        """Flat index of the neighbour ``step`` nodes along ``axis``."""
        if self.dim == 1:
            return flat_idx + step
        if axis == 0:
            return flat_idx + step * self.nodes[1]
        return flat_idx + step

    def nearest_node(self, x):
        x = np.asarray(x, dtype=float)
        multi = [int(round((x[k] - self.domain.lower[k]) / self.h[k])) for k in range(self.dim)]
        multi = [min(max(mk, 0), self.nodes[k] - 1) for k, mk in enumerate(multi)]
        return self.flat(multi)

    def spacing_max(self):
        return float(self.h.max())

    def to_dict(self):
        return {
            "dim": self.dim,
            "lower": self.domain.lower.tolist(),
            "upper": self.domain.upper.tolist(),
            "nodes": list(self.nodes),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(Domain(d["dim"], d["lower"], d["upper"]), tuple(d["nodes"]))


def sample_state_tables(spec: ProblemSpec, grid: Grid):
    """Node samples of all coefficient maps, one table per chain state."""
    n, pts = spec.idx.n, grid.points
    d = grid.dim
    tabs = {
        "a": np.empty((n, grid.n_total, d, d)),
        "b": np.empty((n, grid.n_total, d)),
        "c": np.empty((n, grid.n_total)),
        "h": np.empty((n, grid.n_total)),
        "g": np.empty((n, grid.n_total)),
        "f": np.empty((n, grid.n_total)),
    }
    for state in range(n):
        tabs["a"][state] = spec.coeffs.a(pts, state)
        tabs["b"][state] = spec.coeffs.b(pts, state)
        for name in ("c", "h", "g", "f"):
            tabs[name][state] = getattr(spec.coeffs, name)(pts, state)
    return tabs


class FieldMatrix:
    """Grid function indexed by (regime, chain state, node).

    Boundary nodes always hold the terminal cost ``f`` of their state, for
    every regime; constructors enforce it.
    """

    def __init__(self, grid: Grid, values, kind="field", eps=None, delta=None):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or values.shape[2] != grid.n_total:
            raise ValueError("values must have shape (m, n, n_nodes)")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        self.grid = grid
        self.values = values
        self.m, self.n = values.shape[0], values.shape[1]
        self.kind = kind
        self.eps = eps
        self.delta = delta

    @classmethod
    def from_boundary(cls, spec: ProblemSpec, grid: Grid, interior=None, kind="field",
                      eps=None, delta=None, fill=0.0):
        """Field equal to ``f`` on the boundary and ``interior`` (or ``fill``) inside."""
        m, n = spec.idx.m, spec.idx.n
        vals = np.full((m, n, grid.n_total), float(fill))
        if interior is not None:
            vals[:, :, grid.interior_idx] = interior
        bpts = grid.points[grid.boundary_idx]
        for state in range(n):
            fb = spec.coeffs.f(bpts, state)
            vals[:, state, grid.boundary_idx] = fb[None, :]
        return cls(grid, vals, kind=kind, eps=eps, delta=delta)

    def copy(self, kind=None, eps=None, delta=None):
        return FieldMatrix(self.grid, self.values.copy(),
                           kind=kind or self.kind,
                           eps=self.eps if eps is None else eps,
                           delta=self.delta if delta is None else delta)

    def sup_diff(self, other) -> float:
        return float(np.abs(self.values - other.values).max())

    def interior(self):
        return self.values[:, :, self.grid.interior_idx]

    def to_json(self) -> str:
        payload = {
            "kind": self.kind,
            "eps": self.eps,
            "delta": self.delta,
            "m": self.m,
            "n": self.n,
            "grid": self.grid.to_dict(),
            "values": self.values.tolist(),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FieldMatrix":
        d = json.loads(text)
        grid = Grid.from_dict(d["grid"])
        return cls(grid, np.array(d["values"], dtype=float), kind=d["kind"],
                   eps=d["eps"], delta=d["delta"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        coords = ["x", "y"][: self.grid.dim]
        cols = [f"u_l{l}_i{i}" for l in range(self.m) for i in range(self.n)]
        buf.write(",".join(coords + cols) + "\r\n")
        pts = self.grid.points
        for p in range(self.grid.n_total):
            row = [repr(float(pts[p, k])) for k in range(self.grid.dim)]
            row += [repr(float(self.values[l, i, p])) for l in range(self.m) for i in range(self.n)]
            buf.write(",".join(row) + "\r\n")
        return buf.getvalue()


class OperatorStencil:
    """Interior rows of ``c_iota I - L_{ell,iota}`` on one (regime, state) block.

    ``own`` maps the full own-state grid function to interior residual
    contributions (diffusion, drift, zeroth order and the chain diagonal);
    ``chain`` lists the same-node coupling rates to the other states.
    """

    def __init__(self, ell, iota, own: sp.csr_matrix, chain: dict):
        self.ell = ell
        self.iota = iota
        self.own = own
        self.chain = chain

    def apply(self, values):
        """Apply to an (n_states, n_nodes) regime block; returns interior rows."""
        out = self.own @ values[self.iota]
        for kappa, rate in self.chain.items():
            out = out - rate * values[kappa][self.own_interior_idx]
        return out

    @property
    def own_interior_idx(self):
        return self._interior_idx

    def _set_interior_idx(self, idx):
        self._interior_idx = idx


def assemble_L(spec: ProblemSpec, grid: Grid, ell: int, iota: int) -> OperatorStencil:
    """Assemble the interior stencil of ``c - L`` for one (regime, state).

    Raises :class:`MonotonicityLoss` if any interior row loses the M-matrix
    sign pattern (e.g. the mixed-derivative guard fails).
    """
    tabs = sample_state_tables(spec, grid)
    return _assemble_from_tables(spec, grid, tabs, ell, iota)


def _assemble_from_tables(spec, grid, tabs, ell, iota, include_chain=True):
    d = grid.dim
    idx = grid.interior_idx
    a = tabs["a"][iota][idx]
    b = tabs["b"][iota][idx]
    c = tabs["c"][iota][idx]
    q = spec.generators[ell].q
    ni = idx.size
    rows, cols, vals = [], [], []

    def add(r, col_flat, v):
        rows.append(r)
        cols.append(col_flat)
        vals.append(v)

    diag = c.copy()
    if include_chain:
        diag += -q[iota, iota]

    neighbor_entries = [dict() for _ in range(ni)]  # col -> coefficient

    for k in range(d):
        akk = a[:, k, k]
        hk = grid.h[k]
        up = np.array([grid.shift(p, k, +1) for p in idx])
        dn = np.array([grid.shift(p, k, -1) for p in idx])
        coef = akk / hk**2
        diag += 2.0 * coef
        for r in range(ni):
            neighbor_entries[r][up[r]] = neighbor_entries[r].get(up[r], 0.0) - coef[r]
            neighbor_entries[r][dn[r]] = neighbor_entries[r].get(dn[r], 0.0) - coef[r]
        # drift +b_k d_k u, differenced against the sign of b_k
        bk = b[:, k]
        pos = bk >= 0
        coef_b = np.abs(bk) / hk
        diag += coef_b
        for r in range(ni):
            if coef_b[r] == 0.0:
                continue
            col = dn[r] if pos[r] else up[r]
            neighbor_entries[r][col] = neighbor_entries[r].get(col, 0.0) - coef_b[r]

    if d == 2:
        a12 = a[:, 0, 1]
        h1h2 = grid.h[0] * grid.h[1]
        for r in range(ni):
            ar = a12[r]
            if ar == 0.0:
                continue
            p = idx[r]
            mag = abs(ar) / h1h2
            diag[r] -= 2.0 * mag
            if ar > 0:
                corners = (grid.shift(grid.shift(p, 0, +1), 1, +1),
                           grid.shift(grid.shift(p, 0, -1), 1, -1))
            else:
                corners = (grid.shift(grid.shift(p, 0, +1), 1, -1),
                           grid.shift(grid.shift(p, 0, -1), 1, +1))
            for col in corners:
                neighbor_entries[r][col] = neighbor_entries[r].get(col, 0.0) - mag
            for col in (grid.shift(p, 0, +1), grid.shift(p, 0, -1),
                        grid.shift(p, 1, +1), grid.shift(p, 1, -1)):
                neighbor_entries[r][col] = neighbor_entries[r].get(col, 0.0) + mag

    for r in range(ni):
        if diag[r] <= 0.0:
            raise MonotonicityLoss(
                f"nonpositive diagonal {diag[r]:.3e} at node {int(idx[r])} (regime {ell}, state {iota})")
        add(r, int(idx[r]), diag[r])
        for col, v in neighbor_entries[r].items():
            if v > _SIGN_TOL:
                raise MonotonicityLoss(
                    f"positive off-diagonal {v:.3e} at node {int(idx[r])} -> {int(col)} "
                    f"(regime {ell}, state {iota}); mixed-derivative guard failed")
            add(r, int(col), v)

    own = sp.csr_matrix((vals, (rows, cols)), shape=(ni, grid.n_total))
    chain = {}
    if include_chain:
        chain = {kappa: float(q[iota, kappa]) for kappa in range(spec.idx.n)
                 if kappa != iota and q[iota, kappa] != 0.0}
    st = OperatorStencil(ell, iota, own, chain)
    st._set_interior_idx(idx)
    return st


class RegimeOperator:
    """Coupled ``c - L`` over all chain states of one regime."""

    def __init__(self, spec, grid, ell, tabs=None):
        tabs = tabs or sample_state_tables(spec, grid)
        self.grid = grid
        self.ell = ell
        self.n = spec.idx.n
        self.stencils = [_assemble_from_tables(spec, grid, tabs, ell, iota)
                         for iota in range(self.n)]
        ni = grid.n_interior
        blocks = [[None] * self.n for _ in range(self.n)]
        bnd_blocks = [[None] * self.n for _ in range(self.n)]
        int_cols = grid.interior_idx
        bnd_cols = grid.boundary_idx
        eye_int = sp.identity(ni, format="csr")
        for iota, st in enumerate(self.stencils):
            blocks[iota][iota] = st.own[:, int_cols]
            bnd_blocks[iota][iota] = st.own[:, bnd_cols]
            for kappa, rate in st.chain.items():
                coupling = -rate * eye_int
                blocks[iota][kappa] = coupling if blocks[iota][kappa] is None else blocks[iota][kappa] + coupling
        self.A_int = sp.bmat(blocks, format="csc")
        self.B_bnd = sp.bmat(bnd_blocks, format="csr")

    def apply(self, values):
        """[c - L] u on interior nodes; ``values`` is (n_states, n_nodes)."""
        out = np.empty((self.n, self.grid.n_interior))
        for iota, st in enumerate(self.stencils):
            out[iota] = st.apply(values)
        return out


def _linear_solve(A, rhs, dim):
    """Direct banded/sparse elimination in 1D, ILU-preconditioned BiCGSTAB
    with a direct fallback otherwise.  Relative residual must reach 1e-10."""
    rhs = np.asarray(rhs, dtype=float)
    norm = np.linalg.norm(rhs)
    if norm == 0.0:
        return np.zeros_like(rhs)

    def residual_ok(x):
        return np.linalg.norm(A @ x - rhs) <= 1e-10 * (1.0 + norm)

    if dim > 1:
        try:
            ilu = spla.spilu(sp.csc_matrix(A), drop_tol=1e-5, fill_factor=20)
            prec = spla.LinearOperator(A.shape, ilu.solve)
            x, info = spla.bicgstab(A, rhs, rtol=1e-12, atol=1e-14, maxiter=10_000, M=prec)
            if info == 0 and residual_ok(x):
                return x
        except RuntimeError:
            pass
    try:
        x = spla.splu(sp.csc_matrix(A)).solve(rhs)
    except RuntimeError as exc:
        raise LinearSolveFailure(f"direct factorization failed: {exc}") from exc
    if not residual_ok(x):
        raise LinearSolveFailure("residual above 1e-10 after direct solve")
    return x


def solve_dirichlet_bound(spec: ProblemSpec, grid: Grid) -> FieldMatrix:
    """Solve ``[c - L] ubar = h`` with ``ubar = f`` on the boundary.

    The result bounds the penalised solutions from above and seeds the
    fixed-point iteration; the discrete maximum principle makes it
    nonnegative for nonnegative data, which is asserted.
    """
    tabs = sample_state_tables(spec, grid)
    m, n = spec.idx.m, spec.idx.n
    ni = grid.n_interior
    field = FieldMatrix.from_boundary(spec, grid, kind="ubar")
    f_bnd = field.values[0][:, grid.boundary_idx].reshape(n * grid.boundary_idx.size)
    h_int = tabs["h"][:, grid.interior_idx].reshape(n * ni)
    for ell in range(m):
        op = RegimeOperator(spec, grid, ell, tabs)
        rhs = h_int - op.B_bnd @ f_bnd
        x = _linear_solve(op.A_int, rhs, grid.dim)
        field.values[ell][:, grid.interior_idx] = x.reshape(n, ni)
    if np.all(tabs["h"] >= 0) and np.all(tabs["f"] >= 0):
        min_val = float(field.values.min())
        if min_val < -1e-9:
            raise LinearSolveFailure(
                f"Dirichlet bound lost nonnegativity (min {min_val:.3e}); "
                "check coefficient signs or solver tolerance")
    return field


def apply_M(u: FieldMatrix, costs, ell: int, iota: int, node: int):
    """Switching operator value and its argmin at one node.

    Returns ``(value, target)``; for a single regime the minimum is empty
    and the sentinel ``(inf, None)`` keeps the switching branch inactive.
    Ties break to the lowest target index.
    """
    m = u.m
    if m == 1:
        return float("inf"), None
    best, target = float("inf"), None
    for lp in range(m):  # ascending, so the lowest index wins ties
        if lp == ell:
            continue
        val = float(u.values[lp, iota, node] + costs.theta[ell, lp])
        if val < best:
            best, target = val, lp
    return best, target


def switching_envelope(u_values, theta):
    """Vectorised ``M u`` and argmin over all (regime, state, node).

    Returns ``(MU, target)`` with shapes (m, n, N); for m = 1 the envelope
    is +inf and targets are -1.
    """
    m = u_values.shape[0]
    MU = np.full_like(u_values, np.inf)
    target = np.full(u_values.shape, -1, dtype=np.int32)
    for ell in range(m):
        for lp in range(m):
            if lp == ell:
                continue
            cand = u_values[lp] + theta[ell, lp]
            better = cand < MU[ell]
            MU[ell] = np.where(better, cand, MU[ell])
            target[ell] = np.where(better, lp, target[ell])
    return MU, target


def gradient_matrices(grid: Grid):
    """Central-difference matrices, one per axis, interior rows x full grid."""
    idx = grid.interior_idx
    ni = idx.size
    mats = []
    for k in range(grid.dim):
        up = np.array([grid.shift(p, k, +1) for p in idx])
        dn = np.array([grid.shift(p, k, -1) for p in idx])
        coef = 0.5 / grid.h[k]
        rows = np.repeat(np.arange(ni), 2)
        cols = np.column_stack([up, dn]).ravel()
        vals = np.tile([coef, -coef], ni)
        mats.append(sp.csr_matrix((vals, (rows, cols)), shape=(ni, grid.n_total)))
    return mats


def node_gradients(grid: Grid, values):
    """Per-node gradient of a full-grid function, central inside and
    one-sided on the boundary; ``values`` has shape (..., n_nodes)."""
    lead = values.shape[:-1]
    resh = values.reshape(*lead, *grid.nodes)
    out = np.empty(lead + (grid.n_total, grid.dim))
    for k in range(grid.dim):
        gk = np.gradient(resh, grid.h[k], axis=len(lead) + k)
        out[..., k] = gk.reshape(*lead, grid.n_total)
    return out
