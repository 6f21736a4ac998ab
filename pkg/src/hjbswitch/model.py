"""Problem instances for the switching/gradient-constrained control solver.

A :class:`ProblemSpec` collects the box domain, the regime and chain-state
index sets, one generator matrix per regime, the coefficient maps
``a, b, c, h, g, f`` and the matrix of switching costs.  :func:`validate`
checks the structural assumptions the solver relies on (row sums of the
generators, nonnegative and triangle-consistent switching costs, no
zero-cost switching loop, uniform ellipticity, sign conditions) and returns
a report rather than raising, so a CLI can print every failure with its
witness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .expressions import Expression

_ROWSUM_TOL = 1e-12


class NonElliptic(Exception):
    """Sampled diffusion matrix failed the uniform ellipticity bound."""


@dataclass(frozen=True)
class Domain:
    """Axis-aligned open box ``prod_i (lower[i], upper[i])``, dim 1 or 2."""

    dim: int
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.lower.shape != (self.dim,) or self.upper.shape != (self.dim,):
            raise ValueError("lower/upper must have length dim")
        if not np.all(self.lower < self.upper):
            raise ValueError("need lower[i] < upper[i] on every axis")

    @property
    def widths(self):
        return self.upper - self.lower

    def contains(self, x, closed=True):
        x = np.asarray(x, dtype=float)
        if closed:
            return bool(np.all(x >= self.lower) and np.all(x <= self.upper))
        return bool(np.all(x > self.lower) and np.all(x < self.upper))


@dataclass(frozen=True)
class RegimeChainIndex:
    """Sizes of the regime set and the chain state set."""

    m: int
    n: int

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("need m >= 1 and n >= 1")


class GeneratorMatrix:
    """Transition-rate matrix of the chain while one regime is active.

    Off-diagonal entries must be nonnegative and every row must sum to zero
    (within 1e-12); both are enforced at construction.
    """

    def __init__(self, q):
        q = np.asarray(q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError("generator must be a square matrix")
        off = q.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off < 0):
            i, k = np.argwhere(off < 0)[0]
            raise ValueError(f"negative off-diagonal rate q[{i},{k}] = {q[i, k]}")
        rowsum = q.sum(axis=1)
        if np.any(np.abs(rowsum) > _ROWSUM_TOL):
            i = int(np.argmax(np.abs(rowsum)))
            raise ValueError(f"row {i} sums to {rowsum[i]:.3e}, not 0")
        self.q = q
        self.n = q.shape[0]

    def __repr__(self):
        return f"GeneratorMatrix({self.q.tolist()})"


@dataclass(frozen=True)
class Coefficients:
    """Coefficient maps of the operator and the cost functional.

    Every map takes an ``(npoints, dim)`` array of positions and a chain
    state index; ``a`` returns ``(npoints, dim, dim)`` symmetric matrices,
    ``b`` returns ``(npoints, dim)`` vectors and ``c, h, g, f`` return
    ``(npoints,)`` scalars.
    """

    dim: int
    n_states: int
    a: Callable
    b: Callable
    c: Callable
    h: Callable
    g: Callable
    f: Callable

    @classmethod
    def from_expressions(cls, dim, n_states, a, b, c, h, g, f):
        """Build coefficient maps from expression strings.

        ``c, h, g, f`` are lists with one expression per chain state (or a
        single expression shared by all states).  ``a`` entries are either a
        single expression (isotropic ``a*I``) or a ``dim x dim`` nested list;
        ``b`` entries are a length-``dim`` list (or one expression in 1D).
        """

        def per_state(spec_list):
            if isinstance(spec_list, (str, int, float)):
                spec_list = [spec_list] * n_states
            if len(spec_list) != n_states:
                raise ValueError(f"expected {n_states} per-state entries, got {len(spec_list)}")
            return list(spec_list)

        def scalar_map(spec_list):
            exprs = [Expression(s, dim) for s in per_state(spec_list)]
            return lambda pts, state: exprs[state](pts)

        a_entries = []
        for entry in per_state(a):
            if isinstance(entry, (str, int, float)):
                diag = Expression(entry, dim)
                a_entries.append([[diag if i == j else None for j in range(dim)] for i in range(dim)])
            else:
                rows = [[Expression(e, dim) for e in row] for row in entry]
                if len(rows) != dim or any(len(r) != dim for r in rows):
                    raise ValueError("a entries must be dim x dim")
                a_entries.append(rows)

        def a_map(pts, state):
            pts = np.atleast_2d(pts)
            out = np.zeros((pts.shape[0], dim, dim))
            for i in range(dim):
                for j in range(dim):
                    e = a_entries[state][i][j]
                    if e is not None:
                        out[:, i, j] = e(pts)
            return out

        b_entries = []
        for entry in per_state(b):
            if isinstance(entry, (str, int, float)):
                entry = [entry] if dim == 1 else entry
            comps = [Expression(e, dim) for e in entry]
            if len(comps) != dim:
                raise ValueError("b entries must have length dim")
            b_entries.append(comps)

        def b_map(pts, state):
            pts = np.atleast_2d(pts)
            out = np.zeros((pts.shape[0], dim))
            for k in range(dim):
                out[:, k] = b_entries[state][k](pts)
            return out

        return cls(dim=dim, n_states=n_states, a=a_map, b=b_map, c=scalar_map(c),
                   h=scalar_map(h), g=scalar_map(g), f=scalar_map(f))


class SwitchingCosts:
    """Matrix of regime switching costs; the diagonal is stored as zero."""

    def __init__(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
            raise ValueError("theta must be square")
        theta = theta.copy()
        np.fill_diagonal(theta, 0.0)
        self.theta = theta
        self.m = theta.shape[0]

    def __repr__(self):
        return f"SwitchingCosts({self.theta.tolist()})"


@dataclass
class ProblemSpec:
    """A full problem instance."""

    domain: Domain
    idx: RegimeChainIndex
    generators: Sequence[GeneratorMatrix]
    coeffs: Coefficients
    costs: SwitchingCosts
    theta_ellipticity: float = float("nan")

    def __post_init__(self):
        if len(self.generators) != self.idx.m:
            raise ValueError(f"need {self.idx.m} generators, got {len(self.generators)}")
        for gen in self.generators:
            if gen.n != self.idx.n:
                raise ValueError("generator size does not match chain state count")
        if self.costs.m != self.idx.m:
            raise ValueError("switching cost matrix size does not match regime count")
        if self.coeffs.dim != self.domain.dim:
            raise ValueError("coefficient dim does not match domain dim")


def zero_cost_cycle(costs: SwitchingCosts) -> Optional[list]:
    """Find a directed cycle of regimes whose switch costs are all zero.

    Returns the cycle as a list of 0-based regime indices with the start
    repeated at the end (e.g. ``[0, 1, 0]``), or ``None``.  DFS on the
    zero-cost edge graph; self-loops are excluded because the diagonal is
    not a switch.
    """
    m = costs.m
    adj = [[lp for lp in range(m) if lp != l and costs.theta[l, lp] == 0.0] for l in range(m)]
    color = [0] * m  # 0 unvisited, 1 on stack, 2 done
    stack: list = []

    def dfs(v):
        color[v] = 1
        stack.append(v)
        for w in adj[v]:
            if color[w] == 1:
                return stack[stack.index(w):] + [w]
            if color[w] == 0:
                found = dfs(w)
                if found:
                    return found
        stack.pop()
        color[v] = 2
        return None

    for v in range(m):
        if color[v] == 0:
            cycle = dfs(v)
            if cycle:
                return cycle
    return None


def _sample_points(domain: Domain, per_axis: int) -> np.ndarray:
    axes = [np.linspace(domain.lower[k], domain.upper[k], per_axis) for k in range(domain.dim)]
    if domain.dim == 1:
        return axes[0][:, None]
    xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def estimate_theta(coeffs: Coefficients, domain: Domain, samples: int, tol: float = 1e-10) -> float:
    """Smallest sampled eigenvalue of ``a`` over the closed domain and all states.

    Deterministic sampling on a uniform closed grid with ``samples`` points
    per axis.  Raises :class:`NonElliptic` if the minimum is <= ``tol``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    pts = _sample_points(domain, max(samples, 2))
    theta = np.inf
    for state in range(coeffs.n_states):
        amat = coeffs.a(pts, state)
        eigs = np.linalg.eigvalsh(0.5 * (amat + np.swapaxes(amat, 1, 2)))
        theta = min(theta, float(eigs.min()))
    if theta <= tol:
        raise NonElliptic(f"sampled ellipticity constant {theta:.3e} <= {tol:.0e}")
    return theta


@dataclass
class CheckEntry:
    name: str
    passed: bool
    witness: Optional[str] = None

    def __str__(self):
        mark = "pass" if self.passed else "FAIL"
        tail = f" [{self.witness}]" if self.witness else ""
        return f"{mark:4s}  {self.name}{tail}"


@dataclass
class ValidationReport:
    entries: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(e.passed for e in self.entries)

    def add(self, name, passed, witness=None):
        self.entries.append(CheckEntry(name, bool(passed), witness))

    def __str__(self):
        lines = [str(e) for e in self.entries]
        lines.append(f"overall: {'pass' if self.ok else 'FAIL'}")
        return "\n".join(lines)

    def to_dict(self):
        return {
            "ok": self.ok,
            "entries": [
                {"name": e.name, "passed": e.passed, "witness": e.witness} for e in self.entries
            ],
        }


def validate(spec: ProblemSpec, samples: int = 33) -> ValidationReport:
    """Check a populated instance against the structural assumptions.

    Sign and ellipticity conditions are sampled on a uniform grid plus a 4x
    refinement; failures are reported with a witness, never raised.  The
    report is a pure function of the spec.
    """
    rep = ValidationReport()
    m, n = spec.idx.m, spec.idx.n

    for l, gen in enumerate(spec.generators):
        off = gen.q.copy()
        np.fill_diagonal(off, 0.0)
        rep.add(f"generator[{l}] off-diagonals >= 0", bool(np.all(off >= 0)))
        rowsum = np.abs(gen.q.sum(axis=1)).max()
        rep.add(f"generator[{l}] rows sum to 0", rowsum <= _ROWSUM_TOL,
                None if rowsum <= _ROWSUM_TOL else f"max |row sum| = {rowsum:.2e}")

    theta = spec.costs.theta
    rep.add("switching costs >= 0", bool(np.all(theta >= 0)))

    def triangle_violation():
        for l1 in range(m):
            for l2 in range(m):
                for l3 in range(m):
                    if l3 in (l1, l2) or l2 == l1:
                        continue
                    if theta[l1, l3] > theta[l1, l2] + theta[l2, l3] + 1e-15:
                        return f"theta[{l1},{l3}] > theta[{l1},{l2}] + theta[{l2},{l3}]"
        return None

    tri_witness = triangle_violation()
    rep.add("switching costs satisfy triangle inequality", tri_witness is None, tri_witness)

    cycle = zero_cost_cycle(spec.costs)
    rep.add("no zero-cost switching loop", cycle is None,
            None if cycle is None else f"cycle {'->'.join(map(str, cycle))} has total cost 0")

    pts = np.vstack([_sample_points(spec.domain, samples), _sample_points(spec.domain, 4 * samples)])
    try:
        theta_min = np.inf
        for state in range(n):
            amat = spec.coeffs.a(pts, state)
            sym_gap = float(np.abs(amat - np.swapaxes(amat, 1, 2)).max())
            rep.add(f"a(.,{state}) symmetric", sym_gap <= 1e-12,
                    None if sym_gap <= 1e-12 else f"max asymmetry {sym_gap:.2e}")
            eigs = np.linalg.eigvalsh(0.5 * (amat + np.swapaxes(amat, 1, 2)))
            state_min = float(eigs.min())
            if state_min < theta_min:
                theta_min = state_min
        ok = theta_min > 1e-10
        rep.add("uniform ellipticity theta > 0", ok,
                f"sampled theta = {theta_min:.3e}" if not ok else None)
    except Exception as exc:  # report, never raise
        rep.add("uniform ellipticity theta > 0", False, f"evaluation error: {exc}")

    for name, fn, cond in (("c > 0", spec.coeffs.c, "pos"), ("h >= 0", spec.coeffs.h, "nonneg"),
                           ("g >= 0", spec.coeffs.g, "nonneg"), ("f >= 0", spec.coeffs.f, "nonneg")):
        worst, worst_pt = np.inf, None
        for state in range(n):
            vals = fn(pts, state)
            i = int(np.argmin(vals))
            if vals[i] < worst:
                worst, worst_pt = float(vals[i]), (pts[i], state)
        ok = worst > 0 if cond == "pos" else worst >= 0
        rep.add(name, ok, None if ok else f"value {worst:.3e} at x={worst_pt[0]}, state={worst_pt[1]}")

    return rep
