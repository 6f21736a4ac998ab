"""Continuation in the two penalty scales and free-region extraction.

``run_delta_limit`` drives the switching penalty scale to zero at fixed
gradient scale, warm-starting each solve from the previous stage, and
checks the two-branch complementarity of the intermediate variational
inequality.  ``run_eps_limit`` chains those runs over the gradient scale
and checks the full three-branch complementarity (operator branch,
gradient bound, switching envelope) on the final field.

Region labels are a pure function of the field and the tolerances, so
re-extraction is idempotent.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import penalty
from .discretization import FieldMatrix, Grid, node_gradients, switching_envelope
from .model import ProblemSpec
from .npds import NpdsConfig, NpdsSystem

DIFFUSION, GRADIENT_ACTIVE, SWITCH = 0, 1, 2
_LABEL_NAMES = {0: "DIFFUSION", 1: "GRADIENT_ACTIVE", 2: "SWITCH", -1: "BOUNDARY"}


class StalledContinuation(Exception):
    """Successive stage gaps stopped decreasing well above solver tolerance."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass
class ContinuationSchedule:
    deltas: tuple = (0.2, 0.1, 0.05, 0.025)
    epsilons: tuple = (0.2, 0.1, 0.05, 0.025)
    npds_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.deltas = tuple(float(d) for d in self.deltas)
        self.epsilons = tuple(float(e) for e in self.epsilons)
        for seq, name in ((self.deltas, "deltas"), (self.epsilons, "epsilons")):
            if not seq:
                raise ValueError(f"{name} must be nonempty")
            if any(not (0.0 < v < 1.0) for v in seq):
                raise ValueError(f"{name} must lie in (0, 1)")
            if any(b >= a for a, b in zip(seq, seq[1:])):
                raise ValueError(f"{name} must be strictly decreasing")


def default_tol_hjb(grid: Grid) -> float:
    """Residual tolerance in natural units; discretisation error dominates
    below grid scale."""
    return max(1e-4, 5.0 * grid.spacing_max())


@dataclass
class HjbResidualReport:
    """Branch residuals of a variational inequality on interior nodes.

    ``branches`` maps names to (m, n, n_interior) arrays.  Complementarity
    at tolerance ``tol`` means every branch is <= +tol everywhere and at
    every node at least one branch magnitude is <= tol.
    """

    branches: dict
    tol: float

    @property
    def sup_excess(self) -> float:
        stacked = np.stack(list(self.branches.values()))
        return float(np.max(stacked))

    @property
    def sup_min_abs(self) -> float:
        stacked = np.abs(np.stack(list(self.branches.values())))
        return float(stacked.min(axis=0).max())

    @property
    def complementarity_ok(self) -> bool:
        return self.sup_excess <= self.tol and self.sup_min_abs <= self.tol

    def to_dict(self, with_arrays=False):
        d = {
            "tol": self.tol,
            "sup_excess": self.sup_excess,
            "sup_min_abs": self.sup_min_abs,
            "complementarity_ok": self.complementarity_ok,
        }
        for name, arr in self.branches.items():
            d[f"sup_{name}"] = float(arr.max())
            if with_arrays:
                d[name] = arr.tolist()
        return d

    def to_csv(self, grid: Grid) -> str:
        buf = io.StringIO()
        names = list(self.branches)
        buf.write(",".join(["node", "ell", "iota"] + names) + "\r\n")
        m, n, _ = next(iter(self.branches.values())).shape
        for ell in range(m):
            for iota in range(n):
                for j, p in enumerate(grid.interior_idx):
                    vals = [repr(float(self.branches[name][ell, iota, j])) for name in names]
                    buf.write(",".join([str(int(p)), str(ell), str(iota)] + vals) + "\r\n")
        return buf.getvalue()


def _interior_gradients(system: NpdsSystem, values):
    grad = np.empty((system.m, system.n, system.grid.n_interior, system.grid.dim))
    for k, gk in enumerate(system.grads):
        for ell in range(system.m):
            grad[ell, :, :, k] = (gk @ values[ell].T).T
    return grad


def pc1_residual_report(system: NpdsSystem, u: FieldMatrix, eps: float,
                        tol: Optional[float] = None) -> HjbResidualReport:
    """Two-branch residuals of the intermediate (switching-only) inequality."""
    grid = system.grid
    tol = default_tol_hjb(grid) if tol is None else tol
    values = u.values
    grad = _interior_gradients(system, values)
    s_arg = np.einsum("lipk,lipk->lip", grad, grad) - system.g2_int[None, :, :]
    r_op = np.empty((system.m, system.n, grid.n_interior))
    for ell in range(system.m):
        r_op[ell] = system.ops[ell].apply(values[ell]) + penalty.psi(eps, s_arg[ell]) - system.h_int
    MU, _ = switching_envelope(values, system.theta)
    r_switch = (values - MU)[:, :, grid.interior_idx]
    if system.m == 1:
        r_switch = np.full_like(r_op, -np.inf)  # empty minimum never binds
    return HjbResidualReport({"r_operator": r_op, "r_switch": r_switch}, tol)


def hjb_residual_report(system: NpdsSystem, u: FieldMatrix,
                        tol: Optional[float] = None) -> HjbResidualReport:
    """Three-branch residuals of the gradient-constrained inequality."""
    grid = system.grid
    tol = default_tol_hjb(grid) if tol is None else tol
    values = u.values
    grad = _interior_gradients(system, values)
    gnorm = np.sqrt(np.einsum("lipk,lipk->lip", grad, grad))
    r1 = np.empty((system.m, system.n, grid.n_interior))
    for ell in range(system.m):
        r1[ell] = system.ops[ell].apply(values[ell]) - system.h_int
    r2 = gnorm - np.sqrt(system.g2_int)[None, :, :]
    MU, _ = switching_envelope(values, system.theta)
    r3 = (values - MU)[:, :, grid.interior_idx]
    if system.m == 1:
        r3 = np.full_like(r1, -np.inf)
    return HjbResidualReport({"r_operator": r1, "r_gradient": r2, "r_switch": r3}, tol)


@dataclass
class StageRecord:
    eps: float
    delta: float
    gap: float
    outer_iterations: int
    final_residual: float
    converged: bool


@dataclass
class DeltaLimitResult:
    eps: float
    stages: list
    fields: list  # FieldMatrix per stage
    pc1_report: HjbResidualReport

    @property
    def gaps(self):
        return [s.gap for s in self.stages[1:]]

    def table_csv(self) -> str:
        buf = io.StringIO()
        buf.write("stage,eps,delta,gap,outer_iterations,final_residual,converged\r\n")
        for k, s in enumerate(self.stages):
            buf.write(",".join([str(k), repr(s.eps), repr(s.delta), repr(s.gap),
                                str(s.outer_iterations), repr(s.final_residual),
                                str(s.converged)]) + "\r\n")
        return buf.getvalue()


@dataclass
class EpsLimitResult:
    delta_results: list
    eps_gaps: list
    hjb_report: HjbResidualReport
    gradient_excess: float  # max over interior of |grad u| - g
    ordering_violation: float  # max over stages of (u - u_eps)

    def table_csv(self) -> str:
        buf = io.StringIO()
        buf.write("stage,eps,eps_gap,delta_stages,final_residual\r\n")
        for k, dr in enumerate(self.delta_results):
            gap = self.eps_gaps[k - 1] if k > 0 else float("nan")
            buf.write(",".join([str(k), repr(dr.eps), repr(gap), str(len(dr.stages)),
                                repr(dr.stages[-1].final_residual)]) + "\r\n")
        return buf.getvalue()


def _check_stall(gaps, floor, partial):
    # a stage "stalls" when its gap fails to shrink by at least 5% while
    # still sitting well above solver tolerance
    rises = 0
    for prev, cur in zip(gaps, gaps[1:]):
        if cur > max(prev * 0.95, floor):
            rises += 1
            if rises >= 3:
                raise StalledContinuation(
                    f"gaps stopped decreasing for 3 consecutive stages: {gaps}", partial=partial)
        else:
            rises = 0


def run_delta_limit(spec: ProblemSpec, grid: Grid, eps: float,
                    schedule: ContinuationSchedule, initial: Optional[FieldMatrix] = None,
                    tol_hjb: Optional[float] = None, system: Optional[NpdsSystem] = None):
    """Drive the switching penalty to zero at fixed ``eps`` with warm starts.

    Returns ``(u_eps, DeltaLimitResult)``.  Raises
    :class:`StalledContinuation` when the stage gaps stop decreasing well
    above solver tolerance.
    """
    system = system or NpdsSystem(spec, grid)
    overrides = dict(schedule.npds_overrides)
    u = initial
    stages, fields = [], []
    gaps_so_far = []
    tol_eff = None
    for delta in schedule.deltas:
        cfg = NpdsConfig(eps=eps, delta=delta, initial=u, **overrides)
        u_new, rep = system.solve(cfg)
        tol_eff = rep.tol_effective
        gap = u.sup_diff(u_new) if u is not None else float("nan")
        stages.append(StageRecord(eps, delta, gap, rep.outer_iterations,
                                  rep.final_residual_sup, rep.converged))
        fields.append(u_new)
        if u is not None:
            gaps_so_far.append(gap)
        u = u_new
        partial = DeltaLimitResult(eps, stages, fields,
                                   pc1_residual_report(system, u, eps, tol_hjb))
        _check_stall(gaps_so_far, 100.0 * tol_eff, partial)
    u_eps = FieldMatrix(grid, u.values.copy(), kind="u_eps", eps=eps, delta=None)
    result = DeltaLimitResult(eps, stages, fields,
                              pc1_residual_report(system, u_eps, eps, tol_hjb))
    return u_eps, result


def run_eps_limit(spec: ProblemSpec, grid: Grid, schedule: ContinuationSchedule,
                  tol_hjb: Optional[float] = None, system: Optional[NpdsSystem] = None):
    """Chain delta-limits over decreasing ``eps`` and check the final field.

    Returns ``(u, EpsLimitResult)``; the report carries the three-branch
    complementarity, the gradient-constraint excess and the ordering
    defect ``max(u - u_eps)`` across stages (expected <= 0 up to
    tolerance; asserted only by callers on benchmark instances).
    """
    system = system or NpdsSystem(spec, grid)
    u = None
    delta_results = []
    eps_fields = []
    eps_gaps = []
    for eps in schedule.epsilons:
        u_eps, dres = run_delta_limit(spec, grid, eps, schedule, initial=u,
                                      tol_hjb=tol_hjb, system=system)
        if u is not None:
            eps_gaps.append(u.sup_diff(u_eps))
        delta_results.append(dres)
        eps_fields.append(u_eps)
        u = u_eps
        floor = max(1e-6, 100.0 * dres.stages[-1].final_residual)
        _check_stall(eps_gaps, floor,
                     partial=EpsLimitResult(delta_results, eps_gaps, None, float("nan"),
                                            float("nan")))
    final = FieldMatrix(grid, u.values.copy(), kind="u", eps=None, delta=None)
    report = hjb_residual_report(system, final, tol_hjb)
    gradient_excess = float(report.branches["r_gradient"].max())
    ordering = max(float((final.values - fe.values).max()) for fe in eps_fields)
    result = EpsLimitResult(delta_results, eps_gaps, report, gradient_excess, ordering)
    return final, result


@dataclass
class RegionMap:
    """Per-(regime, state, node) classification of the solved field.

    Labels: 0 diffusion, 1 gradient-active, 2 switch (boundary nodes are
    -1).  ``target`` holds the argmin regime for switch nodes, -1
    elsewhere.  ``violations`` lists switch nodes whose target is itself a
    switch node in the target regime, which the chain argument behind the
    region identity rules out.
    """

    labels: np.ndarray
    target: np.ndarray
    tol_switch: float
    tol_gradient: float
    violations: list

    def count(self, label):
        return int(np.sum(self.labels == label))

    def to_csv(self, grid: Grid) -> str:
        buf = io.StringIO()
        coords = ["x", "y"][: grid.dim]
        buf.write(",".join(["node"] + coords + ["ell", "iota", "label", "target"]) + "\r\n")
        m, n, _ = self.labels.shape
        for ell in range(m):
            for iota in range(n):
                for p in range(grid.n_total):
                    row = [str(p)]
                    row += [repr(float(grid.points[p, k])) for k in range(grid.dim)]
                    row += [str(ell), str(iota), _LABEL_NAMES[int(self.labels[ell, iota, p])],
                            str(int(self.target[ell, iota, p]))]
                    buf.write(",".join(row) + "\r\n")
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "tol_switch": self.tol_switch,
            "tol_gradient": self.tol_gradient,
            "labels": self.labels.tolist(),
            "target": self.target.tolist(),
            "violations": [list(map(int, v)) for v in self.violations],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(np.array(d["labels"], dtype=np.int8), np.array(d["target"], dtype=np.int32),
                   d["tol_switch"], d["tol_gradient"],
                   [tuple(v) for v in d["violations"]])


def extract_regions(u_eps: FieldMatrix, spec: ProblemSpec,
                    tol_switch: Optional[float] = None,
                    tol_gradient: Optional[float] = None) -> RegionMap:
    """Classify interior nodes into diffusion / gradient-active / switch.

    Switch nodes are where the field meets its switching envelope within
    ``tol_switch`` (an algebraic identity between stored fields, default
    ``1e-6 * (1 + sup|u|)``); among the rest, gradient-active nodes are
    where ``|grad u|`` meets the bound within ``tol_gradient`` (defaults
    to ``tol_switch``; pass the variational-inequality tolerance for maps
    meant to mirror the penalised solution at finite scale).
    """
    grid = u_eps.grid
    values = u_eps.values
    if tol_switch is None:
        tol_switch = 1e-6 * (1.0 + float(np.abs(values).max()))
    if tol_gradient is None:
        tol_gradient = tol_switch

    m, n = u_eps.m, u_eps.n
    labels = np.full((m, n, grid.n_total), -1, dtype=np.int8)
    target = np.full((m, n, grid.n_total), -1, dtype=np.int32)
    interior = grid.interior_idx
    labels[:, :, interior] = DIFFUSION

    MU, argmin = switching_envelope(values, spec.costs.theta)
    if m > 1:
        switch_mask = np.abs(values - MU) <= tol_switch
        switch_mask[:, :, grid.boundary_idx] = False
        labels[switch_mask] = SWITCH
        target[switch_mask] = argmin[switch_mask]

    grad = node_gradients(grid, values)
    gnorm = np.linalg.norm(grad, axis=-1)
    gvals = np.empty((n, grid.n_total))
    for state in range(n):
        gvals[state] = spec.coeffs.g(grid.points, state)
    grad_mask = np.abs(gnorm - gvals[None, :, :]) <= tol_gradient
    grad_mask[:, :, grid.boundary_idx] = False
    grad_mask &= labels != SWITCH
    labels[grad_mask] = GRADIENT_ACTIVE

    violations = []
    for ell, iota, p in np.argwhere(labels == SWITCH):
        lp = target[ell, iota, p]
        if labels[lp, iota, p] == SWITCH:
            violations.append((int(ell), int(iota), int(p), int(lp)))

    return RegionMap(labels, target, float(tol_switch), float(tol_gradient), violations)


def cutoff_window(grid: Grid) -> np.ndarray:
    """Interior cutoff: 1 on the centred half-box, smoothly 0 past 3/4.

    In the normalised per-axis distance from the centre, the window is 1
    up to 0.5 and 0 from 0.75 on (a strictly interior support), with a
    quintic smoothstep in between.
    """
    center = 0.5 * (grid.domain.lower + grid.domain.upper)
    half = 0.5 * grid.domain.widths
    rho = np.max(np.abs(grid.points - center) / half, axis=1)
    t = np.clip((0.75 - rho) / 0.25, 0.0, 1.0)
    return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)


def _hessian_norm(grid: Grid, values):
    lead = values.shape[:-1]
    resh = values.reshape(*lead, *grid.nodes)
    acc = np.zeros(values.shape)
    firsts = []
    for k in range(grid.dim):
        firsts.append(np.gradient(resh, grid.h[k], axis=len(lead) + k))
    for k in range(grid.dim):
        for j in range(grid.dim):
            second = np.gradient(firsts[k], grid.h[j], axis=len(lead) + j)
            acc += second.reshape(values.shape) ** 2
    return np.sqrt(acc)


def diagnostics_bounds(grid: Grid, stages) -> dict:
    """Interior-window sups of the gradient and Hessian across stages.

    ``stages`` is a list of ``(eps, delta, FieldMatrix)``.  Echoes the
    uniform interior bounds: the windowed sups must not grow by more than
    5% from any stage to the next as the scales shrink.
    """
    if len(stages) < 2:
        raise ValueError("need at least two solved stages")
    w = cutoff_window(grid)
    rows = []
    for eps, delta, fld in stages:
        grad = node_gradients(grid, fld.values)
        gsup = float((w * np.linalg.norm(grad, axis=-1)).max())
        hsup = float((w * _hessian_norm(grid, fld.values)).max())
        rows.append({"eps": eps, "delta": delta, "grad_sup": gsup, "hess_sup": hsup})

    def growth_ok(key):
        vals = [r[key] for r in rows]
        return all(b <= a * 1.05 + 1e-12 for a, b in zip(vals, vals[1:]))

    def ratio(key):
        vals = [r[key] for r in rows]
        lo = min(vals)
        return float("inf") if lo == 0 else max(vals) / lo

    return {
        "stages": rows,
        "grad_growth_ok": growth_ok("grad_sup"),
        "hess_growth_ok": growth_ok("hess_sup"),
        "grad_ratio": ratio("grad_sup"),
        "hess_ratio": ratio("hess_sup"),
        "window_vanishes_on_ring": bool(np.all(w[grid.boundary_idx] == 0.0)),
    }
