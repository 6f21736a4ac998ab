"""Solver for the penalised system at fixed (eps, delta).

The outer iteration mirrors the fixed-point map behind the existence
argument: freeze the gradient penalty, the switching penalty and the chain
coupling at the current iterate, solve the resulting decoupled linear
Dirichlet problems, and damp the update.  A Newton acceleration linearises
both penalties through their first derivatives and solves the fully
coupled system; it falls back to the damped Picard step whenever it fails
to reduce the sup-norm residual.

The penalty argument uses central differences for the gradient even though
the linear operator upwinds the drift: the penalised quantity is the
isotropic ``|grad u|^2`` and should not inherit upwind bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import penalty
from .discretization import (
    FieldMatrix,
    Grid,
    RegimeOperator,
    _assemble_from_tables,
    gradient_matrices,
    sample_state_tables,
    solve_dirichlet_bound,
)
from .model import ProblemSpec


@dataclass
class NpdsConfig:
    eps: float
    delta: float
    damping: float = 0.5
    tol_residual: float = 1e-8
    max_outer: int = 200
    initial: Optional[FieldMatrix] = None
    newton: bool = True

    def __post_init__(self):
        if not (0.0 < self.eps < 1.0) or not (0.0 < self.delta < 1.0):
            raise ValueError("eps and delta must lie in (0, 1)")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")
        if self.tol_residual <= 0.0:
            raise ValueError("tol_residual must be positive")


@dataclass
class SolveReport:
    converged: bool
    outer_iterations: int
    final_residual_sup: float
    residual_history: list = field(default_factory=list)
    bound_violations: list = field(default_factory=list)
    newton_steps: int = 0
    tol_effective: float = float("nan")

    def to_dict(self):
        return {
            "converged": self.converged,
            "outer_iterations": self.outer_iterations,
            "final_residual_sup": self.final_residual_sup,
            "residual_history": list(self.residual_history),
            "bound_violations": [[int(n), float(a)] for n, a in self.bound_violations],
            "newton_steps": self.newton_steps,
            "tol_effective": self.tol_effective,
        }


class NpdsSystem:
    """Assembled discrete system for one (spec, grid) pair.

    Operators do not depend on (eps, delta), so one system object serves a
    whole continuation schedule.
    """

    def __init__(self, spec: ProblemSpec, grid: Grid):
        self.spec = spec
        self.grid = grid
        self.m, self.n = spec.idx.m, spec.idx.n
        self.tabs = sample_state_tables(spec, grid)
        self.ops = [RegimeOperator(spec, grid, ell, self.tabs) for ell in range(self.m)]
        self.grads = gradient_matrices(grid)
        self.grads_int = [gk[:, grid.interior_idx] for gk in self.grads]
        idx = grid.interior_idx
        self.h_int = self.tabs["h"][:, idx]
        self.g2_int = self.tabs["g"][:, idx] ** 2
        self.h_sup = float(np.abs(self.tabs["h"]).max())
        self.theta = spec.costs.theta
        # chain-free operators for the frozen-coefficient linear solves,
        # one per state, prefactorised
        self._plain = []
        for iota in range(self.n):
            st = _assemble_from_tables(spec, grid, self.tabs, 0, iota, include_chain=False)
            A = st.own[:, idx].tocsc()
            B = st.own[:, grid.boundary_idx].tocsr()
            self._plain.append((spla.splu(A), B))
        self._ubar = None

    @property
    def ubar(self) -> FieldMatrix:
        if self._ubar is None:
            self._ubar = solve_dirichlet_bound(self.spec, self.grid)
        return self._ubar

    # -- residual ----------------------------------------------------------

    def _penalty_terms(self, values, eps, delta):
        """Gradient-penalty argument and switching-penalty sum at interior
        nodes, plus what the Newton linearisation needs."""
        ni = self.grid.n_interior
        grad = np.empty((self.m, self.n, ni, self.grid.dim))
        for k, gk in enumerate(self.grads):
            for ell in range(self.m):
                grad[ell, :, :, k] = (gk @ values[ell].T).T
        s_arg = np.einsum("lipk,lipk->lip", grad, grad) - self.g2_int[None, :, :]
        sw_arg = np.empty((self.m, self.m, self.n, ni))
        u_int = values[:, :, self.grid.interior_idx]
        for ell in range(self.m):
            for lp in range(self.m):
                sw_arg[ell, lp] = u_int[ell] - u_int[lp] - self.theta[ell, lp]
        return grad, s_arg, sw_arg

    def residual_array(self, values, eps, delta):
        """Pointwise residual of the penalised system; zero on the boundary."""
        out = np.zeros_like(values)
        grad, s_arg, sw_arg = self._penalty_terms(values, eps, delta)
        for ell in range(self.m):
            lin = self.ops[ell].apply(values[ell])
            pen = penalty.psi(eps, s_arg[ell])
            sw = np.zeros_like(pen)
            for lp in range(self.m):
                if lp != ell:
                    sw += penalty.psi(delta, sw_arg[ell, lp])
            out[ell][:, self.grid.interior_idx] = lin + pen + sw - self.h_int
        return out

    def tbar(self, field: FieldMatrix, eps: float, delta: float) -> FieldMatrix:
        """One application of the frozen-coefficient linear solve."""
        values = field.values
        grad, s_arg, sw_arg = self._penalty_terms(values, eps, delta)
        out = field.copy()
        u_int = values[:, :, self.grid.interior_idx]
        f_bnd = values[:, :, self.grid.boundary_idx]
        for ell in range(self.m):
            q = self.spec.generators[ell].q
            for iota in range(self.n):
                xi = penalty.psi(eps, s_arg[ell, iota])
                for lp in range(self.m):
                    if lp != ell:
                        xi = xi + penalty.psi(delta, sw_arg[ell, lp, iota])
                for kappa in range(self.n):
                    if kappa != iota and q[iota, kappa] != 0.0:
                        xi = xi + q[iota, kappa] * (u_int[ell, iota] - u_int[ell, kappa])
                lu, B = self._plain[iota]
                rhs = self.h_int[iota] - xi - B @ f_bnd[ell, iota]
                out.values[ell, iota, self.grid.interior_idx] = lu.solve(rhs)
        return out

    # -- Newton ------------------------------------------------------------

    def _jacobian(self, values, eps, delta):
        grad, s_arg, sw_arg = self._penalty_terms(values, eps, delta)
        ni = self.grid.n_interior
        nvar = self.n * ni
        blocks = [[None] * self.m for _ in range(self.m)]
        for ell in range(self.m):
            J = self.ops[ell].A_int.tocsr()
            grad_blocks = [[None] * self.n for _ in range(self.n)]
            for iota in range(self.n):
                w = 2.0 * penalty.psi1(eps, s_arg[ell, iota])
                Jg = None
                for k, gk in enumerate(self.grads_int):
                    term = sp.diags(w * grad[ell, iota, :, k]) @ gk
                    Jg = term if Jg is None else Jg + term
                grad_blocks[iota][iota] = Jg
            J = J + sp.bmat(grad_blocks, format="csr")
            diag_sw = np.zeros((self.n, ni))
            for lp in range(self.m):
                if lp == ell:
                    continue
                dpsi = penalty.psi1(delta, sw_arg[ell, lp])
                diag_sw += dpsi
                blocks[ell][lp] = sp.diags(-dpsi.ravel())
            blocks[ell][ell] = J + sp.diags(diag_sw.ravel())
        return sp.bmat(blocks, format="csc"), nvar

    def solve(self, cfg: NpdsConfig):
        """Damped fixed-point iteration with optional Newton acceleration."""
        eps, delta = cfg.eps, cfg.delta
        if cfg.initial is not None:
            u = FieldMatrix.from_boundary(
                self.spec, self.grid,
                interior=cfg.initial.values[:, :, self.grid.interior_idx],
                kind="u_eps_delta", eps=eps, delta=delta)
        else:
            u = FieldMatrix.from_boundary(
                self.spec, self.grid, interior=self.ubar.values[:, :, self.grid.interior_idx],
                kind="u_eps_delta", eps=eps, delta=delta)

        tol = cfg.tol_residual * (1.0 + self.h_sup)
        damping = cfg.damping
        history = []
        newton_steps = 0
        res = self.residual_array(u.values, eps, delta)
        sup = float(np.abs(res).max())
        history.append(sup)
        outer = 0
        while sup > tol and outer < cfg.max_outer:
            outer += 1
            accepted = False
            if cfg.newton:
                J, _ = self._jacobian(u.values, eps, delta)
                rhs = -res[:, :, self.grid.interior_idx].reshape(self.m * self.n * self.grid.n_interior)
                try:
                    step = spla.splu(J).solve(rhs)
                except RuntimeError:
                    step = None
                if step is not None:
                    scale = 1.0
                    for _ in range(5):
                        cand = u.values.copy()
                        cand[:, :, self.grid.interior_idx] += (
                            scale * step.reshape(self.m, self.n, self.grid.n_interior))
                        cand_res = self.residual_array(cand, eps, delta)
                        cand_sup = float(np.abs(cand_res).max())
                        if cand_sup < sup:
                            u.values[:] = cand
                            res, sup = cand_res, cand_sup
                            newton_steps += 1
                            accepted = True
                            break
                        scale *= 0.5
            if not accepted:
                v = self.tbar(u, eps, delta)
                cand = (1.0 - damping) * u.values + damping * v.values
                cand_res = self.residual_array(cand, eps, delta)
                cand_sup = float(np.abs(cand_res).max())
                if cand_sup >= sup and damping > 1.0 / 64.0:
                    damping *= 0.5  # plain Picard can oscillate for small eps
                u.values[:] = cand
                res, sup = cand_res, cand_sup
            history.append(sup)

        violations = []
        ubar_vals = self.ubar.values
        over = u.values - ubar_vals - tol
        bad = np.argwhere((u.values < -tol) | (over > 0))
        for ell, iota, p in bad[:100]:
            amount = max(-float(u.values[ell, iota, p]), float(over[ell, iota, p]))
            violations.append((int(p), amount))

        report = SolveReport(
            converged=bool(sup <= tol),
            outer_iterations=outer,
            final_residual_sup=sup,
            residual_history=history,
            bound_violations=violations,
            newton_steps=newton_steps,
            tol_effective=tol,
        )
        return u, report


def npds_residual(spec: ProblemSpec, grid: Grid, u: FieldMatrix, cfg: NpdsConfig) -> FieldMatrix:
    """Pointwise residual of the penalised system at ``u`` (zero on the boundary)."""
    system = NpdsSystem(spec, grid)
    res = system.residual_array(u.values, cfg.eps, cfg.delta)
    return FieldMatrix(grid, res, kind="residual", eps=cfg.eps, delta=cfg.delta)


def solve_npds(spec: ProblemSpec, grid: Grid, cfg: NpdsConfig):
    """Solve the penalised system; returns ``(field, report)``."""
    return NpdsSystem(spec, grid).solve(cfg)


@dataclass
class ComparisonReport:
    sub_ok: bool
    super_ok: bool
    boundary_ok: bool
    boundary_witness: Optional[str]
    max_violation: float
    tol: float

    @property
    def preconditions_ok(self):
        return self.sub_ok and self.super_ok and self.boundary_ok

    @property
    def ok(self):
        return self.preconditions_ok and self.max_violation <= self.tol


def check_comparison(spec: ProblemSpec, grid: Grid, sub: FieldMatrix, sup: FieldMatrix,
                     cfg: NpdsConfig, tol: Optional[float] = None) -> ComparisonReport:
    """Order a numerical sub-solution against a super-solution.

    Preconditions: the penalised residual of ``sub`` is <= tol pointwise,
    the residual of ``sup`` is >= -tol, and on the boundary ``sub <= f <=
    sup`` (one-sided bounds suffice for the comparison argument; equality
    is not required).  The ordering violation ``max(sub - sup)`` is always
    reported.
    """
    system = NpdsSystem(spec, grid)
    if tol is None:
        tol = cfg.tol_residual * (1.0 + system.h_sup) * 10.0
    res_sub = system.residual_array(sub.values, cfg.eps, cfg.delta)
    res_sup = system.residual_array(sup.values, cfg.eps, cfg.delta)
    sub_ok = bool(res_sub.max() <= tol)
    super_ok = bool(res_sup.min() >= -tol)

    fvals = FieldMatrix.from_boundary(spec, grid).values[:, :, grid.boundary_idx]
    sub_b = sub.values[:, :, grid.boundary_idx]
    sup_b = sup.values[:, :, grid.boundary_idx]
    boundary_ok, witness = True, None
    if np.any(sub_b > fvals + tol):
        ell, iota, j = np.argwhere(sub_b > fvals + tol)[0]
        node = grid.boundary_idx[j]
        boundary_ok = False
        witness = (f"sub-solution exceeds boundary data at node {int(node)} "
                   f"(regime {int(ell)}, state {int(iota)}): "
                   f"{sub_b[ell, iota, j]:.6g} > {fvals[ell, iota, j]:.6g}")
    elif np.any(sup_b < fvals - tol):
        ell, iota, j = np.argwhere(sup_b < fvals - tol)[0]
        node = grid.boundary_idx[j]
        boundary_ok = False
        witness = (f"super-solution below boundary data at node {int(node)} "
                   f"(regime {int(ell)}, state {int(iota)})")

    max_violation = float((sub.values - sup.values).max())
    return ComparisonReport(sub_ok, super_ok, boundary_ok, witness, max_violation, tol)
