import numpy as np
import pytest

from hjbswitch.discretization import FieldMatrix, Grid, solve_dirichlet_bound
from hjbswitch.model import (
    Coefficients,
    Domain,
    GeneratorMatrix,
    ProblemSpec,
    RegimeChainIndex,
    SwitchingCosts,
)
from hjbswitch.npds import NpdsConfig, NpdsSystem, check_comparison, npds_residual, solve_npds
from hjbswitch.penalty import psi


def build_spec(a="1", b="0", c="1", h="1", g="1000", f="0", m=1, n=1,
               generators=None, theta=None, dim=1):
    if generators is None:
        generators = [np.zeros((n, n))] * m
    if theta is None:
        theta = np.full((m, m), 1000.0)
        np.fill_diagonal(theta, 0.0)
    coeffs = Coefficients.from_expressions(dim=dim, n_states=n, a=a, b=b, c=c, h=h, g=g, f=f)
    return ProblemSpec(
        domain=Domain(dim, [-1.0] * dim, [1.0] * dim),
        idx=RegimeChainIndex(m, n),
        generators=[GeneratorMatrix(q) for q in generators],
        coeffs=coeffs,
        costs=SwitchingCosts(theta),
    )


def benchmark_spec():
    """Two regimes, two chain states, active gradient constraint."""
    return build_spec(
        a="1", b="0", c="1", h=["2", "0.5"], g="0.6", f="0", m=2, n=2,
        generators=[[[-1.0, 1.0], [1.0, -1.0]], [[-2.0, 2.0], [2.0, -2.0]]],
        theta=[[0.0, 0.1], [0.1, 0.0]],
    )


class TestResidual:
    def test_dirichlet_solution_kills_linear_part(self):
        # with both penalties inactive the Dirichlet solution is the fixed point
        spec = build_spec()
        grid = Grid(spec.domain, 41)
        ubar = solve_dirichlet_bound(spec, grid)
        cfg = NpdsConfig(eps=0.1, delta=0.1)
        res = npds_residual(spec, grid, ubar, cfg)
        assert np.abs(res.values).max() <= 1e-9

    def test_active_gradient_penalty_is_nonnegative_on_ubar(self):
        spec = build_spec(g="0.2")
        grid = Grid(spec.domain, 41)
        ubar = solve_dirichlet_bound(spec, grid)
        res = npds_residual(spec, grid, ubar, NpdsConfig(eps=0.1, delta=0.1))
        interior = res.values[:, :, grid.interior_idx]
        assert interior.min() >= -1e-9
        assert interior.max() > 0.1  # penalty really active somewhere

    def test_residual_matches_hand_assembly_on_5_nodes(self):
        # independent nodewise transcription of the penalised system on a
        # 5-node grid with two regimes and two chain states
        spec = benchmark_spec()
        grid = Grid(spec.domain, 5)
        rng = np.random.default_rng(11)
        u = FieldMatrix.from_boundary(spec, grid, interior=rng.uniform(0.0, 1.0, (2, 2, 3)))
        eps, delta = 0.2, 0.15
        res = npds_residual(spec, grid, u, NpdsConfig(eps=eps, delta=delta)).values

        hx = 0.5
        hvals = {0: 2.0, 1: 0.5}
        theta = spec.costs.theta
        qs = [np.array(q.q) for q in spec.generators]
        for ell in range(2):
            for iota in range(2):
                for node in (1, 2, 3):
                    up, dn, here = u.values[ell, iota, node + 1], u.values[ell, iota, node - 1], u.values[ell, iota, node]
                    lin = 1.0 * here - (up - 2 * here + dn) / hx**2  # c u - a u''
                    for kappa in range(2):
                        if kappa != iota:
                            lin -= qs[ell][iota, kappa] * (u.values[ell, kappa, node] - here)
                    gradc = (up - dn) / (2 * hx)
                    pen = psi(eps, gradc**2 - 0.6**2)
                    sw = sum(
                        psi(delta, here - u.values[lp, iota, node] - theta[ell, lp])
                        for lp in range(2) if lp != ell
                    )
                    expected = lin + pen + sw - hvals[iota]
                    assert res[ell, iota, node] == pytest.approx(expected, abs=1e-12)
                assert res[ell, iota, 0] == 0.0 and res[ell, iota, 4] == 0.0


class TestSolve:
    def test_inactive_penalties_reduce_to_dirichlet(self):
        spec = build_spec(m=2, n=1, generators=[np.zeros((1, 1))] * 2)
        grid = Grid(spec.domain, 41)
        u, rep = solve_npds(spec, grid, NpdsConfig(eps=0.1, delta=0.1))
        assert rep.converged
        assert rep.outer_iterations == 0  # initial iterate ubar already solves it
        ubar = solve_dirichlet_bound(spec, grid)
        assert u.sup_diff(ubar) <= 1e-9

    def test_zero_data_gives_zero(self):
        spec = build_spec(h="0", f="0", g="1")
        grid = Grid(spec.domain, 31)
        u, rep = solve_npds(spec, grid, NpdsConfig(eps=0.1, delta=0.1))
        assert rep.converged
        assert np.abs(u.values).max() <= 1e-10

    def test_benchmark_converges_and_respects_bounds(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 101)
        u, rep = solve_npds(spec, grid, NpdsConfig(eps=0.1, delta=0.1))
        assert rep.converged, rep.final_residual_sup
        assert rep.bound_violations == []
        assert u.values.min() >= 0.0
        ubar = solve_dirichlet_bound(spec, grid)
        assert float((u.values - ubar.values).max()) <= rep.tol_effective

    def test_multistart_agreement(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 101)
        sys_ = NpdsSystem(spec, grid)
        u1, rep1 = sys_.solve(NpdsConfig(eps=0.1, delta=0.1))
        zero_start = FieldMatrix.from_boundary(spec, grid)
        u2, rep2 = sys_.solve(NpdsConfig(eps=0.1, delta=0.1, initial=zero_start))
        assert rep1.converged and rep2.converged
        assert u1.sup_diff(u2) <= 10 * rep1.tol_effective

    def test_fixed_point_property(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 61)
        sys_ = NpdsSystem(spec, grid)
        cfg = NpdsConfig(eps=0.1, delta=0.1)
        u, rep = sys_.solve(cfg)
        assert rep.final_residual_sup <= rep.tol_effective
        # T[u] - u = -[c - L]^(-1) residual, and the resolvent is a sup-norm
        # contraction here (c = 1), so one more application moves <= 2 tol
        moved = sys_.tbar(u, 0.1, 0.1)
        assert u.sup_diff(moved) <= 2 * rep.tol_effective

    def test_deterministic_bit_identical(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 61)
        u1, _ = solve_npds(spec, grid, NpdsConfig(eps=0.1, delta=0.1))
        u2, _ = solve_npds(spec, grid, NpdsConfig(eps=0.1, delta=0.1))
        assert np.array_equal(u1.values, u2.values)

    def test_plain_picard_also_converges(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 41)
        u_newton, _ = solve_npds(spec, grid, NpdsConfig(eps=0.2, delta=0.2))
        u_picard, rep = solve_npds(
            spec, grid, NpdsConfig(eps=0.2, delta=0.2, newton=False, max_outer=2000))
        assert rep.converged, rep.final_residual_sup
        assert u_newton.sup_diff(u_picard) <= 100 * rep.tol_effective

    def test_dearer_switching_raises_field(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 61)
        u1, rep = solve_npds(spec, grid, NpdsConfig(eps=0.1, delta=0.1))
        dearer = benchmark_spec()
        dearer.costs.theta[0, 1] += 1.0
        dearer.costs.theta[1, 0] += 1.0
        u2, _ = solve_npds(dearer, grid, NpdsConfig(eps=0.1, delta=0.1))
        assert float((u1.values - u2.values).max()) <= 10 * rep.tol_effective


class TestComparison:
    def test_zero_below_ubar(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 41)
        zero = FieldMatrix.from_boundary(spec, grid)
        ubar = solve_dirichlet_bound(spec, grid)
        rep = check_comparison(spec, grid, zero, ubar, NpdsConfig(eps=0.1, delta=0.1))
        assert rep.preconditions_ok and rep.ok

    def test_solution_below_ubar(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 41)
        u, _ = solve_npds(spec, grid, NpdsConfig(eps=0.1, delta=0.1))
        ubar = solve_dirichlet_bound(spec, grid)
        rep = check_comparison(spec, grid, u, ubar, NpdsConfig(eps=0.1, delta=0.1))
        assert rep.ok

    def test_boundary_violation_witness(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 41)
        ubar = solve_dirichlet_bound(spec, grid)
        bumped = ubar.copy()
        bumped.values += 1.0
        rep = check_comparison(spec, grid, bumped, ubar, NpdsConfig(eps=0.1, delta=0.1))
        assert not rep.preconditions_ok
        assert rep.boundary_witness and "boundary" in rep.boundary_witness
