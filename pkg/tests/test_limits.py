import numpy as np
import pytest

from hjbswitch.discretization import FieldMatrix, Grid, solve_dirichlet_bound
from hjbswitch.limits import (
    DIFFUSION,
    GRADIENT_ACTIVE,
    SWITCH,
    ContinuationSchedule,
    RegionMap,
    StalledContinuation,
    cutoff_window,
    default_tol_hjb,
    diagnostics_bounds,
    extract_regions,
    run_delta_limit,
    run_eps_limit,
)
from hjbswitch.npds import NpdsSystem

from test_npds import benchmark_spec, build_spec


def asymmetric_spec():
    """Frozen chain vs fast chain with state costs 2 vs 0: switching pays."""
    return build_spec(
        h=["2", "0"], g="1000", m=2, n=2,
        generators=[np.zeros((2, 2)), [[-5.0, 5.0], [5.0, -5.0]]],
        theta=[[0.0, 0.1], [0.1, 0.0]],
    )


class TestSchedule:
    def test_defaults(self):
        s = ContinuationSchedule()
        assert s.deltas == (0.2, 0.1, 0.05, 0.025)

    def test_rejects_nonmonotone(self):
        with pytest.raises(ValueError):
            ContinuationSchedule(deltas=(0.1, 0.2))
        with pytest.raises(ValueError):
            ContinuationSchedule(epsilons=())


class TestDeltaLimit:
    def test_single_regime_is_delta_independent(self):
        spec = build_spec(h="1", g="0.4", m=1, n=1)
        grid = Grid(spec.domain, 101)
        u, res = run_delta_limit(spec, grid, 0.1, ContinuationSchedule())
        assert res.gaps == [0.0, 0.0, 0.0]
        assert u.eps == 0.1 and u.delta is None

    def test_huge_costs_reduce_to_operator_branch(self):
        spec = build_spec(h=["2", "0.5"], g="0.6", m=2, n=2,
                          generators=[[[-1.0, 1.0], [1.0, -1.0]]] * 2)
        grid = Grid(spec.domain, 101)
        u, res = run_delta_limit(spec, grid, 0.1, ContinuationSchedule())
        rep = res.pc1_report
        # switching envelope never binds; operator branch carries equality
        assert rep.branches["r_switch"].max() < -100.0
        assert abs(rep.branches["r_operator"]).max() <= rep.tol

    def test_benchmark_gaps_nonincreasing(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 101)
        u, res = run_delta_limit(spec, grid, 0.1, ContinuationSchedule())
        gaps = res.gaps
        assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
        assert res.pc1_report.complementarity_ok

    def test_stall_raises_with_partial(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 41)
        sched = ContinuationSchedule(
            deltas=(0.2, 0.19, 0.18, 0.17, 0.16, 0.15),
            npds_overrides={"newton": False, "damping": 1e-3, "max_outer": 1,
                            "tol_residual": 1e-12},
        )
        start = FieldMatrix.from_boundary(spec, grid)
        with pytest.raises(StalledContinuation) as exc:
            run_delta_limit(spec, grid, 0.1, sched, initial=start)
        assert exc.value.partial is not None
        assert len(exc.value.partial.stages) >= 4


class TestEpsLimit:
    def test_constraints_inactive_gives_dirichlet(self):
        spec = build_spec(h=["2", "0.5"], g="1000", m=2, n=2,
                          generators=[[[-1.0, 1.0], [1.0, -1.0]]] * 2)
        grid = Grid(spec.domain, 101)
        u, res = run_eps_limit(spec, grid, ContinuationSchedule())
        ubar = solve_dirichlet_bound(spec, grid)
        assert u.sup_diff(ubar) <= 1e-7
        assert abs(res.hjb_report.branches["r_operator"]).max() <= 1e-7

    def test_benchmark_complementarity_and_ordering(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 101)
        u, res = run_eps_limit(spec, grid, ContinuationSchedule())
        gaps = res.eps_gaps
        assert all(b < a for a, b in zip(gaps, gaps[1:]))  # strictly decreasing
        rep = res.hjb_report
        assert rep.tol == default_tol_hjb(grid) == 0.1
        assert rep.complementarity_ok
        assert res.gradient_excess <= rep.tol
        # u <= u_eps for every solved eps; and u <= ubar + tol
        assert res.ordering_violation <= 1e-10
        ubar = solve_dirichlet_bound(spec, grid)
        assert float((u.values - ubar.values).max()) <= 1e-8

    def test_zero_gradient_bound_forces_constant(self):
        # g = 0 with constant boundary data: the only admissible field is
        # flat; at finite eps the solver is sqrt(eps)-close to it
        spec = build_spec(h="2", g="0", f="1", m=1, n=1)
        grid = Grid(spec.domain, 101)
        u, res = run_eps_limit(spec, grid, ContinuationSchedule(), tol_hjb=0.35)
        eps_final = 0.025
        assert np.abs(u.values - 1.0).max() <= 2.0 * np.sqrt(2.0 * eps_final)
        assert res.hjb_report.complementarity_ok  # at the sqrt(eps) tolerance


class TestRegions:
    def test_single_regime_never_switches(self):
        spec = build_spec(h="1", g="0.4", m=1, n=1)
        grid = Grid(spec.domain, 101)
        u, _ = run_delta_limit(spec, grid, 0.1, ContinuationSchedule())
        rm = extract_regions(u, spec, tol_gradient=default_tol_hjb(grid))
        assert rm.count(SWITCH) == 0
        assert rm.count(GRADIENT_ACTIVE) > 0
        assert rm.count(DIFFUSION) > 0

    def test_symmetric_instance_has_empty_switch_region(self):
        spec = build_spec(h=["2", "0.5"], g="0.6", m=2, n=2,
                          generators=[[[-1.0, 1.0], [1.0, -1.0]]] * 2,
                          theta=[[0.0, 0.1], [0.1, 0.0]])
        grid = Grid(spec.domain, 101)
        u, _ = run_delta_limit(spec, grid, 0.1, ContinuationSchedule())
        assert np.array_equal(u.values[0], u.values[1])  # exact symmetry
        rm = extract_regions(u, spec)
        assert rm.count(SWITCH) == 0

    def test_asymmetric_instance_switches_with_consistent_targets(self):
        spec = asymmetric_spec()
        grid = Grid(spec.domain, 101)
        sched = ContinuationSchedule(deltas=(0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625))
        u, _ = run_delta_limit(spec, grid, 0.1, sched)
        rm = extract_regions(u, spec, tol_switch=0.02)
        # regime 0 pays to adopt the fast chain in the expensive state
        assert int(np.sum(rm.labels[0, 0] == SWITCH)) > 10
        assert set(rm.target[0, 0][rm.labels[0, 0] == SWITCH]) == {1}
        # regime 1 pays to freeze the chain in the cheap state
        assert int(np.sum(rm.labels[1, 1] == SWITCH)) > 10
        assert rm.violations == []

    def test_extraction_idempotent(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 61)
        u, _ = run_delta_limit(spec, grid, 0.1, ContinuationSchedule())
        r1 = extract_regions(u, spec, tol_switch=1e-3, tol_gradient=0.05)
        r2 = extract_regions(u, spec, tol_switch=1e-3, tol_gradient=0.05)
        assert np.array_equal(r1.labels, r2.labels)
        assert np.array_equal(r1.target, r2.target)

    def test_json_roundtrip(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 31)
        u, _ = run_delta_limit(spec, grid, 0.2, ContinuationSchedule(deltas=(0.2,)))
        rm = extract_regions(u, spec, tol_gradient=0.1)
        back = RegionMap.from_json(rm.to_json())
        assert np.array_equal(back.labels, rm.labels)
        assert back.tol_switch == rm.tol_switch

    def test_csv_has_label_names(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 11)
        u, _ = run_delta_limit(spec, grid, 0.2, ContinuationSchedule(deltas=(0.2,)))
        rm = extract_regions(u, spec)
        text = rm.to_csv(grid)
        assert "DIFFUSION" in text and "BOUNDARY" in text
        assert text.splitlines()[0] == "node,x,ell,iota,label,target"


class TestDiagnostics:
    def test_window_shape(self):
        grid = Grid(benchmark_spec().domain, 101)
        w = cutoff_window(grid)
        x = grid.points[:, 0]
        assert np.all(w[np.abs(x) <= 0.5] == 1.0)
        assert np.all(w[np.abs(x) >= 0.75] == 0.0)
        assert np.all((w >= 0) & (w <= 1))

    def test_linear_instance_sups_identical(self):
        spec = build_spec(h="1", g="1000", m=1, n=1)
        grid = Grid(spec.domain, 61)
        stages = []
        for e, d in zip((0.2, 0.1), (0.2, 0.1)):
            u, _ = run_delta_limit(spec, grid, e, ContinuationSchedule(deltas=(d,)))
            stages.append((e, d, u))
        diag = diagnostics_bounds(grid, stages)
        sups = [r["grad_sup"] for r in diag["stages"]]
        assert sups[0] == pytest.approx(sups[1], rel=1e-9)
        assert diag["window_vanishes_on_ring"]

    def test_benchmark_windowed_sups_stay_bounded(self):
        spec = benchmark_spec()
        grid = Grid(spec.domain, 101)
        system = NpdsSystem(spec, grid)
        stages = []
        u = None
        for e, d in zip((0.2, 0.1, 0.05, 0.025), (0.2, 0.1, 0.05, 0.025)):
            u, _ = run_delta_limit(spec, grid, e, ContinuationSchedule(deltas=(d,)),
                                   initial=u, system=system)
            stages.append((e, d, u))
        diag = diagnostics_bounds(grid, stages)
        assert diag["grad_growth_ok"] and diag["hess_growth_ok"]
        assert diag["grad_ratio"] <= 1.05
