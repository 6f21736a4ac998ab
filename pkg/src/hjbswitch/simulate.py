"""Monte Carlo engine for the controlled regime-modulated diffusion.

Paths follow the penalised dynamics: drift ``-(b + n zeta_dot)`` with the
feedback direction ``n = grad u / |grad u|`` and rate ``zeta_dot = 2
psi'(|grad u|^2 - g^2) |grad u|``, diffusion ``sigma = chol(2a)``, the
chain stepped by exact exponential clocks within each Euler step, and
instantaneous regime switches where the region map says the switching
envelope binds.  Costs accumulate by left-endpoint quadrature of
``exp(-r) (h + l)`` with the control cost ``l`` evaluated through the
conjugate identity at the feedback point (golden-section only when the
rate cap clips it).

Exits are detected by linear interpolation on the crossing segment.
Censored paths add the interpolated field value as a continuation value.
Coefficients along paths are multilinear interpolations of their node
tables, consistent with the grid-scale error budget.

Everything path-local is compiled; per-path counter-based streams (see
``_rng``) make results independent of the thread count.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np

from . import penalty
from ._rng import normal_pair, path_key, uniform_pair
from .discretization import FieldMatrix, Grid, node_gradients, sample_state_tables
from .limits import RegionMap
from .model import ProblemSpec


class OutOfDomain(Exception):
    """Query point lies outside the closed domain."""


class StepExplosion(Exception):
    """A path left the 10x bounding box; coefficients are likely wrong."""


def _configure_threads():
    want = os.environ.get("HJBSWITCH_THREADS")
    if want:
        nb.set_num_threads(max(1, min(int(want), nb.config.NUMBA_NUM_THREADS)))


@dataclass
class SimConfig:
    dt: float
    n_paths: int
    seed: int
    eps: Optional[float] = None          # defaults to the policy's scale
    horizon_cap: Optional[float] = None  # default 50 / min c, set at build time
    zeta_cap: Optional[float] = None     # default 2 max|grad u| / eps
    tol_switch: float = 1e-6
    bridge_exit: bool = True             # intra-step boundary-crossing test

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.horizon_cap is not None and self.horizon_cap < 0:
            raise ValueError("horizon_cap must be nonnegative")


@dataclass
class CostEstimate:
    mean: float
    std_error: float
    n_paths: int
    censored_fraction: float

    def to_dict(self):
        return {
            "mean": self.mean,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "censored_fraction": self.censored_fraction,
        }


@dataclass
class PathRecord:
    path_index: int
    exit_time: Optional[float]
    censored: bool
    exit_point: Optional[np.ndarray]
    events: list  # (time, "jump"|"switch", new index)
    discount: float
    running_cost: float
    switching_cost: float
    terminal_cost: float
    continuation_value: float

    @property
    def total_cost(self):
        return self.running_cost + self.switching_cost + self.terminal_cost + self.continuation_value


class FeedbackPolicy:
    """Feedback data for the path engine, packed as flat node tables.

    Built from a solved field and its region map.  ``extra_switch`` marks
    additional nodes that switch unconditionally (used to probe
    suboptimality); region-map switch nodes are confirmed against the
    interpolated envelope before switching.
    """

    def __init__(self, spec: ProblemSpec, grid: Grid, u: FieldMatrix,
                 regions: Optional[RegionMap], eps: float,
                 zeta_cap: Optional[float] = None, tol_switch: float = 1e-6,
                 extra_switch: Optional[np.ndarray] = None,
                 gamma0: Optional[np.ndarray] = None):
        m, n = spec.idx.m, spec.idx.n
        self.spec = spec
        self.grid = grid
        self.eps = float(eps)
        self.u_vals = np.ascontiguousarray(u.values)
        self.grad_vals = np.ascontiguousarray(node_gradients(grid, u.values))
        if regions is None:
            labels = np.full((m, n, grid.n_total), -1, dtype=np.int8)
        else:
            labels = regions.labels
        self.labels = np.ascontiguousarray(labels)
        if extra_switch is None:
            extra_switch = np.zeros((m, n, grid.n_total), dtype=np.uint8)
        self.extra_switch = np.ascontiguousarray(extra_switch.astype(np.uint8))
        self.theta = np.ascontiguousarray(spec.costs.theta)
        self.Q = np.ascontiguousarray(
            np.stack([g.q for g in spec.generators]).astype(float))
        tabs = sample_state_tables(spec, grid)
        self.b_tab = np.ascontiguousarray(tabs["b"])
        self.c_tab = np.ascontiguousarray(tabs["c"])
        self.h_tab = np.ascontiguousarray(tabs["h"])
        self.g_tab = np.ascontiguousarray(tabs["g"])
        self.f_tab = np.ascontiguousarray(tabs["f"])
        chol = np.empty_like(tabs["a"])
        for state in range(n):
            for p in range(grid.n_total):
                two_a = 2.0 * tabs["a"][state, p]
                if np.all(two_a == 0.0):
                    chol[state, p] = 0.0  # deterministic dynamics
                    continue
                try:
                    chol[state, p] = np.linalg.cholesky(two_a)
                except np.linalg.LinAlgError as exc:
                    raise ValueError(
                        f"2a not positive definite at node {p}, state {state}") from exc
        self.chol_tab = np.ascontiguousarray(chol)
        grad_sup = float(np.abs(self.grad_vals).max())
        self.grad_sup = grad_sup
        self.zeta_cap = float(zeta_cap) if zeta_cap is not None else 2.0 * grad_sup / self.eps
        self.tol_switch = float(tol_switch)
        g0 = np.zeros(grid.dim)
        g0[0] = 1.0
        self.gamma0 = np.ascontiguousarray(gamma0 if gamma0 is not None else g0)
        self.c_min = float(self.c_tab.min())

    @classmethod
    def lazy(cls, spec, grid):
        """No pushing, no switching; costs accrue along the raw dynamics."""
        zero = FieldMatrix(grid, np.zeros((spec.idx.m, spec.idx.n, grid.n_total)))
        return cls(spec, grid, zero, None, eps=0.5, zeta_cap=0.0)

    def default_horizon(self):
        # the discount makes the truncated tail ~ exp(-50) of scale
        if self.c_min <= 0:
            return 50.0
        return 50.0 / self.c_min

    def pack(self):
        grid = self.grid
        nshape = np.array(grid.nodes, dtype=np.int64)
        return (
            np.int64(grid.dim), np.ascontiguousarray(grid.domain.lower),
            np.ascontiguousarray(grid.domain.upper), np.ascontiguousarray(grid.h), nshape,
            self.u_vals, self.grad_vals, self.labels, self.extra_switch,
            self.theta, self.Q, self.b_tab, self.c_tab, self.h_tab, self.g_tab,
            self.f_tab, self.chol_tab, np.float64(self.eps), np.float64(self.zeta_cap),
            np.float64(self.tol_switch), self.gamma0,
        )


# --- compiled twins of the scalar penalty functions ------------------------

_phi_j = nb.njit(cache=True)(penalty._phi_scalar)
_phi1_j = nb.njit(cache=True)(penalty._phi1_scalar)

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@nb.njit(cache=True)
def _legendre_radial_j(eps, ynorm, gval):
    # compiled twin of the golden-section conjugate in `penalty`
    if ynorm == 0.0:
        return 0.0
    hi = max(math.sqrt(gval * gval + 2.0 * eps), 0.5 * eps * ynorm) + 1.0
    lo = 0.0
    x1 = hi - _INVPHI * (hi - lo)
    x2 = lo + _INVPHI * (hi - lo)
    f1 = x1 * ynorm - _phi_j((x1 * x1 - gval * gval) / eps)
    f2 = x2 * ynorm - _phi_j((x2 * x2 - gval * gval) / eps)
    xtol = 1e-12 * (1.0 + hi)
    while hi - lo > xtol:
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _INVPHI * (hi - lo)
            f2 = x2 * ynorm - _phi_j((x2 * x2 - gval * gval) / eps)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _INVPHI * (hi - lo)
            f1 = x1 * ynorm - _phi_j((x1 * x1 - gval * gval) / eps)
    s = 0.5 * (lo + hi)
    val = s * ynorm - _phi_j((s * s - gval * gval) / eps)
    return max(val, 0.0)


# --- interpolation ----------------------------------------------------------


@nb.njit(cache=True, inline="always")
def _cell(x, lower, h, nshape, dim):
    i0 = 0
    j0 = 0
    wx = 0.0
    wy = 0.0
    fx = (x[0] - lower[0]) / h[0]
    i0 = int(math.floor(fx))
    if i0 < 0:
        i0 = 0
    if i0 > nshape[0] - 2:
        i0 = nshape[0] - 2
    wx = fx - i0
    if wx < 0.0:
        wx = 0.0
    if wx > 1.0:
        wx = 1.0
    if dim == 2:
        fy = (x[1] - lower[1]) / h[1]
        j0 = int(math.floor(fy))
        if j0 < 0:
            j0 = 0
        if j0 > nshape[1] - 2:
            j0 = nshape[1] - 2
        wy = fy - j0
        if wy < 0.0:
            wy = 0.0
        if wy > 1.0:
            wy = 1.0
    return i0, j0, wx, wy


@nb.njit(cache=True, inline="always")
def _interp(vals, x, lower, h, nshape, dim):
    i0, j0, wx, wy = _cell(x, lower, h, nshape, dim)
    if dim == 1:
        return vals[i0] * (1.0 - wx) + vals[i0 + 1] * wx
    n1 = nshape[1]
    v00 = vals[i0 * n1 + j0]
    v01 = vals[i0 * n1 + j0 + 1]
    v10 = vals[(i0 + 1) * n1 + j0]
    v11 = vals[(i0 + 1) * n1 + j0 + 1]
    return ((1 - wx) * ((1 - wy) * v00 + wy * v01) + wx * ((1 - wy) * v10 + wy * v11))


@nb.njit(cache=True, inline="always")
def _nearest(x, lower, h, nshape, dim):
    i = int(round((x[0] - lower[0]) / h[0]))
    if i < 0:
        i = 0
    if i > nshape[0] - 1:
        i = nshape[0] - 1
    if dim == 1:
        return i
    j = int(round((x[1] - lower[1]) / h[1]))
    if j < 0:
        j = 0
    if j > nshape[1] - 1:
        j = nshape[1] - 1
    return i * nshape[1] + j


# --- policy -----------------------------------------------------------------


@nb.njit(cache=True)
def _switch_decision(x, ell, iota, lower, h, nshape, dim, u_vals, labels,
                     extra_switch, theta, tol_switch):
    m = u_vals.shape[0]
    if m == 1:
        return False, -1
    node = _nearest(x, lower, h, nshape, dim)
    labelled = labels[ell, iota, node] == 2
    forced = extra_switch[ell, iota, node] == 1
    if not labelled and not forced:
        return False, -1
    best = np.inf
    target = -1
    for lp in range(m):
        if lp == ell:
            continue
        v = _interp(u_vals[lp, iota], x, lower, h, nshape, dim) + theta[ell, lp]
        if v < best:
            best = v
            target = lp
    if labelled:
        here = _interp(u_vals[ell, iota], x, lower, h, nshape, dim)
        if abs(here - best) <= tol_switch:
            return True, target
        return forced, target
    return True, target


@nb.njit(cache=True)
def _push_action(x, ell, iota, lower, h, nshape, dim, grad_vals, g_tab,
                 eps, zeta_cap, gamma0, direction):
    gn2 = 0.0
    for k in range(dim):
        gk = _interp(grad_vals[ell, iota, :, k], x, lower, h, nshape, dim)
        direction[k] = gk
        gn2 += gk * gk
    gn = math.sqrt(gn2)
    gval = _interp(g_tab[iota], x, lower, h, nshape, dim)
    s = gn2 - gval * gval
    rate = 2.0 * (_phi1_j(s / eps) / eps) * gn
    if gn > 0.0:
        for k in range(dim):
            direction[k] /= gn
    else:
        for k in range(dim):
            direction[k] = gamma0[k]
    if rate > zeta_cap:
        rate = zeta_cap
        lcost = _legendre_radial_j(eps, rate, gval)
    else:
        lcost = rate * gn - _phi_j(s / eps)
        if lcost < 0.0:
            lcost = 0.0
    return rate, lcost


# --- path kernel ------------------------------------------------------------

_OUT_SLOTS = 12  # run, switch, terminal, continuation, censored, exit_time,
                 # nswitch, explosion, discount, n_events_overflow, exit_x, exit_y


@nb.njit(cache=True)
def _sim_one(path_index, seed, x0, l0, i0, dt, t_max, dim, lower, upper, h,
             nshape, u_vals, grad_vals, labels, extra_switch, theta, Q,
             b_tab, c_tab, h_tab, g_tab, f_tab, chol_tab, eps, zeta_cap,
             tol_switch, gamma0, use_continuation, use_bridge,
             rec_cap, rec_t, rec_kind, rec_val, out):
    k0, k1 = path_key(seed, path_index)
    ctr = np.uint64(0)

    m = u_vals.shape[0]
    x = np.empty(dim)
    xn = np.empty(dim)
    dirv = np.empty(dim)
    rowvar = np.empty(dim)
    z = np.empty(2)
    for k in range(dim):
        x[k] = x0[k]
    ell = l0
    iota = i0
    t = 0.0
    r = 0.0
    run_cost = 0.0
    sw_cost = 0.0
    term_cost = 0.0
    cont_val = 0.0
    censored = 0.0
    exit_time = -1.0
    nswitch = 0.0
    explosion = 0.0
    nrec = 0
    overflow = 0.0

    center0 = 0.5 * (lower[0] + upper[0])
    halfw0 = 0.5 * (upper[0] - lower[0])

    while True:
        # instantaneous switching; the no-zero-loop assumption plus this
        # cascade cap keeps the same-instant chain finite
        for _ in range(m):
            do_switch, target = _switch_decision(
                x, ell, iota, lower, h, nshape, dim, u_vals, labels,
                extra_switch, theta, tol_switch)
            if not do_switch:
                break
            sw_cost += math.exp(-r) * theta[ell, target]
            ell = target
            nswitch += 1.0
            if nrec < rec_cap:
                rec_t[nrec] = t
                rec_kind[nrec] = 1
                rec_val[nrec] = target
                nrec += 1
            elif rec_cap > 0:
                overflow = 1.0

        dt_step = dt
        censor_step = False
        if t + dt >= t_max:
            dt_step = t_max - t
            censor_step = True
            if dt_step <= 0.0:
                censored = 1.0
                if use_continuation:
                    cont_val = math.exp(-r) * _interp(u_vals[ell, iota], x, lower, h, nshape, dim)
                break

        rate, lcost = _push_action(x, ell, iota, lower, h, nshape, dim,
                                   grad_vals, g_tab, eps, zeta_cap, gamma0, dirv)
        hval = _interp(h_tab[iota], x, lower, h, nshape, dim)
        cval = _interp(c_tab[iota], x, lower, h, nshape, dim)

        # diffusion increment
        z0, z1 = normal_pair(k0, k1, ctr)
        ctr += np.uint64(1)
        z[0] = z0
        z[1] = z1
        sq = math.sqrt(dt_step)
        for k in range(dim):
            drift = -(_interp(b_tab[iota, :, k], x, lower, h, nshape, dim)
                      + dirv[k] * rate)
            noise = 0.0
            rv = 0.0
            for j in range(dim):
                ckj = _interp(chol_tab[iota, :, k, j], x, lower, h, nshape, dim)
                noise += ckj * z[j]
                rv += ckj * ckj
            rowvar[k] = rv
            xn[k] = x[k] + drift * dt_step + noise * sq
        # explosion guard: 10x box
        for k in range(dim):
            ck = 0.5 * (lower[k] + upper[k])
            wk = 0.5 * (upper[k] - lower[k])
            if abs(xn[k] - ck) > 10.0 * wk:
                explosion = 1.0
        if explosion > 0.0:
            break

        # first boundary crossing on the segment
        s_star = 1.0
        exited = False
        bridge_axis = -1
        bridge_side = 0.0
        for k in range(dim):
            if xn[k] < lower[k]:
                s_k = (lower[k] - x[k]) / (xn[k] - x[k])
                if s_k < s_star:
                    s_star = s_k
                exited = True
            elif xn[k] > upper[k]:
                s_k = (upper[k] - x[k]) / (xn[k] - x[k])
                if s_k < s_star:
                    s_star = s_k
                exited = True

        if not exited and use_bridge:
            # segment stays inside: test intra-step crossings against the
            # Brownian-bridge probability per axis, which removes the
            # half-order survival bias of discrete exit checks
            for k in range(dim):
                v = rowvar[k] * dt_step
                if v <= 0.0:
                    continue
                u1, u2 = uniform_pair(k0, k1, ctr)
                ctr += np.uint64(1)
                p_lo = math.exp(-2.0 * (x[k] - lower[k]) * (xn[k] - lower[k]) / v)
                if u1 < p_lo:
                    exited = True
                    bridge_axis = k
                    bridge_side = lower[k]
                    break
                p_hi = math.exp(-2.0 * (upper[k] - x[k]) * (upper[k] - xn[k]) / v)
                if u2 < p_hi:
                    exited = True
                    bridge_axis = k
                    bridge_side = upper[k]
                    break
            if exited:
                s_star = 0.5  # expected crossing time of the bridge

        eff = s_star * dt_step if exited else dt_step

        # chain over the elapsed part of the step (exact exponential clocks)
        remaining = eff
        elapsed = 0.0
        while True:
            lam = -Q[ell, iota, iota]
            if lam <= 0.0:
                break
            u1, u2 = uniform_pair(k0, k1, ctr)
            ctr += np.uint64(1)
            hold = -math.log(u1) / lam
            if hold >= remaining:
                break
            remaining -= hold
            elapsed += hold
            thresholdv = u2 * lam
            acc = 0.0
            tgt = -1
            for kappa in range(u_vals.shape[1]):
                if kappa == iota:
                    continue
                acc += Q[ell, iota, kappa]
                if thresholdv <= acc:
                    tgt = kappa
                    break
            if tgt < 0:
                for kappa in range(u_vals.shape[1] - 1, -1, -1):
                    if kappa != iota and Q[ell, iota, kappa] > 0.0:
                        tgt = kappa
                        break
            iota_new = tgt
            if nrec < rec_cap:
                rec_t[nrec] = t + elapsed
                rec_kind[nrec] = 0
                rec_val[nrec] = iota_new
                nrec += 1
            elif rec_cap > 0:
                overflow = 1.0
            iota = iota_new

        # left-endpoint quadrature over the elapsed piece
        run_cost += math.exp(-r) * (hval + lcost) * eff
        r += cval * eff
        t += eff

        if exited:
            for k in range(dim):
                xk = x[k] + s_star * (xn[k] - x[k])
                if xk < lower[k]:
                    xk = lower[k]
                if xk > upper[k]:
                    xk = upper[k]
                x[k] = xk
            if bridge_axis >= 0:
                x[bridge_axis] = bridge_side
            term_cost = math.exp(-r) * _interp(f_tab[iota], x, lower, h, nshape, dim)
            exit_time = t
            break

        for k in range(dim):
            x[k] = xn[k]

        if censor_step:
            censored = 1.0
            if use_continuation:
                cont_val = math.exp(-r) * _interp(u_vals[ell, iota], x, lower, h, nshape, dim)
            break

    out[0] = run_cost
    out[1] = sw_cost
    out[2] = term_cost
    out[3] = cont_val
    out[4] = censored
    out[5] = exit_time
    out[6] = nswitch
    out[7] = explosion
    out[8] = r
    out[9] = overflow
    out[10] = x[0]
    out[11] = x[dim - 1]
    return nrec


@nb.njit(cache=True, parallel=True)
def _run_batch(n_paths, seed, x0, l0, i0, dt, t_max, dim, lower, upper, h,
               nshape, u_vals, grad_vals, labels, extra_switch, theta, Q,
               b_tab, c_tab, h_tab, g_tab, f_tab, chol_tab, eps, zeta_cap,
               tol_switch, gamma0, use_continuation, use_bridge, out):
    dummy_t = np.empty(1)
    dummy_k = np.empty(1, dtype=np.int64)
    dummy_v = np.empty(1, dtype=np.int64)
    for p in nb.prange(n_paths):
        _sim_one(p, seed, x0, l0, i0, dt, t_max, dim, lower, upper, h,
                 nshape, u_vals, grad_vals, labels, extra_switch, theta, Q,
                 b_tab, c_tab, h_tab, g_tab, f_tab, chol_tab, eps, zeta_cap,
                 tol_switch, gamma0, use_continuation, use_bridge,
                 0, dummy_t, dummy_k, dummy_v, out[p])


@nb.njit(cache=True)
def _chain_marginal_counts(Q_one, i0, t, n_samples, seed):
    """Terminal-state counts of the exact clock simulation, for law tests."""
    n = Q_one.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    for p in range(n_samples):
        k0, k1 = path_key(seed, p)
        ctr = np.uint64(0)
        state = i0
        remaining = t
        while True:
            lam = -Q_one[state, state]
            if lam <= 0.0:
                break
            u1, u2 = uniform_pair(k0, k1, ctr)
            ctr += np.uint64(1)
            hold = -math.log(u1) / lam
            if hold >= remaining:
                break
            remaining -= hold
            thresholdv = u2 * lam
            acc = 0.0
            tgt = -1
            for kappa in range(n):
                if kappa == state:
                    continue
                acc += Q_one[state, kappa]
                if thresholdv <= acc:
                    tgt = kappa
                    break
            if tgt < 0:
                for kappa in range(n - 1, -1, -1):
                    if kappa != state and Q_one[state, kappa] > 0.0:
                        tgt = kappa
                        break
            state = tgt
        counts[state] += 1
    return counts


# --- public operations -------------------------------------------------------


def step_chain(spec: ProblemSpec, iota: int, ell: int, dt: float, rng) -> int:
    """Advance the chain one step under regime ``ell``'s generator.

    Exact in law for a constant generator over the step: exponential
    holding clocks, iterating residual time so multiple jumps within the
    step are handled.
    """
    q = spec.generators[ell].q
    state = int(iota)
    remaining = float(dt)
    while True:
        lam = -q[state, state]
        if lam <= 0.0:
            return state
        hold = rng.exponential(1.0 / lam)
        if hold >= remaining:
            return state
        remaining -= hold
        rates = q[state].copy()
        rates[state] = 0.0
        state = int(rng.choice(len(rates), p=rates / lam))


def policy_action(policy: FeedbackPolicy, x, iota: int, ell: int):
    """Switch decision, push direction and rate at one point.

    Returns ``(switch_to, direction, zeta_rate)`` where ``switch_to`` is
    ``None`` when staying is optimal.  Raises :class:`OutOfDomain` outside
    the closed domain.
    """
    x = np.asarray(x, dtype=float)
    if not policy.spec.domain.contains(x, closed=True):
        raise OutOfDomain(f"{x} outside the closed domain")
    grid = policy.grid
    nshape = np.array(grid.nodes, dtype=np.int64)
    do, target = _switch_decision(
        x, ell, iota, grid.domain.lower, grid.h, nshape, grid.dim,
        policy.u_vals, policy.labels, policy.extra_switch, policy.theta,
        policy.tol_switch)
    if do:
        return int(target), policy.gamma0.copy(), 0.0
    direction = np.empty(grid.dim)
    rate, _ = _push_action(x, ell, iota, grid.domain.lower, grid.h, nshape,
                           grid.dim, policy.grad_vals, policy.g_tab,
                           policy.eps, policy.zeta_cap, policy.gamma0, direction)
    return None, direction, float(rate)


def _common_args(policy: FeedbackPolicy, cfg: SimConfig, x0, l0, i0):
    x0 = np.asarray(x0, dtype=float)
    if not policy.spec.domain.contains(x0, closed=False):
        raise OutOfDomain(f"start point {x0} must be interior")
    t_max = cfg.horizon_cap if cfg.horizon_cap is not None else policy.default_horizon()
    zeta_cap = cfg.zeta_cap if cfg.zeta_cap is not None else policy.zeta_cap
    eps = cfg.eps if cfg.eps is not None else policy.eps
    (dim, lower, upper, h, nshape, u_vals, grad_vals, labels, extra, theta, Q,
     b_tab, c_tab, h_tab, g_tab, f_tab, chol_tab, _eps, _cap, tol_sw, gamma0) = policy.pack()
    return (x0, np.int64(l0), np.int64(i0), np.float64(cfg.dt), np.float64(t_max),
            dim, lower, upper, h, nshape, u_vals, grad_vals, labels, extra, theta,
            Q, b_tab, c_tab, h_tab, g_tab, f_tab, chol_tab, np.float64(eps),
            np.float64(zeta_cap), np.float64(max(cfg.tol_switch, tol_sw)), gamma0)


def simulate_path(spec: ProblemSpec, policy: FeedbackPolicy, cfg: SimConfig,
                  path_index: int, x0, l0: int, i0: int,
                  use_continuation: bool = True) -> PathRecord:
    """Simulate one path; deterministic given ``(cfg.seed, path_index)``."""
    args = _common_args(policy, cfg, x0, l0, i0)
    t_max = float(args[4])
    lam_max = max(1.0, float(np.abs(policy.Q).max()))
    cap = int(64 + 8 * lam_max * t_max + 8 * spec.idx.m)
    rec_t = np.empty(cap)
    rec_kind = np.empty(cap, dtype=np.int64)
    rec_val = np.empty(cap, dtype=np.int64)
    out = np.zeros(_OUT_SLOTS)
    nrec = _sim_one(np.int64(path_index), np.int64(cfg.seed), *args,
                    np.uint8(1 if use_continuation else 0),
                    np.uint8(1 if cfg.bridge_exit else 0),
                    cap, rec_t, rec_kind, rec_val, out)
    if out[7] > 0:
        raise StepExplosion(f"path {path_index} left the 10x bounding box")
    events = [(float(rec_t[k]), "switch" if rec_kind[k] == 1 else "jump", int(rec_val[k]))
              for k in range(nrec)]
    censored = out[4] > 0
    dim = policy.grid.dim
    exit_point = None if censored else np.array([out[10], out[11]])[:dim]
    return PathRecord(
        path_index=path_index,
        exit_time=None if censored else float(out[5]),
        censored=censored,
        exit_point=exit_point,
        events=events,
        discount=float(out[8]),
        running_cost=float(out[0]),
        switching_cost=float(out[1]),
        terminal_cost=float(out[2]),
        continuation_value=float(out[3]),
    )


def estimate_value(spec: ProblemSpec, policy: FeedbackPolicy, cfg: SimConfig,
                   x0, l0: int, i0: int, use_continuation: bool = True) -> CostEstimate:
    """Mean discounted cost over ``cfg.n_paths`` paths with standard error.

    Censored paths contribute their accumulated cost plus the discounted
    interpolated field value at the censor point (bias control; visible as
    ``censored_fraction`` in the estimate).
    """
    _configure_threads()
    args = _common_args(policy, cfg, x0, l0, i0)
    out = np.zeros((cfg.n_paths, _OUT_SLOTS))
    _run_batch(np.int64(cfg.n_paths), np.int64(cfg.seed), *args,
               np.uint8(1 if use_continuation else 0),
               np.uint8(1 if cfg.bridge_exit else 0), out)
    if np.any(out[:, 7] > 0):
        bad = int(np.argmax(out[:, 7] > 0))
        raise StepExplosion(f"path {bad} left the 10x bounding box")
    costs = out[:, 0] + out[:, 1] + out[:, 2] + out[:, 3]
    mean = float(costs.mean())
    std_error = float(costs.std(ddof=1) / math.sqrt(cfg.n_paths)) if cfg.n_paths > 1 else 0.0
    return CostEstimate(mean, std_error, cfg.n_paths, float(out[:, 4].mean()))


def martingale_check(spec: ProblemSpec, policy: FeedbackPolicy, cfg: SimConfig,
                     x0, l0: int, i0: int, probe_time: float) -> dict:
    """Estimate the stopped value-plus-cost functional at a probe time.

    Along the feedback control the discounted field value plus accumulated
    costs is a martingale, so the estimate should match the field at the
    start point; the z-score quantifies the gap.
    """
    capped = SimConfig(dt=cfg.dt, n_paths=cfg.n_paths, seed=cfg.seed, eps=cfg.eps,
                       horizon_cap=float(probe_time), zeta_cap=cfg.zeta_cap,
                       tol_switch=cfg.tol_switch, bridge_exit=cfg.bridge_exit)
    est = estimate_value(spec, policy, capped, x0, l0, i0, use_continuation=True)
    grid = policy.grid
    nshape = np.array(grid.nodes, dtype=np.int64)
    target = float(_interp(policy.u_vals[l0, i0], np.asarray(x0, dtype=float),
                           grid.domain.lower, grid.h, nshape, grid.dim))
    z = 0.0 if est.std_error == 0 else (est.mean - target) / est.std_error
    return {
        "mean": est.mean,
        "std_error": est.std_error,
        "target": target,
        "z": z,
        "n_paths": est.n_paths,
        "probe_time": probe_time,
        "censored_fraction": est.censored_fraction,
    }


def jump_cost(spec: ProblemSpec, x0, direction, dzeta: float, iota: int) -> float:
    """Cost of a deliberate jump of size ``dzeta`` in unit ``direction``.

    16-point Gauss-Legendre quadrature of the line-averaged proportional
    cost; the continuous engine itself never jumps.
    """
    x0 = np.asarray(x0, dtype=float)
    direction = np.asarray(direction, dtype=float)
    nodes, weights = np.polynomial.legendre.leggauss(16)
    lam = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    pts = x0[None, :] - lam[:, None] * direction[None, :] * dzeta
    gvals = spec.coeffs.g(pts, iota)
    return float(dzeta * np.sum(w * gvals))


def chain_marginal_counts(spec: ProblemSpec, ell: int, i0: int, t: float,
                          n_samples: int, seed: int) -> np.ndarray:
    """Empirical terminal-state counts of the compiled chain sampler."""
    return np.asarray(_chain_marginal_counts(
        np.ascontiguousarray(spec.generators[ell].q), np.int64(i0),
        np.float64(t), np.int64(n_samples), np.int64(seed)))
