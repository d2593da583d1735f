"""Receding-horizon controllers.

Two controllers share one problem builder:

* the community controller minimizes the sum of member bills minus the
  incentive earned on shared power, coupling members through the shared
  power rows, and
* the member controller minimizes one member's undiscounted bill; the
  community decision is assembled from the independent member solves.

Each control step builds a problem over [k, k+T-1], solves it, applies
only the first slice and re-plans at the next step.

Builder options pick between the spec-shaped canonical emission (explicit
total-power variables, binary phase automaton, full temperature chain)
and a compact emission (start-time binaries, substituted totals, trimmed
chains, pruned cap rows) that solves identical optima much faster; the
test suite pins their equivalence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import devices, milp
from .core import HouseModel, HouseState, RequestWindow, TariffSet, TimeGrid
from .devices import (
    DeadlineUnmeetable,
    DeviceDecision,
    HouseActivity,
    RowBundle,
)
from .milp import ConstraintRow, MilpProblem, solve_milp
from .settlement import shared_power

__all__ = [
    "ControllerOptions",
    "ForecastBundle",
    "ControlDecision",
    "StepInfo",
    "BuiltProblem",
    "build_coa",
    "build_moa_member",
    "mpc_step",
    "SolverBreakdown",
]

TIGHT_TOL = 1e-6


class SolverBreakdown(RuntimeError):
    """The MILP solver gave up (iteration limit); the run cannot continue."""


@dataclass(frozen=True)
class ControllerOptions:
    formulation: str = "start_time"  # or "automaton"
    compact: bool = True
    slack_weight: float = 10.0  # currency per degC per step of comfort slack
    adaptive_horizon: bool = True
    node_limit: int = 200_000
    abs_gap: float = 1e-9

    def canonical(self) -> "ControllerOptions":
        return replace(self, formulation="automaton", compact=False, adaptive_horizon=False)


@dataclass(frozen=True)
class ForecastBundle:
    """Forecasts from step k over the lookahead: pv (H,), ul (N,H), theta_ex (H,)."""

    pv: np.ndarray
    ul: np.ndarray
    theta_ex: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pv", np.asarray(self.pv, dtype=float))
        object.__setattr__(self, "ul", np.atleast_2d(np.asarray(self.ul, dtype=float)))
        object.__setattr__(self, "theta_ex", np.asarray(self.theta_ex, dtype=float))
        if self.pv.shape[0] != self.theta_ex.shape[0] or self.ul.shape[1] != self.pv.shape[0]:
            raise ValueError("forecast lengths disagree")
        if (self.pv < 0).any() or (self.ul < 0).any():
            raise ValueError("pv and ul forecasts must be >= 0")

    @property
    def horizon(self) -> int:
        return self.pv.shape[0]


@dataclass(frozen=True)
class ControlDecision:
    """Applied slice for one step: per-house device powers plus totals."""

    k: int
    house_decisions: tuple  # DeviceDecision per house
    house_power: tuple  # forecast-consistent totals per house (kW)
    p_sh: float  # shared power implied by the predicted totals


@dataclass
class StepInfo:
    status: str = "optimal"
    objective: float = math.nan
    fallback: bool = False
    warnings: list = field(default_factory=list)
    nodes: int = 0
    pivots: int = 0
    n_vars: int = 0
    n_rows: int = 0
    n_binaries: int = 0
    tight: bool = True
    predicted_house_power: Optional[np.ndarray] = None  # (N, e-k+1)
    predicted_psh: Optional[np.ndarray] = None


@dataclass
class BuiltProblem:
    problem: MilpProblem
    k: int
    e: int  # last modeled step (inclusive)
    sos_groups: list
    house_power: dict  # (h, step) -> (coeffs, const) including forecast UL
    acs_vars: dict  # (h, step) -> dict(ph=name|None, pc=name|None)
    app_exec: dict  # (h, a) -> list of names meaning "executes at k"
    app_committed: dict  # (h, a) -> True when mid-run (no choice left)
    pev_var: dict  # h -> name|None (charging power at step k)
    psh: dict  # step -> ("var", name) | ("const", value)
    warnings: list
    houses: Sequence[HouseModel]

    def eval_house_power(self, values: Mapping[str, float], h: int, step: int) -> float:
        coeffs, const = self.house_power.get((h, step), ({}, 0.0))
        return const + sum(c * values[n] for n, c in coeffs.items())


def _relevant_requests(requests: Sequence[RequestWindow], k: int, horizon_end: int):
    out = []
    for r in requests:
        if r.k2 >= k and r.k1 <= horizon_end and (r.declare_k is None or r.declare_k <= k):
            out.append(r)
    return out


def _horizon_end(k: int, grid: TimeGrid, forecasts: ForecastBundle, requests, options: ControllerOptions) -> int:
    hard_end = k + min(grid.horizon_T, forecasts.horizon) - 1
    if not options.adaptive_horizon:
        return hard_end
    ends = [r.k2 for r in requests]
    if not ends:
        return k - 1  # nothing to decide
    return min(hard_end, max(ends))


def _build_house(
    p: MilpProblem,
    bp: BuiltProblem,
    h: int,
    k: int,
    e: int,
    state: HouseState,
    house: HouseModel,
    reqs: Sequence[RequestWindow],
    forecasts: ForecastBundle,
    ul_row: np.ndarray,
    options: ControllerOptions,
    var_ub: dict,
) -> dict:
    """Emit one house's device rows; returns per-step power expressions."""
    H = e - k + 1
    power: dict[int, tuple] = {}

    def merge(bundle: RowBundle, sos: bool = False):
        for name, lb, ub, kind in bundle.variables:
            p.add_variable(name, lb, ub, kind)
            var_ub[name] = ub
        for row in bundle.rows:
            p.add_row(row)
        for name, coef in bundle.objective.items():
            p.add_objective_term(name, coef)
        for step, (coeffs, const) in bundle.power.items():
            if step > e:
                continue
            cur = power.get(step, ({}, 0.0))
            merged = dict(cur[0])
            for n, c in coeffs.items():
                merged[n] = merged.get(n, 0.0) + c
            power[step] = (merged, cur[1] + const)
        if sos and bundle.sos_group:
            bp.sos_groups.append(bundle.sos_group)
        bp.warnings.extend(bundle.warnings)

    # air conditioning: at most one active heat/cool window at a time
    flags_h = np.zeros(H, dtype=int)
    flags_c = np.zeros(H, dtype=int)
    for r in reqs:
        if r.kind == "acs_heat":
            flags_h[max(r.k1, k) - k : min(r.k2, e) - k + 1] = 1
        elif r.kind == "acs_cool":
            flags_c[max(r.k1, k) - k : min(r.k2, e) - k + 1] = 1
    if H > 0 and (flags_h.any() or flags_c.any() or not options.compact):
        acs = devices.acs_constraint_rows(
            flags_h.tolist(),
            flags_c.tolist(),
            house.thermal,
            state.theta,
            forecasts.theta_ex[:H],
            grid_dt(bp),
            options.slack_weight,
            start_step=k,
            prefix=f"h{h}.acs",
            trim=options.compact,
        )
        merge(acs)
        for t in range(k, e + 1):
            names = {}
            ph, pc = f"h{h}.acs.ph.{t}", f"h{h}.acs.pc.{t}"
            names["ph"] = ph if ph in p._index else None
            names["pc"] = pc if pc in p._index else None
            if names["ph"] or names["pc"]:
                bp.acs_vars[(h, t)] = names

    # appliances
    for r in reqs:
        if r.kind != "appliance":
            continue
        a = int(r.payload)
        prog = state.appliance_progress[a]
        bundle = devices.appliance_constraint_rows(
            r,
            house.appliances[a],
            prog,
            (k, e),
            grid_dt(bp),
            prefix=f"h{h}.app{a}",
            formulation=options.formulation,
        )
        merge(bundle, sos=True)
        bp.app_exec[(h, a)] = bundle.meta.get("exec_vars_at_k", [])
        bp.app_committed[(h, a)] = bool(bundle.meta.get("committed"))

    # pev
    for r in reqs:
        if r.kind != "pev":
            continue
        remaining = state.pev_remaining_kwh or 0.0
        bundle = devices.pev_constraint_rows(
            r, house.pev, remaining, (k, e), grid_dt(bp), prefix=f"h{h}.pev"
        )
        merge(bundle)
        bp.pev_var[h] = bundle.meta.get("p_var_at_k")

    # balance and cap rows; house power expressions include forecast UL
    steps = list(range(k, e + 1))
    bal = devices.balance_rows(
        house,
        {t: float(ul_row[t - k]) for t in steps},
        steps,
        power,
        var_ub,
        prefix=f"h{h}",
        compact=options.compact,
    )
    merge(bal)
    out: dict[int, tuple] = {}
    if options.compact:
        for t in steps:
            coeffs, const = power.get(t, ({}, 0.0))
            out[t] = (coeffs, const + float(ul_row[t - k]))
    else:
        pi_vars = bal.meta.get("pi_vars", {})
        for t in steps:
            out[t] = ({pi_vars[t]: 1.0}, 0.0)
    for t, expr in out.items():
        bp.house_power[(h, t)] = expr
    return out


def grid_dt(bp: BuiltProblem) -> float:
    return bp._dt  # set by the builders below


def _new_built(problem: MilpProblem, k: int, e: int, houses, dt: float) -> BuiltProblem:
    bp = BuiltProblem(
        problem=problem,
        k=k,
        e=e,
        sos_groups=[],
        house_power={},
        acs_vars={},
        app_exec={},
        app_committed={},
        pev_var={},
        psh={},
        warnings=[],
        houses=houses,
    )
    bp._dt = dt
    return bp


def build_coa(
    k: int,
    states: Sequence[HouseState],
    active_requests: Sequence[RequestWindow],
    forecasts: ForecastBundle,
    tariffs: TariffSet,
    houses: Sequence[HouseModel],
    grid: TimeGrid,
    options: ControllerOptions = ControllerOptions(),
) -> BuiltProblem:
    """Community problem over [k, k+T-1].

    Objective: sum over steps of member-tariff cost of the total house
    powers minus the incentive on the shared power, plus comfort slack
    penalties.  Shared power is boxed by generation and by the aggregate
    consumption through two inequalities per step; maximizing its reward
    drives it to the minimum of the two.
    """
    reqs = _relevant_requests(active_requests, k, k + min(grid.horizon_T, forecasts.horizon) - 1)
    e = _horizon_end(k, grid, forecasts, reqs, options)
    p = MilpProblem(f"coa.k{k}")
    bp = _new_built(p, k, e, houses, grid.dt_hours)
    if e < k:
        return bp
    var_ub: dict[str, float] = {}
    dt = grid.dt_hours
    for h, house in enumerate(houses):
        hreqs = [r for r in reqs if r.house == h]
        exprs = _build_house(
            p, bp, h, k, e, states[h], house, hreqs, forecasts, forecasts.ul[h], options, var_ub
        )
        gamma = tariffs.member_tariff[h]
        for t, (coeffs, const) in exprs.items():
            w = gamma[t] * dt
            for n, c in coeffs.items():
                p.add_objective_term(n, w * c)
            p.obj_constant += w * const

    # shared power: bounded by generation (32) and aggregate consumption (33)
    cap_sum = float(sum(house.p_max for house in houses))
    g_sh = tariffs.incentive_rate
    for t in range(k, e + 1):
        pv_hat = float(forecasts.pv[t - k])
        load_coeffs: dict[str, float] = {}
        load_const = 0.0
        for h in range(len(houses)):
            coeffs, const = bp.house_power[(h, t)]
            for n, c in coeffs.items():
                load_coeffs[n] = load_coeffs.get(n, 0.0) + c
            load_const += const
        if pv_hat <= 1e-12:
            bp.psh[t] = ("const", 0.0)
            continue
        if options.compact and not load_coeffs and pv_hat >= load_const:
            # nothing controllable: shared power is just min(pv, load)
            val = min(pv_hat, load_const)
            bp.psh[t] = ("const", val)
            p.obj_constant -= g_sh * dt * val
            continue
        if options.compact and pv_hat <= load_const:
            # generation below the uncontrollable floor: pv fully shared
            bp.psh[t] = ("const", pv_hat)
            p.obj_constant -= g_sh * dt * pv_hat
            continue
        nm = f"community.psh.{t}"
        ub = min(pv_hat, cap_sum) if options.compact else cap_sum
        p.add_variable(nm, 0.0, ub)
        var_ub[nm] = ub
        if not options.compact:
            p.add_constraint({nm: 1.0}, "<=", pv_hat, f"psh.pv.{t}")
        row = {nm: 1.0}
        for n, c in load_coeffs.items():
            row[n] = row.get(n, 0.0) - c
        p.add_constraint(row, "<=", load_const, f"psh.load.{t}")
        p.add_objective_term(nm, -g_sh * dt)
        bp.psh[t] = ("var", nm)
    return bp


def build_moa_member(
    h: int,
    k: int,
    state: HouseState,
    requests_h: Sequence[RequestWindow],
    forecasts: ForecastBundle,
    tariff_h: np.ndarray,
    house: HouseModel,
    grid: TimeGrid,
    options: ControllerOptions = ControllerOptions(),
    ul_forecast_h: Optional[np.ndarray] = None,
) -> BuiltProblem:
    """One member's bill-minimization problem (no community terms)."""
    reqs = [
        r
        for r in _relevant_requests(requests_h, k, k + min(grid.horizon_T, forecasts.horizon) - 1)
        if r.house == h
    ]
    e = _horizon_end(k, grid, forecasts, reqs, options)
    p = MilpProblem(f"moa.h{h}.k{k}")
    bp = _new_built(p, k, e, [house], grid.dt_hours)
    if e < k:
        return bp
    var_ub: dict[str, float] = {}
    ul_row = forecasts.ul[h] if ul_forecast_h is None else np.asarray(ul_forecast_h, dtype=float)
    exprs = _build_house(p, bp, h, k, e, state, house, reqs, forecasts, ul_row, options, var_ub)
    dt = grid.dt_hours
    for t, (coeffs, const) in exprs.items():
        w = float(tariff_h[t]) * dt
        for n, c in coeffs.items():
            p.add_objective_term(n, w * c)
        p.obj_constant += w * const
    return bp


# ---------------------------------------------------------------------------
# Solving and slice extraction


def _extract_single(bp: BuiltProblem, values: Mapping[str, float], k: int, state: HouseState, house: HouseModel, h: int):
    """Applied slice for one house from a solved problem."""
    acs = bp.acs_vars.get((h, k), {})
    p_h = values.get(acs.get("ph") or "", 0.0) if acs else 0.0
    p_c = values.get(acs.get("pc") or "", 0.0) if acs else 0.0
    p_h = min(max(p_h, 0.0), house.thermal.p_nom_h)
    p_c = min(max(p_c, 0.0), house.thermal.p_nom_c)

    n_app = len(house.appliances)
    execs = [False] * n_app
    app_pw = [0.0] * n_app
    for a in range(n_app):
        prog = state.appliance_progress[a] if a < len(state.appliance_progress) else None
        if bp.app_committed.get((h, a)):
            execs[a] = True
            app_pw[a] = house.appliances[a].phase_powers[prog.next_phase - 1]
            continue
        exec_vars = bp.app_exec.get((h, a), [])
        if exec_vars and sum(values.get(nm, 0.0) for nm in exec_vars) > 0.5:
            execs[a] = True
            app_pw[a] = house.appliances[a].phase_powers[0]

    pev_name = bp.pev_var.get(h)
    p_p = values.get(pev_name, 0.0) if pev_name else 0.0
    p_p = min(max(p_p, 0.0), house.pev.p_nom_p)
    rem = state.pev_remaining_kwh
    if rem is not None:
        p_p = min(p_p, rem / bp._dt)

    dec = DeviceDecision(
        p_h=p_h, p_c=p_c, appliance_exec=tuple(execs), appliance_power=tuple(app_pw), p_p=p_p
    )
    return dec, bp.eval_house_power(values, h, k)


def _extract_decision(
    bp: BuiltProblem,
    values: Mapping[str, float],
    k: int,
    states: Sequence[HouseState],
    houses: Sequence[HouseModel],
) -> tuple:
    decisions = []
    powers = []
    for h, house in enumerate(houses):
        dec, pw = _extract_single(bp, values, k, states[h], house, h)
        decisions.append(dec)
        powers.append(pw)
    return tuple(decisions), tuple(powers)


def _safe_decision(
    k: int,
    states: Sequence[HouseState],
    active_requests: Sequence[RequestWindow],
    houses: Sequence[HouseModel],
    forecasts: ForecastBundle,
    grid: TimeGrid,
) -> tuple:
    """Feasibility-first fallback when the solver cannot deliver a plan.

    Appliances run when they can no longer wait (or keep running), the
    vehicle charges at rated power, the conditioner tracks its set-point
    with a bound-projected power; the import cap is respected by shedding
    in that priority order.
    """
    decisions = []
    powers = []
    for h, house in enumerate(houses):
        reqs = [r for r in active_requests if r.house == h and r.k1 <= k <= r.k2]
        u_h = any(r.kind == "acs_heat" for r in reqs)
        u_c = any(r.kind == "acs_cool" for r in reqs)
        th = house.thermal
        alpha = th.alpha(grid.dt_hours)
        beta = 1.0 - alpha
        drift = alpha * states[h].theta + beta * float(forecasts.theta_ex[0])
        p_h = p_c = 0.0
        if u_h:
            need = (th.theta_sp - drift) / (beta * th.R * th.eta_h)
            p_h = min(max(need, 0.0), th.p_nom_h)
        if u_c:
            need = (drift - th.theta_sp) / (beta * th.R * th.eta_c)
            p_c = min(max(need, 0.0), th.p_nom_c)

        n_app = len(house.appliances)
        execs = [False] * n_app
        app_pw = [0.0] * n_app
        for r in reqs:
            if r.kind != "appliance":
                continue
            a = int(r.payload)
            prog = states[h].appliance_progress[a]
            program = house.appliances[a]
            if prog.completed:
                continue
            if prog.started:
                execs[a] = True
                app_pw[a] = program.phase_powers[prog.next_phase - 1]
            elif k >= r.k2 - program.n_phases + 1:
                execs[a] = True
                app_pw[a] = program.phase_powers[0]

        p_p = 0.0
        pev_req = next((r for r in reqs if r.kind == "pev"), None)
        rem = states[h].pev_remaining_kwh
        if pev_req is not None and rem:
            p_p = min(house.pev.p_nom_p, rem / grid.dt_hours)

        ul = float(forecasts.ul[h][0])
        headroom = max(house.p_max, ul) - ul - sum(app_pw)
        p_p = min(p_p, max(headroom, 0.0))
        headroom -= p_p
        p_h = min(p_h, max(headroom, 0.0))
        p_c = min(p_c, max(headroom - p_h, 0.0))

        decisions.append(
            DeviceDecision(
                p_h=p_h, p_c=p_c, appliance_exec=tuple(execs), appliance_power=tuple(app_pw), p_p=p_p
            )
        )
        powers.append(p_h + p_c + sum(app_pw) + p_p + ul)
    return tuple(decisions), tuple(powers)


def _solve_built(bp: BuiltProblem, options: ControllerOptions) -> milp.MilpSolution:
    return solve_milp(
        bp.problem,
        node_limit=options.node_limit,
        sos_groups=bp.sos_groups or None,
        abs_gap=options.abs_gap,
    )


def mpc_step(
    controller: str,
    k: int,
    states: Sequence[HouseState],
    active_requests: Sequence[RequestWindow],
    forecasts: ForecastBundle,
    tariffs: TariffSet,
    houses: Sequence[HouseModel],
    grid: TimeGrid,
    options: ControllerOptions = ControllerOptions(),
) -> tuple:
    """One receding-horizon step; returns (ControlDecision, StepInfo).

    ``controller`` is "coa" (community) or "moa" (independent members).
    Solver infeasibility or an unmeetable deadline degrades to the safe
    fallback decision with a warning instead of aborting the run.
    """
    info = StepInfo()
    n = len(houses)
    dt = grid.dt_hours

    def fallback(reason: str):
        info.fallback = True
        info.status = "fallback"
        info.warnings.append(reason)
        decisions, powers = _safe_decision(k, states, active_requests, houses, forecasts, grid)
        psh = shared_power(float(forecasts.pv[0]), powers)
        return ControlDecision(k=k, house_decisions=decisions, house_power=powers, p_sh=psh), info

    if controller == "coa":
        try:
            bp = build_coa(k, states, active_requests, forecasts, tariffs, houses, grid, options)
        except DeadlineUnmeetable as exc:
            return fallback(f"deadline unmeetable: {exc}")
        if bp.e < bp.k or bp.problem.n_vars == 0:
            ul0 = [float(forecasts.ul[h][0]) for h in range(n)]
            decisions = tuple(DeviceDecision(appliance_exec=(False,) * len(h.appliances),
                                             appliance_power=(0.0,) * len(h.appliances)) for h in houses)
            info.objective = 0.0
            psh = shared_power(float(forecasts.pv[0]), ul0)
            return ControlDecision(k=k, house_decisions=decisions, house_power=tuple(ul0), p_sh=psh), info
        sol = _solve_built(bp, options)
        info.n_vars, info.n_rows = bp.problem.n_vars, bp.problem.n_rows
        info.n_binaries = int(bp.problem.binary_indices().size)
        info.nodes, info.pivots = sol.nodes, sol.pivots
        if sol.status == "iteration_limit":
            raise SolverBreakdown(f"community solve hit its pivot budget at step {k}")
        if sol.status != "optimal":
            return fallback(f"community problem infeasible at step {k}")
        info.objective = sol.objective_value
        values = sol.values
        decisions, powers = _extract_decision(bp, values, k, states, houses)
        H = bp.e - bp.k + 1
        pred_power = np.zeros((n, H))
        for h in range(n):
            for t in range(bp.k, bp.e + 1):
                pred_power[h, t - bp.k] = bp.eval_house_power(values, h, t)
        pred_psh = np.zeros(H)
        for t in range(bp.k, bp.e + 1):
            kind, val = bp.psh.get(t, ("const", 0.0))
            pred_psh[t - bp.k] = values[val] if kind == "var" else val
            want = min(float(forecasts.pv[t - k]), float(pred_power[:, t - bp.k].sum()))
            if tariffs.incentive_rate > 0 and abs(pred_psh[t - bp.k] - want) > TIGHT_TOL:
                info.tight = False
                info.warnings.append(
                    f"shared power not tight at step {t}: {pred_psh[t - bp.k]:.8f} vs min {want:.8f}"
                )
        info.predicted_house_power = pred_power
        info.predicted_psh = pred_psh
        info.warnings.extend(bp.warnings)
        psh_now = shared_power(float(forecasts.pv[0]), powers)
        return ControlDecision(k=k, house_decisions=decisions, house_power=powers, p_sh=psh_now), info

    if controller != "moa":
        raise ValueError(f"unknown controller {controller!r}")

    decisions = []
    powers = []
    total_obj = 0.0
    for h, house in enumerate(houses):
        hreqs = [r for r in active_requests if r.house == h]
        try:
            bp = build_moa_member(
                h, k, states[h], hreqs, forecasts, tariffs.member_tariff[h], house, grid, options
            )
        except DeadlineUnmeetable as exc:
            return fallback(f"member {h} deadline unmeetable: {exc}")
        if bp.e < bp.k or bp.problem.n_vars == 0:
            decisions.append(
                DeviceDecision(appliance_exec=(False,) * len(house.appliances),
                               appliance_power=(0.0,) * len(house.appliances))
            )
            powers.append(float(forecasts.ul[h][0]))
            total_obj += bp.problem.obj_constant
            continue
        sol = _solve_built(bp, options)
        info.n_vars += bp.problem.n_vars
        info.n_rows += bp.problem.n_rows
        info.n_binaries += int(bp.problem.binary_indices().size)
        info.nodes += sol.nodes
        info.pivots += sol.pivots
        if sol.status == "iteration_limit":
            raise SolverBreakdown(f"member {h} solve hit its pivot budget at step {k}")
        if sol.status != "optimal":
            return fallback(f"member {h} problem infeasible at step {k}")
        total_obj += sol.objective_value
        values = sol.values
        dec_h, pw_h = _extract_single(bp, values, k, states[h], house, h)
        decisions.append(dec_h)
        powers.append(pw_h)
        info.warnings.extend(bp.warnings)
    info.objective = total_obj
    psh_now = shared_power(float(forecasts.pv[0]), powers)
    return (
        ControlDecision(k=k, house_decisions=tuple(decisions), house_power=tuple(powers), p_sh=psh_now),
        info,
    )
