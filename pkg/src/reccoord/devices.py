"""Smart-home device models.

Two faces of the same physics:

* pure simulation steppers (:func:`thermal_step`, :func:`simulate_house_step`)
  used as closed-loop ground truth, and
* constraint-row generators that emit the linear encoding of each device
  for the receding-horizon optimizers.

Row generators return a :class:`RowBundle`: variables, rows, objective
penalty terms and, per absolute step, the device's electrical power as a
linear expression.  All step indices in bundles are absolute simulation
steps.

The appliance run logic exists in two interchangeable encodings: the
binary phase automaton (``formulation="automaton"``) and a one-binary-
per-feasible-start reformulation (``formulation="start_time"``), which is
much smaller and is what the controllers use by default.  Equivalence of
the two is covered by randomized tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .core import (
    ApplianceProgram,
    ApplianceProgress,
    HouseModel,
    HouseState,
    PevParams,
    RequestWindow,
    ThermalParams,
)
from .milp import ConstraintRow

__all__ = [
    "AcsDecision",
    "DeviceDecision",
    "HouseActivity",
    "RowBundle",
    "DeadlineUnmeetable",
    "DecisionBoundsError",
    "thermal_step",
    "acs_constraint_rows",
    "appliance_constraint_rows",
    "pev_constraint_rows",
    "balance_rows",
    "simulate_house_step",
    "reconstruct_run",
]

THETA_LB = -30.0
THETA_UB = 60.0
SLACK_UB = 1000.0
BOUND_TOL = 1e-9


class DeadlineUnmeetable(ValueError):
    """The remaining window cannot fit the remaining work."""


class DecisionBoundsError(ValueError):
    """A decision violates a device bound beyond tolerance."""


@dataclass(frozen=True)
class AcsDecision:
    """Heating/cooling electrical powers of the air-conditioning system."""

    p_h: float = 0.0
    p_c: float = 0.0


@dataclass(frozen=True)
class DeviceDecision:
    """Per-house applied control for one step."""

    p_h: float = 0.0
    p_c: float = 0.0
    appliance_exec: tuple = ()
    appliance_power: tuple = ()
    p_p: float = 0.0

    def total_controllable(self) -> float:
        return self.p_h + self.p_c + sum(self.appliance_power) + self.p_p


@dataclass(frozen=True)
class HouseActivity:
    """Which windows are active for a house at the current step."""

    u_h: bool = False
    u_c: bool = False
    appliance_active: tuple = ()  # per appliance index: RequestWindow or None
    pev_active: Optional[RequestWindow] = None


@dataclass
class RowBundle:
    """Variables, rows and power expressions contributed by one device."""

    variables: list = field(default_factory=list)  # (name, lb, ub, kind)
    rows: list = field(default_factory=list)
    objective: dict = field(default_factory=dict)
    power: dict = field(default_factory=dict)  # step -> (coeffs dict, const)
    sos_group: Optional[list] = None
    warnings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add_power(self, step: int, coeffs: Mapping[str, float], const: float = 0.0) -> None:
        cur = self.power.get(step)
        if cur is None:
            self.power[step] = (dict(coeffs), const)
        else:
            merged, c0 = cur
            for k, v in coeffs.items():
                merged[k] = merged.get(k, 0.0) + v
            self.power[step] = (merged, c0 + const)


# ---------------------------------------------------------------------------
# Air conditioning


def thermal_step(
    theta: float,
    decision: AcsDecision,
    theta_ex: float,
    params: ThermalParams,
    dt_hours: float,
) -> float:
    """One-room RC update of the indoor temperature over one step.

    theta' = alpha*theta + (1-alpha)*R*(eta_h*p_h - eta_c*p_c)
             + (1-alpha)*theta_ex,   alpha = exp(-dt/(R*C)).

    Affine in (theta, p_h, p_c, theta_ex), so superposition holds exactly.
    """
    alpha = params.alpha(dt_hours)
    beta = 1.0 - alpha
    return (
        alpha * theta
        + beta * params.R * (params.eta_h * decision.p_h - params.eta_c * decision.p_c)
        + beta * theta_ex
    )


def acs_constraint_rows(
    flags_h: Sequence[int],
    flags_c: Sequence[int],
    params: ThermalParams,
    theta_now: float,
    theta_ex_forecast: Sequence[float],
    dt_hours: float,
    slack_weight: float,
    start_step: int = 0,
    prefix: str = "acs",
    trim: bool = False,
) -> RowBundle:
    """Linear rows of the thermal recursion, power bounds and soft comfort.

    One recursion row per step links consecutive temperature variables;
    heating/cooling powers are bounded by ``flag * p_nom``; on every step
    whose mode flag is set, the next temperature is pulled to the right
    side of the set-point up to a nonnegative slack penalized in the
    objective.  ``trim=True`` drops variables that are fixed to zero and
    the temperature chain beyond the last flagged step (the compact form
    used by the controllers; optimal values are unchanged).
    """
    H = len(flags_h)
    if len(flags_c) != H or len(theta_ex_forecast) < H:
        raise ValueError("flag/forecast lengths disagree")
    if any(fh and fc for fh, fc in zip(flags_h, flags_c)):
        raise ValueError("heating and cooling flags overlap")
    alpha = params.alpha(dt_hours)
    beta = 1.0 - alpha
    gain_h = beta * params.R * params.eta_h
    gain_c = beta * params.R * params.eta_c

    b = RowBundle()
    active = [t for t in range(H) if flags_h[t] or flags_c[t]]
    last = (active[-1] if active else -1) if trim else H - 1
    if last < 0:
        return b

    def th(t: int) -> str:
        return f"{prefix}.th.{start_step + t}"

    for t in range(last + 1):
        b.variables.append((th(t + 1), THETA_LB, THETA_UB, "continuous"))
    for t in range(last + 1):
        coeffs = {th(t + 1): 1.0}
        rhs = beta * float(theta_ex_forecast[t])
        if t == 0:
            rhs += alpha * theta_now
        else:
            coeffs[th(t)] = -alpha
        power = {}
        if flags_h[t] or not trim:
            ph = f"{prefix}.ph.{start_step + t}"
            b.variables.append((ph, 0.0, params.p_nom_h * (1 if flags_h[t] else 0), "continuous"))
            coeffs[ph] = -gain_h
            power[ph] = 1.0
        if flags_c[t] or not trim:
            pc = f"{prefix}.pc.{start_step + t}"
            b.variables.append((pc, 0.0, params.p_nom_c * (1 if flags_c[t] else 0), "continuous"))
            coeffs[pc] = gain_c
            power[pc] = 1.0
        b.rows.append(ConstraintRow(coeffs, "=", rhs, f"{prefix}.dyn.{start_step + t}"))
        if power:
            b.add_power(start_step + t, power)
        if flags_h[t] or flags_c[t]:
            sl = f"{prefix}.sl.{start_step + t}"
            b.variables.append((sl, 0.0, SLACK_UB, "continuous"))
            b.objective[sl] = slack_weight
            if flags_c[t]:
                b.rows.append(
                    ConstraintRow({th(t + 1): 1.0, sl: -1.0}, "<=", params.theta_sp, f"{prefix}.cmf.{start_step + t}")
                )
            else:
                b.rows.append(
                    ConstraintRow({th(t + 1): 1.0, sl: 1.0}, ">=", params.theta_sp, f"{prefix}.cmf.{start_step + t}")
                )
    b.meta["theta_var"] = th
    return b


# ---------------------------------------------------------------------------
# Phase-based appliances


def committed_phase_steps(progress: ApplianceProgress, program: ApplianceProgram, k: int):
    """Steps and powers of the phases a running appliance still owes.

    Phases are consecutive: once started, phase j at step k implies phase
    j+1 at k+1.  Returns [] unless the appliance is mid-run.
    """
    if not progress.started or progress.completed:
        return []
    j = progress.next_phase
    return [(k + off, program.phase_powers[j - 1 + off]) for off in range(program.n_phases - j + 1)]


def appliance_constraint_rows(
    request: RequestWindow,
    program: ApplianceProgram,
    progress: ApplianceProgress,
    horizon: tuple,
    dt_hours: float,
    prefix: str = "app",
    formulation: str = "automaton",
) -> RowBundle:
    """Rows encoding one declared appliance run.

    Inside the window exactly one contiguous, ordered, single execution of
    phases 1..M must happen, finished by the window end.  Already-executed
    phases of a mid-run appliance enter as fixed power constants.  With the
    window end beyond the horizon the completion requirement degrades to a
    must-start-in-time constraint.
    """
    if request.kind != "appliance":
        raise ValueError("not an appliance request")
    k, k_end = horizon
    M = program.n_phases
    b = RowBundle()

    if progress.completed:
        b.meta["exec_vars_at_k"] = []
        return b
    if progress.started:
        for step, pw in committed_phase_steps(progress, program, k):
            if step <= k_end:
                b.add_power(step, {}, pw)
        b.meta["exec_vars_at_k"] = []
        b.meta["committed"] = True
        return b

    first_start = max(request.k1, k)
    latest_start = request.k2 - M + 1
    if first_start > latest_start:
        raise DeadlineUnmeetable(
            f"{prefix}: {M} phases no longer fit in [{first_start},{request.k2}]"
        )

    if formulation == "start_time":
        starts = list(range(first_start, min(latest_start, k_end) + 1))
        names = []
        for t in starts:
            nm = f"{prefix}.x.{t}"
            b.variables.append((nm, 0.0, 1.0, "binary"))
            names.append(nm)
            for j in range(M):
                if t + j <= k_end:
                    b.add_power(t + j, {nm: program.phase_powers[j]})
        sense = "=" if latest_start <= k_end else "<="
        b.rows.append(ConstraintRow({nm: 1.0 for nm in names}, sense, 1.0, f"{prefix}.one"))
        b.sos_group = names
        b.meta["exec_vars_at_k"] = [f"{prefix}.x.{k}"] if first_start == k else []
        b.meta["start_vars"] = {t: nm for t, nm in zip(starts, names)}
        return b

    if formulation != "automaton":
        raise ValueError(f"unknown formulation {formulation!r}")

    lo = first_start
    hi = min(request.k2, k_end)

    def dname(j: int, t: int) -> str:
        return f"{prefix}.d{j}.{t}"

    def sname(t: int) -> str:
        return f"{prefix}.s.{t}"

    # delta support: phase j can only run at steps reachable by a feasible start
    support: dict[int, tuple] = {}
    dvars: dict[tuple, str] = {}
    for j in range(1, M + 1):
        a = max(lo + j - 1, lo)
        z = min(latest_start + j - 1, hi)
        if a > z:
            continue
        support[j] = (a, z)
        for t in range(a, z + 1):
            nm = dname(j, t)
            b.variables.append((nm, 0.0, 1.0, "binary"))
            dvars[(j, t)] = nm
            b.add_power(t, {nm: program.phase_powers[j - 1]})

    svars: dict[int, str] = {}
    for t in range(lo, hi + 2):
        nm = sname(t)
        # completion flag cannot rise before the earliest possible finish
        ub = 1.0 if t >= lo + M else 0.0
        b.variables.append((nm, 0.0, ub, "binary"))
        svars[t] = nm

    # one phase at a time, only inside the window
    for t in range(lo, hi + 1):
        coeffs = {dvars[(j, t)]: 1.0 for j in range(1, M + 1) if (j, t) in dvars}
        if coeffs:
            b.rows.append(ConstraintRow(coeffs, "<=", 1.0, f"{prefix}.one.{t}"))
    # phase ordering
    for j in range(1, M):
        for t in range(lo, hi + 1):
            a = (j, t) in dvars
            c = (j + 1, t + 1) in dvars
            if a and c:
                b.rows.append(
                    ConstraintRow({dvars[(j + 1, t + 1)]: 1.0, dvars[(j, t)]: -1.0}, "=", 0.0, f"{prefix}.ord.{j}.{t}")
                )
    # completion: all phases executed inside the declared window
    if request.k2 <= k_end:
        b.rows.append(
            ConstraintRow({nm: 1.0 for nm in dvars.values()}, "=", float(M), f"{prefix}.done")
        )
    elif latest_start <= k_end:
        coeffs = {dvars[(1, t)]: 1.0 for t in range(lo, min(latest_start, k_end) + 1) if (1, t) in dvars}
        b.rows.append(ConstraintRow(coeffs, "=", 1.0, f"{prefix}.must_start"))
    # completion flag dynamics and no-restart
    for t in range(lo, hi + 1):
        coeffs = {svars[t + 1]: 1.0, svars[t]: -1.0}
        if (M, t) in dvars:
            coeffs[dvars[(M, t)]] = -1.0
        b.rows.append(ConstraintRow(coeffs, "=", 0.0, f"{prefix}.flag.{t}"))
    for (j, t), nm in dvars.items():
        b.rows.append(ConstraintRow({nm: 1.0, svars[t]: 1.0}, "<=", 1.0, f"{prefix}.norst.{j}.{t}"))

    b.meta["exec_vars_at_k"] = [dvars[(j, k)] for j in range(1, M + 1) if (j, k) in dvars]
    b.meta["delta_vars"] = dvars
    b.sos_group = [dvars[(1, t)] for t in range(lo, min(latest_start, k_end) + 1) if (1, t) in dvars]
    return b


def reconstruct_run(dvars: Mapping, values: Mapping[str, float], n_phases: int):
    """Recover (start_step, executed steps) from automaton binaries.

    Raises when the values do not describe exactly one contiguous ordered
    run of phases 1..M.
    """
    on = sorted((t, j) for (j, t), nm in dvars.items() if values[nm] > 0.5)
    if len(on) != n_phases:
        raise ValueError(f"expected {n_phases} executed phases, found {len(on)}")
    start = on[0][0]
    for idx, (t, j) in enumerate(on):
        if t != start + idx or j != idx + 1:
            raise ValueError(f"run is not contiguous/ordered at {(t, j)}")
    return start, [t for t, _ in on]


# ---------------------------------------------------------------------------
# PEV recharging station


def pev_constraint_rows(
    request: RequestWindow,
    params: PevParams,
    remaining_grid_kwh: float,
    horizon: tuple,
    dt_hours: float,
    prefix: str = "pev",
) -> RowBundle:
    """Rows for a charging session: power bounds plus the energy budget.

    With the deadline inside the horizon the delivered battery energy must
    match the remaining need exactly; otherwise an inequality keeps the
    post-horizon rest deliverable at rated power.
    """
    if request.kind != "pev":
        raise ValueError("not a pev request")
    if remaining_grid_kwh < -BOUND_TOL:
        raise ValueError("remaining energy must be >= 0")
    k, k_end = horizon
    b = RowBundle()
    a = max(request.k1, k)
    z = min(request.k2, k_end)
    if a > z or remaining_grid_kwh <= BOUND_TOL:
        if remaining_grid_kwh > BOUND_TOL and request.k2 < k:
            raise DeadlineUnmeetable(f"{prefix}: window ended with {remaining_grid_kwh:.6f} kWh still owed")
        b.meta["p_var_at_k"] = None
        return b

    remaining_steps = request.k2 - a + 1
    deliverable_battery = remaining_steps * dt_hours * params.eta_b * params.p_nom_p
    needed_battery = params.eta_b * remaining_grid_kwh
    if deliverable_battery < needed_battery - 1e-9:
        raise DeadlineUnmeetable(
            f"{prefix}: at most {deliverable_battery:.6f} kWh deliverable before step "
            f"{request.k2}, {needed_battery:.6f} kWh needed"
        )

    names = []
    for t in range(a, z + 1):
        nm = f"{prefix}.pp.{t}"
        b.variables.append((nm, 0.0, params.p_nom_p, "continuous"))
        names.append(nm)
        b.add_power(t, {nm: 1.0})
    coeff = dt_hours * params.eta_b
    if request.k2 <= k_end:
        b.rows.append(
            ConstraintRow({nm: coeff for nm in names}, "=", needed_battery, f"{prefix}.full")
        )
    else:
        beyond = request.k2 - k_end
        slackable = params.eta_b * params.p_nom_p * dt_hours * beyond
        b.rows.append(
            ConstraintRow({nm: coeff for nm in names}, ">=", needed_battery - slackable, f"{prefix}.catchup")
        )
    b.meta["p_var_at_k"] = f"{prefix}.pp.{k}" if a == k else None
    return b


# ---------------------------------------------------------------------------
# House balance and cap


def balance_rows(
    house: HouseModel,
    ul_forecast: Mapping[int, float],
    steps: Sequence[int],
    device_power: Mapping[int, tuple],
    var_ub: Mapping[str, float],
    prefix: str = "bal",
    compact: bool = False,
) -> RowBundle:
    """Total-power definition and the contractual import cap.

    Canonical form introduces an explicit total-power variable per step
    with its defining equality plus the cap row.  Compact form emits only
    cap rows on the device sum, and only for steps where the cap could
    actually bind.  A forecast uncontrollable load above the cap relaxes
    the cap to the forecast (the optimizer cannot shed it) and records a
    warning.
    """
    b = RowBundle()
    for t in steps:
        ul = float(ul_forecast[t])
        cap = house.p_max
        if ul > cap:
            cap = ul
            b.warnings.append(f"{prefix}.{t}: forecast uncontrollable load {ul:.3f} kW exceeds cap {house.p_max} kW")
        coeffs, const = device_power.get(t, ({}, 0.0))
        if compact:
            worst = const + sum(c * var_ub[n] for n, c in coeffs.items() if c > 0)
            if coeffs and worst + ul > cap + BOUND_TOL:
                b.rows.append(ConstraintRow(dict(coeffs), "<=", cap - ul - const, f"{prefix}.cap.{t}"))
        else:
            pi = f"{prefix}.pi.{t}"
            b.variables.append((pi, 0.0, cap, "continuous"))
            row = {pi: 1.0}
            for n, c in coeffs.items():
                row[n] = row.get(n, 0.0) - c
            b.rows.append(ConstraintRow(row, "=", ul + const, f"{prefix}.def.{t}"))
            b.rows.append(ConstraintRow({pi: 1.0}, "<=", cap, f"{prefix}.cap.{t}"))
            b.meta.setdefault("pi_vars", {})[t] = pi
    return b


# ---------------------------------------------------------------------------
# Ground-truth simulation


def simulate_house_step(
    state: HouseState,
    decision: DeviceDecision,
    theta_ex: float,
    ul_actual: float,
    house: HouseModel,
    dt_hours: float,
    activity: HouseActivity,
) -> tuple:
    """Advance one house by one step under an applied decision.

    Returns (next_state, realized total power).  Decisions violating the
    device bounds beyond 1e-9 are rejected; a started appliance must keep
    executing (phases are consecutive).
    """
    th = house.thermal
    if not -BOUND_TOL <= decision.p_h <= (th.p_nom_h if activity.u_h else 0.0) + BOUND_TOL:
        raise DecisionBoundsError(f"p_h={decision.p_h} outside [0,{th.p_nom_h if activity.u_h else 0.0}]")
    if not -BOUND_TOL <= decision.p_c <= (th.p_nom_c if activity.u_c else 0.0) + BOUND_TOL:
        raise DecisionBoundsError(f"p_c={decision.p_c} outside [0,{th.p_nom_c if activity.u_c else 0.0}]")

    n_app = len(house.appliances)
    execs = tuple(decision.appliance_exec) if decision.appliance_exec else (False,) * n_app
    powers = tuple(decision.appliance_power) if decision.appliance_power else (0.0,) * n_app
    new_progress = []
    total_app = 0.0
    for i in range(n_app):
        prog_state = state.appliance_progress[i] if i < len(state.appliance_progress) else ApplianceProgress.idle()
        window = activity.appliance_active[i] if i < len(activity.appliance_active) else None
        program = None
        if window is not None:
            program = house.appliances[int(window.payload)]
        if execs[i]:
            if window is None:
                raise DecisionBoundsError(f"appliance {i} executing outside any window")
            if prog_state.completed:
                raise DecisionBoundsError(f"appliance {i} already completed its program")
            j = prog_state.next_phase if prog_state.started else 1
            expected = program.phase_powers[j - 1]
            if abs(powers[i] - expected) > BOUND_TOL:
                raise DecisionBoundsError(
                    f"appliance {i} phase {j} power {powers[i]} != program value {expected}"
                )
            total_app += expected
            if j >= program.n_phases:
                new_progress.append(ApplianceProgress.done())
            else:
                new_progress.append(ApplianceProgress.running(j + 1))
        else:
            if prog_state.started and not prog_state.completed:
                raise DecisionBoundsError(f"appliance {i} paused mid-run (phases are consecutive)")
            if abs(powers[i]) > BOUND_TOL:
                raise DecisionBoundsError(f"appliance {i} drawing {powers[i]} kW while not executing")
            new_progress.append(prog_state)

    pev_cap = house.pev.p_nom_p if activity.pev_active is not None else 0.0
    if not -BOUND_TOL <= decision.p_p <= pev_cap + BOUND_TOL:
        raise DecisionBoundsError(f"p_p={decision.p_p} outside [0,{pev_cap}]")
    remaining = state.pev_remaining_kwh
    if decision.p_p > BOUND_TOL:
        if remaining is None:
            raise DecisionBoundsError("pev charging without an open session")
        if decision.p_p * dt_hours > remaining + 1e-6:
            raise DecisionBoundsError(
                f"pev delivery {decision.p_p * dt_hours:.6f} kWh exceeds remaining {remaining:.6f} kWh"
            )
    if remaining is not None:
        remaining = max(0.0, remaining - decision.p_p * dt_hours)

    theta_next = thermal_step(state.theta, AcsDecision(decision.p_h, decision.p_c), theta_ex, th, dt_hours)
    realized = decision.p_h + decision.p_c + total_app + decision.p_p + ul_actual
    next_state = HouseState(
        theta=theta_next,
        appliance_progress=tuple(new_progress),
        pev_remaining_kwh=remaining,
    )
    return next_state, realized
