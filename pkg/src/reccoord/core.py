"""Domain types, time grid, scenario files and validation.

Everything downstream (device models, controllers, settlement, the
simulator) works on the immutable value types defined here.  A scenario is
a single JSON document; :func:`load_scenario` / :func:`save_scenario`
round-trip it and :func:`validate_scenario` checks every structural
invariant before a simulation is allowed to start.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "TimeGrid",
    "TariffSet",
    "ThermalParams",
    "ApplianceProgram",
    "PevParams",
    "RequestWindow",
    "HouseModel",
    "ApplianceProgress",
    "HouseState",
    "Scenario",
    "Violation",
    "ValidationReport",
    "validate_scenario",
    "load_scenario",
    "save_scenario",
    "scenario_from_dict",
    "scenario_to_dict",
]

MONEY_TOL = 1e-9

REQUEST_KINDS = ("acs_heat", "acs_cool", "appliance", "pev")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Discrete control grid: step length in hours, run length, lookahead."""

    dt_hours: float = 0.25
    n_steps: int = 96
    horizon_T: int = 96

    def __post_init__(self):
        if not self.dt_hours > 0:
            raise ValueError("dt_hours must be positive")
        if self.n_steps < 1 or self.horizon_T < 1:
            raise ValueError("n_steps and horizon_T must be >= 1")

    @property
    def steps_per_hour(self) -> int:
        return int(round(1.0 / self.dt_hours))


@dataclass(frozen=True)
class TariffSet:
    """Per-member retail tariffs, market price and the sharing incentive.

    ``member_tariff`` has shape (n_members, n_steps), ``market_price``
    shape (n_steps,); both in currency/kWh.  ``incentive_rate`` is the
    flat currency/kWh paid for energy generated and consumed inside the
    community within the same step.
    """

    member_tariff: np.ndarray
    market_price: np.ndarray
    incentive_rate: float

    def __post_init__(self):
        object.__setattr__(self, "member_tariff", _freeze(np.atleast_2d(self.member_tariff)))
        object.__setattr__(self, "market_price", _freeze(self.market_price))
        if self.incentive_rate < 0:
            raise ValueError("incentive_rate must be >= 0")
        if (self.member_tariff < 0).any() or (self.market_price < 0).any():
            raise ValueError("tariff rates must be >= 0")

    @property
    def n_members(self) -> int:
        return self.member_tariff.shape[0]


@dataclass(frozen=True)
class ThermalParams:
    """One-room RC envelope plus heat-pump ratings.

    R in degC/kW, C in kWh/degC.  The discrete step factor is
    alpha = exp(-dt/(R*C)); powers are electrical, multiplied by the
    heating/cooling COP to become thermal.
    """

    R: float
    C: float
    eta_h: float
    eta_c: float
    p_nom_h: float
    p_nom_c: float
    theta_sp: float

    def __post_init__(self):
        for name in ("R", "C", "eta_h", "eta_c", "p_nom_h", "p_nom_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ThermalParams.{name} must be > 0")

    def alpha(self, dt_hours: float) -> float:
        return math.exp(-dt_hours / (self.R * self.C))


@dataclass(frozen=True)
class ApplianceProgram:
    """Fixed ordered sequence of phase powers (kW), one phase per step."""

    phase_powers: tuple

    def __post_init__(self):
        pp = tuple(float(p) for p in self.phase_powers)
        if len(pp) < 1:
            raise ValueError("a program needs at least one phase")
        if any(p < 0 for p in pp):
            raise ValueError("phase powers must be >= 0")
        object.__setattr__(self, "phase_powers", pp)

    @property
    def n_phases(self) -> int:
        return len(self.phase_powers)


@dataclass(frozen=True)
class PevParams:
    p_nom_p: float
    e_b: float
    eta_b: float

    def __post_init__(self):
        if not self.p_nom_p > 0:
            raise ValueError("PevParams.p_nom_p must be > 0")
        if not self.e_b > 0:
            raise ValueError("PevParams.e_b must be > 0")
        if not 0 < self.eta_b <= 1:
            raise ValueError("PevParams.eta_b must be in (0, 1]")


@dataclass(frozen=True)
class RequestWindow:
    """A user declaration: device may run in [k1, k2] and must meet its goal.

    ``payload`` is the program index for an appliance request, the initial
    state of charge for a pev request and None for acs requests.  The
    controller sees the request only once simulated time reaches
    ``declare_k`` (defaults to k1: declarations carry no advance notice).
    """

    kind: str
    house: int
    device_id: str
    k1: int
    k2: int
    payload: Optional[float] = None
    declare_k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in REQUEST_KINDS:
            raise ValueError(f"unknown request kind {self.kind!r}")
        if self.declare_k is None:
            object.__setattr__(self, "declare_k", self.k1)

    @property
    def n_window_steps(self) -> int:
        return self.k2 - self.k1 + 1


@dataclass(frozen=True)
class HouseModel:
    """Static description of one member home."""

    thermal: ThermalParams
    appliances: tuple
    pev: PevParams
    p_max: float
    ul_series: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "appliances", tuple(self.appliances))
        object.__setattr__(self, "ul_series", _freeze(self.ul_series))
        if not self.p_max > 0:
            raise ValueError("p_max must be > 0")


@dataclass(frozen=True)
class ApplianceProgress:
    """Progress of one appliance through its declared run.

    ``next_phase`` is 1-based; ``started`` implies phases 1..next_phase-1
    already executed on consecutive steps.  ``completed`` is terminal.
    """

    started: bool = False
    completed: bool = False
    next_phase: int = 1

    @classmethod
    def idle(cls) -> "ApplianceProgress":
        return cls()

    @classmethod
    def running(cls, next_phase: int) -> "ApplianceProgress":
        return cls(started=True, next_phase=next_phase)

    @classmethod
    def done(cls) -> "ApplianceProgress":
        return cls(started=True, completed=True)


@dataclass(frozen=True)
class HouseState:
    """Dynamic state carried between control steps."""

    theta: float
    appliance_progress: tuple = ()
    pev_remaining_kwh: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "appliance_progress", tuple(self.appliance_progress))
        if self.pev_remaining_kwh is not None and self.pev_remaining_kwh < -1e-12:
            raise ValueError("pev_remaining_kwh must be >= 0")


@dataclass(frozen=True)
class Scenario:
    """A complete simulation input: grid, tariffs, houses, requests, data."""

    grid: TimeGrid
    tariffs: TariffSet
    houses: tuple
    requests: tuple
    pv_series: np.ndarray
    theta_ex_series: np.ndarray
    seed: int = 0
    theta0: float = 25.0

    def __post_init__(self):
        object.__setattr__(self, "houses", tuple(self.houses))
        object.__setattr__(self, "requests", tuple(self.requests))
        object.__setattr__(self, "pv_series", _freeze(self.pv_series))
        object.__setattr__(self, "theta_ex_series", _freeze(self.theta_ex_series))

    @property
    def n_houses(self) -> int:
        return len(self.houses)


@dataclass(frozen=True)
class Violation:
    entity: str
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.entity}.{self.field}: {self.rule}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple

    def __post_init__(self):
        object.__setattr__(self, "violations", tuple(self.violations))

    @property
    def ok(self) -> bool:
        return not self.violations

    def render(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(str(v) for v in self.violations)


def pev_required_grid_kwh(pev: PevParams, soc: float) -> float:
    """Grid-side energy owed to fill the battery from ``soc`` to full."""
    return pev.e_b * (1.0 - soc) / pev.eta_b


def pev_window_feasible(pev: PevParams, soc: float, n_window_steps: int, dt_hours: float) -> bool:
    """True when charging at rated power for the whole window can fill the battery."""
    deliverable = n_window_steps * dt_hours * pev.eta_b * pev.p_nom_p
    return deliverable >= pev.e_b * (1.0 - soc) - 1e-9


def validate_scenario(
    grid: TimeGrid,
    houses: Sequence[HouseModel],
    tariffs: TariffSet,
    requests: Sequence[RequestWindow],
    pv_series: np.ndarray,
    theta_ex_series: np.ndarray,
) -> ValidationReport:
    """Check every structural invariant of a scenario.

    Pure function: identical inputs produce identical reports.  A scenario
    that validates is guaranteed not to raise during controller problem
    construction.
    """
    v: list[Violation] = []
    n = grid.n_steps

    pv = np.asarray(pv_series, dtype=float)
    tex = np.asarray(theta_ex_series, dtype=float)
    if pv.shape != (n,):
        v.append(Violation("scenario", "pv_series", f"must cover all {n} steps, got {pv.shape}"))
    elif (pv < 0).any():
        v.append(Violation("scenario", "pv_series", "values must be >= 0"))
    if tex.shape != (n,):
        v.append(Violation("scenario", "theta_ex_series", f"must cover all {n} steps, got {tex.shape}"))

    if tariffs.member_tariff.shape != (len(houses), n):
        v.append(
            Violation(
                "tariffs",
                "member_tariff",
                f"need one series of {n} steps per member, got {tariffs.member_tariff.shape}",
            )
        )
    if tariffs.market_price.shape != (n,):
        v.append(Violation("tariffs", "market_price", f"must cover all {n} steps, got {tariffs.market_price.shape}"))

    for i, house in enumerate(houses):
        ent = f"house[{i}]"
        if house.ul_series.shape != (n,):
            v.append(Violation(ent, "ul_series", f"must cover all {n} steps, got {house.ul_series.shape}"))
        elif (house.ul_series < 0).any():
            v.append(Violation(ent, "ul_series", "values must be >= 0"))
        a = house.thermal.alpha(grid.dt_hours)
        if not 0.0 < a < 1.0:
            v.append(Violation(ent, "thermal", f"alpha = exp(-dt/RC) = {a} not in (0,1)"))

    by_device: dict[tuple[int, str], list[RequestWindow]] = {}
    for r_idx, req in enumerate(requests):
        ent = f"request[{r_idx}]({req.device_id})"
        if not 0 <= req.house < len(houses):
            v.append(Violation(ent, "house", f"house index {req.house} out of range"))
            continue
        house = houses[req.house]
        if req.k1 > req.k2:
            v.append(Violation(ent, "k1", f"k1={req.k1} must be <= k2={req.k2}"))
            continue
        if req.k1 < 0 or req.k2 >= n:
            v.append(Violation(ent, "window", f"[{req.k1},{req.k2}] must lie inside the grid [0,{n-1}]"))
            continue
        if req.declare_k is not None and req.declare_k > req.k1:
            v.append(Violation(ent, "declare_k", "declaration cannot come after the window start"))

        if req.kind == "appliance":
            if req.payload is None or int(req.payload) != req.payload:
                v.append(Violation(ent, "payload", "appliance request needs an integer program index"))
                continue
            prog_idx = int(req.payload)
            if not 0 <= prog_idx < len(house.appliances):
                v.append(Violation(ent, "payload", f"program index {prog_idx} out of range"))
                continue
            m_phases = house.appliances[prog_idx].n_phases
            if req.n_window_steps < m_phases:
                v.append(
                    Violation(
                        ent,
                        "window",
                        f"window shorter than program: {req.n_window_steps} steps < {m_phases} phases",
                    )
                )
        elif req.kind == "pev":
            if req.payload is None or not 0.0 <= req.payload <= 1.0:
                v.append(Violation(ent, "payload", "pev request needs an initial SoC in [0,1]"))
                continue
            if not pev_window_feasible(house.pev, req.payload, req.n_window_steps, grid.dt_hours):
                deliverable = req.n_window_steps * grid.dt_hours * house.pev.eta_b * house.pev.p_nom_p
                needed = house.pev.e_b * (1.0 - req.payload)
                v.append(
                    Violation(
                        ent,
                        "window",
                        "declared recharge window too short: "
                        f"max battery energy {deliverable:.6g} kWh < required {needed:.6g} kWh",
                    )
                )
        by_device.setdefault((req.house, req.device_id), []).append(req)

    # Same-device windows must not overlap; heating and cooling windows of
    # one house must not overlap each other either.
    for (h_idx, dev), reqs in sorted(by_device.items()):
        srt = sorted(reqs, key=lambda r: (r.k1, r.k2))
        for a_req, b_req in zip(srt, srt[1:]):
            if b_req.k1 <= a_req.k2:
                v.append(
                    Violation(
                        f"house[{h_idx}].{dev}",
                        "window",
                        f"windows [{a_req.k1},{a_req.k2}] and [{b_req.k1},{b_req.k2}] overlap",
                    )
                )
    acs_by_house: dict[int, list[RequestWindow]] = {}
    for req in requests:
        if req.kind in ("acs_heat", "acs_cool") and 0 <= req.house < len(houses):
            acs_by_house.setdefault(req.house, []).append(req)
    for h_idx, reqs in sorted(acs_by_house.items()):
        srt = sorted(reqs, key=lambda r: (r.k1, r.k2, r.kind))
        for a_req, b_req in zip(srt, srt[1:]):
            if b_req.k1 <= a_req.k2 and {a_req.kind, b_req.kind} == {"acs_heat", "acs_cool"}:
                v.append(
                    Violation(
                        f"house[{h_idx}].acs",
                        "window",
                        f"heating window [{a_req.k1},{a_req.k2}] overlaps cooling window [{b_req.k1},{b_req.k2}]"
                        if a_req.kind == "acs_heat"
                        else f"cooling window [{a_req.k1},{a_req.k2}] overlaps heating window [{b_req.k1},{b_req.k2}]",
                    )
                )

    return ValidationReport(tuple(v))


# ---------------------------------------------------------------------------
# Scenario JSON round-trip


_GRID_KEYS = {"dt_hours", "n_steps", "horizon_T"}
_TARIFF_KEYS = {"member_tariff", "market_price", "incentive_rate"}
_THERMAL_KEYS = {"R", "C", "eta_h", "eta_c", "p_nom_h", "p_nom_c", "theta_sp"}
_PEV_KEYS = {"p_nom_p", "e_b", "eta_b"}
_HOUSE_KEYS = {"thermal", "appliances", "pev", "p_max", "ul_series"}
_REQUEST_KEYS = {"kind", "house", "device_id", "k1", "k2", "payload", "declare_k"}
_TOP_KEYS = {"grid", "tariffs", "houses", "requests", "pv_series", "theta_ex_series", "seed", "theta0"}


def _check_keys(obj: dict, allowed: set, entity: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ValueError(f"{entity}: unknown keys {unknown}")


def scenario_from_dict(doc: dict) -> Scenario:
    _check_keys(doc, _TOP_KEYS, "scenario")
    g = doc["grid"]
    _check_keys(g, _GRID_KEYS, "grid")
    grid = TimeGrid(
        dt_hours=float(g["dt_hours"]),
        n_steps=int(g["n_steps"]),
        horizon_T=int(g.get("horizon_T", 96)),
    )
    t = doc["tariffs"]
    _check_keys(t, _TARIFF_KEYS, "tariffs")
    tariffs = TariffSet(
        member_tariff=np.array(t["member_tariff"], dtype=float),
        market_price=np.array(t["market_price"], dtype=float),
        incentive_rate=float(t["incentive_rate"]),
    )
    houses = []
    for j, h in enumerate(doc["houses"]):
        _check_keys(h, _HOUSE_KEYS, f"houses[{j}]")
        _check_keys(h["thermal"], _THERMAL_KEYS, f"houses[{j}].thermal")
        _check_keys(h["pev"], _PEV_KEYS, f"houses[{j}].pev")
        houses.append(
            HouseModel(
                thermal=ThermalParams(**{k: float(v) for k, v in h["thermal"].items()}),
                appliances=tuple(ApplianceProgram(tuple(p)) for p in h["appliances"]),
                pev=PevParams(**{k: float(v) for k, v in h["pev"].items()}),
                p_max=float(h["p_max"]),
                ul_series=np.array(h["ul_series"], dtype=float),
            )
        )
    requests = []
    for j, r in enumerate(doc["requests"]):
        _check_keys(r, _REQUEST_KEYS, f"requests[{j}]")
        requests.append(
            RequestWindow(
                kind=str(r["kind"]),
                house=int(r["house"]),
                device_id=str(r["device_id"]),
                k1=int(r["k1"]),
                k2=int(r["k2"]),
                payload=None if r.get("payload") is None else float(r["payload"]),
                declare_k=None if r.get("declare_k") is None else int(r["declare_k"]),
            )
        )
    return Scenario(
        grid=grid,
        tariffs=tariffs,
        houses=tuple(houses),
        requests=tuple(requests),
        pv_series=np.array(doc["pv_series"], dtype=float),
        theta_ex_series=np.array(doc["theta_ex_series"], dtype=float),
        seed=int(doc.get("seed", 0)),
        theta0=float(doc.get("theta0", 25.0)),
    )


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "grid": {
            "dt_hours": sc.grid.dt_hours,
            "n_steps": sc.grid.n_steps,
            "horizon_T": sc.grid.horizon_T,
        },
        "tariffs": {
            "member_tariff": sc.tariffs.member_tariff.tolist(),
            "market_price": sc.tariffs.market_price.tolist(),
            "incentive_rate": sc.tariffs.incentive_rate,
        },
        "houses": [
            {
                "thermal": {
                    "R": h.thermal.R,
                    "C": h.thermal.C,
                    "eta_h": h.thermal.eta_h,
                    "eta_c": h.thermal.eta_c,
                    "p_nom_h": h.thermal.p_nom_h,
                    "p_nom_c": h.thermal.p_nom_c,
                    "theta_sp": h.thermal.theta_sp,
                },
                "appliances": [list(a.phase_powers) for a in h.appliances],
                "pev": {"p_nom_p": h.pev.p_nom_p, "e_b": h.pev.e_b, "eta_b": h.pev.eta_b},
                "p_max": h.p_max,
                "ul_series": h.ul_series.tolist(),
            }
            for h in sc.houses
        ],
        "requests": [
            {
                "kind": r.kind,
                "house": r.house,
                "device_id": r.device_id,
                "k1": r.k1,
                "k2": r.k2,
                "payload": r.payload,
                "declare_k": r.declare_k,
            }
            for r in sc.requests
        ],
        "pv_series": sc.pv_series.tolist(),
        "theta_ex_series": sc.theta_ex_series.tolist(),
        "seed": sc.seed,
        "theta0": sc.theta0,
    }


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(sc: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(sc), fh, indent=1)
        fh.write("\n")


def validate(sc: Scenario) -> ValidationReport:
    """Validate a packed scenario."""
    return validate_scenario(sc.grid, sc.houses, sc.tariffs, sc.requests, sc.pv_series, sc.theta_ex_series)
