"""Community economics: shared energy, incentive receipts, bills, losses
and the loss-first discount allocation.

All functions are pure and operate on realized per-step powers.  The
community is paid the incentive rate on the shared power (the per-step
minimum of generation and aggregate consumption) plus the market price on
everything the plant generates; members pay their retail tariff on their
own consumption.  The discount is allocated by first refunding each
member the bill increase it suffered by ceding control, then splitting
the remainder equally.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import TariffSet, TimeGrid

__all__ = [
    "SettlementLedger",
    "BillSummary",
    "shared_power",
    "step_receipt",
    "accumulate_bills",
    "allocate_discount",
    "settle",
    "write_ledger_csv",
    "write_summary_csv",
]

SUM_TOL = 1e-9


def shared_power(pv: float, member_powers: Sequence[float]) -> float:
    """Power generated and consumed inside the community at one step (kW)."""
    return min(float(pv), float(sum(member_powers)))


def step_receipt(p_sh: float, p_pv: float, incentive_rate: float, market_price: float, dt_hours: float) -> float:
    """Community income for one step: incentive on shared energy plus
    market remuneration of everything generated."""
    return incentive_rate * dt_hours * p_sh + market_price * dt_hours * p_pv


def accumulate_bills(member_tariff: np.ndarray, powers: np.ndarray, dt_hours: float) -> np.ndarray:
    """Per-member undiscounted bills over an interval.

    ``member_tariff`` and ``powers`` have shape (n_members, n_steps).
    """
    return np.asarray(member_tariff * powers * dt_hours).sum(axis=1)


def allocate_discount(d_total: float, losses: Sequence[float], mode: str = "loss_first") -> np.ndarray:
    """Split the community receipt among members.

    ``loss_first`` refunds each member its loss and shares the remainder
    equally, so received-minus-loss is identical across members and the
    split telescopes to the total.  ``equal`` ignores losses.
    """
    losses = np.asarray(losses, dtype=float)
    n = losses.size
    if n < 1:
        raise ValueError("need at least one member")
    if mode == "equal":
        return np.full(n, d_total / n)
    if mode != "loss_first":
        raise ValueError(f"unknown allocation mode {mode!r}")
    return losses + (d_total - losses.sum()) / n


@dataclass
class SettlementLedger:
    """Realized per-step record of one controller's run."""

    member_power: np.ndarray  # (n_members, n_steps) kW
    pv: np.ndarray  # (n_steps,) kW
    steps: np.ndarray  # absolute step indices

    def __post_init__(self):
        self.member_power = np.asarray(self.member_power, dtype=float)
        self.pv = np.asarray(self.pv, dtype=float)
        self.steps = np.asarray(self.steps, dtype=int)
        if self.member_power.shape[1] != self.pv.shape[0] or self.pv.shape[0] != self.steps.shape[0]:
            raise ValueError("ledger series lengths disagree")

    @property
    def n_members(self) -> int:
        return self.member_power.shape[0]

    def shared_series(self) -> np.ndarray:
        return np.minimum(self.pv, self.member_power.sum(axis=0))


@dataclass
class BillSummary:
    """Comparative settlement of a coordinated vs an individual run."""

    bills_coordinated: np.ndarray  # undiscounted bills under the community controller
    bills_individual: np.ndarray  # bills when each member optimizes alone
    losses: np.ndarray  # bill increase from ceding control
    discount_member: np.ndarray  # allocated share of the community receipt
    discounted_bills: np.ndarray
    d_total: float
    d_shared_part: float  # incentive on shared energy
    d_sale_part: float  # market remuneration of generation
    d_shared_part_individual: float
    se_kwh_coordinated: float
    se_kwh_individual: float
    aggregation: str = "step"
    remainder_negative: bool = False
    flags: list = field(default_factory=list)


def _hourly_shared_energy(ledger: SettlementLedger, grid: TimeGrid) -> float:
    """Shared energy with generation/consumption averaged per hour first (kWh)."""
    sph = grid.steps_per_hour
    if abs(sph * grid.dt_hours - 1.0) > 1e-9:
        raise ValueError("hourly aggregation needs a step length dividing one hour")
    pv = ledger.pv
    load = ledger.member_power.sum(axis=0)
    n = pv.shape[0]
    total = 0.0
    for a in range(0, n, sph):
        z = min(a + sph, n)
        hours = (z - a) * grid.dt_hours
        total += min(float(pv[a:z].mean()), float(load[a:z].mean())) * hours
    return total


def _shared_energy_kwh(ledger: SettlementLedger, grid: TimeGrid, aggregation: str) -> float:
    if aggregation == "hourly":
        return _hourly_shared_energy(ledger, grid)
    if aggregation != "step":
        raise ValueError(f"unknown aggregation {aggregation!r}")
    return float(ledger.shared_series().sum()) * grid.dt_hours


def settle(
    coordinated: SettlementLedger,
    individual: SettlementLedger,
    tariffs: TariffSet,
    grid: TimeGrid,
    aggregation: str = "step",
) -> BillSummary:
    """Full comparative settlement over the (identical) ledger interval.

    Bills are always accumulated per step; only the shared-energy figure
    honours the ``hourly`` aggregation mode, where powers are averaged to
    hourly means before taking the generation/consumption minimum.
    """
    if coordinated.member_power.shape != individual.member_power.shape:
        raise ValueError("ledgers cover different members or intervals")
    if not np.array_equal(coordinated.steps, individual.steps):
        raise ValueError("ledgers cover different step ranges")
    if not np.allclose(coordinated.pv, individual.pv, atol=1e-12):
        raise ValueError("ledgers disagree on generation")

    steps = coordinated.steps
    gamma = tariffs.member_tariff[:, steps]
    b_coord = accumulate_bills(gamma, coordinated.member_power, grid.dt_hours)
    b_indiv = accumulate_bills(gamma, individual.member_power, grid.dt_hours)
    losses = b_coord - b_indiv

    se_coord = _shared_energy_kwh(coordinated, grid, aggregation)
    se_indiv = _shared_energy_kwh(individual, grid, aggregation)
    d_shared = tariffs.incentive_rate * se_coord
    d_shared_indiv = tariffs.incentive_rate * se_indiv
    d_sale = float((tariffs.market_price[steps] * coordinated.pv).sum()) * grid.dt_hours
    d_total = d_shared + d_sale

    alloc = allocate_discount(d_total, losses)
    flags = []
    remainder_negative = d_total < float(losses.sum()) - SUM_TOL
    if remainder_negative:
        flags.append(
            f"total discount {d_total:.6f} does not cover total losses {float(losses.sum()):.6f}; "
            "equal-remainder shares are negative"
        )
    return BillSummary(
        bills_coordinated=b_coord,
        bills_individual=b_indiv,
        losses=losses,
        discount_member=alloc,
        discounted_bills=b_coord - alloc,
        d_total=d_total,
        d_shared_part=d_shared,
        d_sale_part=d_sale,
        d_shared_part_individual=d_shared_indiv,
        se_kwh_coordinated=se_coord,
        se_kwh_individual=se_indiv,
        aggregation=aggregation,
        remainder_negative=remainder_negative,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Report emission


def _fmt(x: float) -> str:
    return repr(float(x) + 0.0)


def write_ledger_csv(path, ledger: SettlementLedger, tariffs: TariffSet, grid: TimeGrid, device_rows: Sequence) -> None:
    """Per-step long-format ledger.

    ``device_rows`` supplies (step, time_iso, house, device, power_kw)
    tuples for every device including uncontrollable load and the house
    total; community generation and shared power rows are appended here.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time_iso", "house", "device", "power_kw"])
        for row in device_rows:
            step, time_iso, house, device, p = row
            w.writerow([step, time_iso, house, device, _fmt(p)])
        shared = ledger.shared_series()
        for i, k in enumerate(ledger.steps):
            w.writerow([int(k), "", "community", "pv", _fmt(ledger.pv[i])])
            w.writerow([int(k), "", "community", "shared", _fmt(shared[i])])


def write_summary_csv(path, summary: BillSummary) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["member", "bill_coordinated", "bill_individual", "loss", "discount_allocated", "discounted_bill"]
        )
        for i in range(summary.bills_coordinated.shape[0]):
            w.writerow(
                [
                    i,
                    _fmt(summary.bills_coordinated[i]),
                    _fmt(summary.bills_individual[i]),
                    _fmt(summary.losses[i]),
                    _fmt(summary.discount_member[i]),
                    _fmt(summary.discounted_bills[i]),
                ]
            )
        w.writerow([])
        w.writerow(["community", "value"])
        w.writerow(["se_kwh_coordinated", _fmt(summary.se_kwh_coordinated)])
        w.writerow(["se_kwh_individual", _fmt(summary.se_kwh_individual)])
        w.writerow(["discount_total", _fmt(summary.d_total)])
        w.writerow(["discount_shared_energy_part", _fmt(summary.d_shared_part)])
        w.writerow(["discount_energy_sale_part", _fmt(summary.d_sale_part)])
        w.writerow(["discount_shared_energy_part_individual", _fmt(summary.d_shared_part_individual)])
        w.writerow(["aggregation", summary.aggregation])
        w.writerow(["remainder_negative", summary.remainder_negative])


def render_summary(summary: BillSummary) -> str:
    lines = [
        "member  bill_coord  bill_indiv      loss  discount  discounted",
    ]
    for i in range(summary.bills_coordinated.shape[0]):
        lines.append(
            f"{i:6d}  {summary.bills_coordinated[i]:10.4f}  {summary.bills_individual[i]:10.4f}  "
            f"{summary.losses[i]:8.4f}  {summary.discount_member[i]:8.4f}  {summary.discounted_bills[i]:10.4f}"
        )
    lines += [
        "",
        f"shared energy (coordinated): {summary.se_kwh_coordinated:.3f} kWh",
        f"shared energy (individual):  {summary.se_kwh_individual:.3f} kWh",
        f"community receipt: {summary.d_total:.4f} "
        f"(shared-energy part {summary.d_shared_part:.4f}, sale part {summary.d_sale_part:.4f})",
        f"aggregation: {summary.aggregation}",
    ]
    for fl in summary.flags:
        lines.append(f"flag: {fl}")
    return "\n".join(lines) + "\n"
