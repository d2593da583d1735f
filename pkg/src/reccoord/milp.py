"""Mixed-integer linear programs: model container and self-contained solver.

:class:`MilpProblem` is a plain container of named, bounded variables
(continuous or binary), linear constraint rows and a linear minimization
objective.  :func:`solve_lp` solves the relaxation with a bounded-variable
primal simplex; :func:`solve_milp` runs branch-and-bound on the binaries
(best-bound node selection, most-fractional branching, depth-first dive on
first descent) with dual-simplex warm starts at the nodes.

Tolerances: feasibility and integrality 1e-6 absolute; the incumbent
returned by branch-and-bound is within 1e-6 (actually 1e-9) of the true
optimum.  Everything is deterministic for a fixed variable insertion
order.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np
import scipy.sparse as sp

from . import simplex
from .simplex import SimplexEngine, BasisState

__all__ = [
    "CONTINUOUS",
    "BINARY",
    "ConstraintRow",
    "MilpProblem",
    "MilpSolution",
    "ProblemError",
    "solve_lp",
    "solve_milp",
]

CONTINUOUS = "continuous"
BINARY = "binary"

FEAS_TOL = 1e-6
INT_TOL = 1e-6
PRUNE_EPS = 1e-9

SENSES = ("<=", "=", ">=")


class ProblemError(ValueError):
    """Raised when a problem violates its structural invariants."""


@dataclass(frozen=True)
class ConstraintRow:
    """One linear row: sum(coeffs[name] * x[name]) sense rhs."""

    coeffs: Mapping[str, float]
    sense: str
    rhs: float
    name: str = ""

    def __post_init__(self):
        if self.sense not in SENSES:
            raise ProblemError(f"sense must be one of {SENSES}, got {self.sense!r}")
        if not any(v != 0.0 for v in self.coeffs.values()):
            raise ProblemError(f"constraint {self.name!r} has no nonzero coefficient")


@dataclass
class _Var:
    name: str
    lb: float
    ub: float
    kind: str


class MilpProblem:
    """Named-variable MILP in minimization form."""

    def __init__(self, name: str = ""):
        self.name = name
        self._vars: list[_Var] = []
        self._index: dict[str, int] = {}
        self.rows: list[ConstraintRow] = []
        self._obj: dict[str, float] = {}
        self.obj_constant: float = 0.0

    # -- construction ---------------------------------------------------------

    def add_variable(self, name: str, lb: float, ub: float, kind: str = CONTINUOUS) -> str:
        if name in self._index:
            raise ProblemError(f"duplicate variable {name!r}")
        if kind not in (CONTINUOUS, BINARY):
            raise ProblemError(f"unknown kind {kind!r}")
        if kind == BINARY and not (0.0 <= lb and ub <= 1.0):
            raise ProblemError(f"binary {name!r} needs bounds within [0,1], got [{lb},{ub}]")
        if not (math.isfinite(lb) and math.isfinite(ub)):
            raise ProblemError(f"variable {name!r} needs finite bounds, got [{lb},{ub}]")
        if lb > ub:
            raise ProblemError(f"variable {name!r} has empty bound interval [{lb},{ub}]")
        self._index[name] = len(self._vars)
        self._vars.append(_Var(name, float(lb), float(ub), kind))
        return name

    def add_binary(self, name: str) -> str:
        return self.add_variable(name, 0.0, 1.0, BINARY)

    def add_constraint(self, coeffs: Mapping[str, float], sense: str, rhs: float, name: str = "") -> None:
        self.add_row(ConstraintRow(dict(coeffs), sense, float(rhs), name))

    def add_row(self, row: ConstraintRow) -> None:
        for v in row.coeffs:
            if v not in self._index:
                raise ProblemError(f"constraint {row.name!r} references undeclared variable {v!r}")
        self.rows.append(row)

    def add_objective_term(self, name: str, coef: float) -> None:
        if name not in self._index:
            raise ProblemError(f"objective references undeclared variable {name!r}")
        self._obj[name] = self._obj.get(name, 0.0) + coef

    def set_objective(self, coeffs: Mapping[str, float], constant: float = 0.0) -> None:
        for v in coeffs:
            if v not in self._index:
                raise ProblemError(f"objective references undeclared variable {v!r}")
        self._obj = dict(coeffs)
        self.obj_constant = float(constant)

    # -- views ------------------------------------------------------------------

    @property
    def n_vars(self) -> int:
        return len(self._vars)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def variable_names(self) -> list:
        return [v.name for v in self._vars]

    def index_of(self, name: str) -> int:
        return self._index[name]

    def binary_indices(self) -> np.ndarray:
        return np.array([i for i, v in enumerate(self._vars) if v.kind == BINARY], dtype=int)

    def bounds_arrays(self):
        lb = np.array([v.lb for v in self._vars], dtype=float)
        ub = np.array([v.ub for v in self._vars], dtype=float)
        return lb, ub

    def objective_array(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for name, coef in self._obj.items():
            c[self._index[name]] += coef
        return c

    def matrix(self):
        """(A, senses, rhs) with empty rows dropped (the only presolve)."""
        data, rows_ix, cols_ix, senses, rhs = [], [], [], [], []
        r = 0
        for row in self.rows:
            entries = [(self._index[n], c) for n, c in row.coeffs.items() if c != 0.0]
            if not entries:
                continue
            for j, c in entries:
                rows_ix.append(r)
                cols_ix.append(j)
                data.append(float(c))
            senses.append(row.sense)
            rhs.append(row.rhs)
            r += 1
        a = sp.csr_matrix((data, (rows_ix, cols_ix)), shape=(r, self.n_vars))
        return a, senses, np.array(rhs, dtype=float)

    # -- LP text dump -------------------------------------------------------------

    def to_lp_format(self) -> str:
        """Problem in the conventional LP text format, for external checks."""

        def term(coef: float, name: str, first: bool) -> str:
            sign = "-" if coef < 0 else ("" if first else "+")
            mag = abs(coef)
            return f"{sign} {mag:.12g} {name}".strip() if not first else f"{sign}{mag:.12g} {name}"

        lines = ["Minimize", " obj:"]
        parts = []
        for i, v in enumerate(self._vars):
            coef = self._obj.get(v.name, 0.0)
            if coef != 0.0:
                parts.append(term(coef, v.name, not parts))
        lines[1] += " " + (" ".join(parts) if parts else "0 " + self._vars[0].name if self._vars else "0")
        lines.append("Subject To")
        for r, row in enumerate(self.rows):
            rname = row.name or f"c{r}"
            parts = []
            for name, coef in row.coeffs.items():
                if coef != 0.0:
                    parts.append(term(coef, name, not parts))
            op = {"<=": "<=", ">=": ">=", "=": "="}[row.sense]
            lines.append(f" {rname}: {' '.join(parts)} {op} {row.rhs:.12g}")
        lines.append("Bounds")
        for v in self._vars:
            lines.append(f" {v.lb:.12g} <= {v.name} <= {v.ub:.12g}")
        bins = [v.name for v in self._vars if v.kind == BINARY]
        if bins:
            lines.append("Binaries")
            for chunk in range(0, len(bins), 8):
                lines.append(" " + " ".join(bins[chunk : chunk + 8]))
        lines.append("End")
        return "\n".join(lines) + "\n"


@dataclass
class MilpSolution:
    status: str  # "optimal" | "infeasible" | "iteration_limit"
    objective_value: float = math.nan
    x: Optional[np.ndarray] = None
    names: tuple = ()
    pivots: int = 0
    nodes: int = 0

    @property
    def values(self) -> dict:
        if self.x is None:
            return {}
        return {n: float(v) for n, v in zip(self.names, self.x)}

    def value(self, name: str) -> float:
        return float(self.x[self.names.index(name)])


class _Compiled:
    """Problem compiled to the simplex standard form, reused across solves."""

    def __init__(self, problem: MilpProblem):
        if problem.n_vars == 0:
            raise ProblemError("problem has no variables")
        a, senses, rhs = problem.matrix()
        self.engine = SimplexEngine(a, problem.objective_array(), rhs, senses)
        self.lb_struct, self.ub_struct = problem.bounds_arrays()
        self.binaries = problem.binary_indices()
        self.names = tuple(problem.variable_names)
        self.obj_constant = problem.obj_constant
        self.n_struct = problem.n_vars
        size = self.engine.m + self.engine.n_total
        self.dantzig_iters = 10 * size
        self.max_iters = 10**5 * size

    def full_bounds(self, lb_struct=None, ub_struct=None):
        lb = self.lb_struct if lb_struct is None else lb_struct
        ub = self.ub_struct if ub_struct is None else ub_struct
        return self.engine.full_bounds(lb, ub)

    def solution_from_state(self, state: BasisState, lb, ub, status: str, nodes: int = 0) -> MilpSolution:
        eng = self.engine
        if status != simplex.OPTIMAL:
            return MilpSolution(status=status, names=self.names, pivots=state.pivots, nodes=nodes)
        x = eng.extract(state, lb, ub)[: self.n_struct]
        obj = float(eng.c[: self.n_struct] @ x) + self.obj_constant
        return MilpSolution(
            status="optimal",
            objective_value=obj,
            x=x,
            names=self.names,
            pivots=state.pivots,
            nodes=nodes,
        )


def _primal_from_crash(comp: "_Compiled", lb, ub):
    """Fresh primal solve; one restart if the factorization breaks down."""
    for _ in range(2):
        state = comp.engine.crash_state(lb, ub)
        try:
            status = comp.engine.primal(state, lb, ub, comp.dantzig_iters, comp.max_iters)
            return status, state
        except simplex.NumericalBreakdown:
            continue
    return simplex.ITERATION_LIMIT, comp.engine.crash_state(lb, ub)


def solve_lp(problem: MilpProblem) -> MilpSolution:
    """Optimal basic solution of the LP relaxation (binaries kept in [lb,ub])."""
    comp = _Compiled(problem)
    lb, ub = comp.full_bounds()
    status, state = _primal_from_crash(comp, lb, ub)
    return comp.solution_from_state(state, lb, ub, status)


def check_solution(problem: MilpProblem, sol: MilpSolution, tol: float = FEAS_TOL) -> list:
    """Replay a solution against every row; returns violation descriptions."""
    if sol.x is None:
        return []
    idx = {n: i for i, n in enumerate(sol.names)}
    bad = []
    for r, row in enumerate(problem.rows):
        lhs = sum(c * sol.x[idx[n]] for n, c in row.coeffs.items())
        err = {"<=": lhs - row.rhs, ">=": row.rhs - lhs, "=": abs(lhs - row.rhs)}[row.sense]
        if err > tol:
            bad.append(f"row {row.name or r}: violated by {err:.3g}")
    lb, ub = problem.bounds_arrays()
    for i, name in enumerate(sol.names):
        if sol.x[i] < lb[i] - tol or sol.x[i] > ub[i] + tol:
            bad.append(f"variable {name}: outside [{lb[i]},{ub[i]}]")
    return bad


@dataclass
class _Node:
    bound: float
    seq: int
    basis: np.ndarray
    vstat: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __lt__(self, other: "_Node") -> bool:
        return (self.bound, self.seq) < (other.bound, other.seq)


def solve_milp(
    problem: MilpProblem,
    *,
    node_limit: int = 200_000,
    warm: Optional[BasisState] = None,
    sos_groups: Optional[Iterable] = None,
    abs_gap: float = PRUNE_EPS,
) -> MilpSolution:
    """Branch-and-bound over the binary variables.

    Best-bound node selection with a depth-first dive on the first descent;
    branches on the most fractional binary (lowest index on ties).  Node
    relaxations re-solve with the warm-started primal simplex from the
    parent basis.

    ``sos_groups`` optionally lists ordered groups of binary names of which
    exactly one will be 1 (e.g. start-time choices).  When the branching
    variable belongs to a group, the group's remaining support is split in
    half instead of fixing a single binary, which cuts tree depth massively
    on scheduling structures.  Purely a search-order hint: the returned
    optimum is the same.
    """
    comp = _Compiled(problem)
    eng = comp.engine
    lb0, ub0 = comp.full_bounds()
    group_of: dict[int, np.ndarray] = {}
    if sos_groups:
        for grp in sos_groups:
            cols = np.array([problem.index_of(n) for n in grp], dtype=int)
            for c2 in cols:
                group_of[int(c2)] = cols

    if warm is None:
        status, state = _primal_from_crash(comp, lb0, ub0)
    else:
        state = warm
        try:
            status = eng.primal(state, lb0, ub0, comp.dantzig_iters, comp.max_iters)
        except simplex.NumericalBreakdown:
            status, state = _primal_from_crash(comp, lb0, ub0)
    if status != simplex.OPTIMAL:
        return comp.solution_from_state(state, lb0, ub0, status)

    binaries = comp.binaries
    total_pivots = state.pivots

    if binaries.size == 0:
        return comp.solution_from_state(state, lb0, ub0, status)

    best_obj = math.inf
    best_x: Optional[np.ndarray] = None
    heap: list[_Node] = []
    seq = 0
    nodes_processed = 0

    def node_obj(st: BasisState, lb, ub) -> float:
        return eng.objective(st, lb, ub) + comp.obj_constant

    def frac_info(st: BasisState, lb, ub):
        # most fractional binary: maximize distance to the nearest integer,
        # lowest variable index on ties (np.argmax picks the first maximum)
        x = eng.extract(st, lb, ub)
        vals = x[binaries]
        dist = np.minimum(vals - np.floor(vals), np.ceil(vals) - vals)
        order = np.argmax(dist)
        return x, int(binaries[order]), float(dist[order])

    prune_eps = max(abs_gap, PRUNE_EPS)

    def child_bounds(lb, ub, x, branch_col):
        """Deterministic child bound sets, dive candidate first."""
        grp = group_of.get(branch_col)
        if grp is not None:
            free = grp[ub[grp] > lb[grp]]
            if free.size >= 2:
                vals = np.maximum(x[free], 0.0)
                total = float(vals.sum())
                if total > INT_TOL:
                    cum = np.cumsum(vals)
                    split = int(np.searchsorted(cum, 0.5 * total, side="left"))
                    split = min(split, free.size - 2)
                    left, right = free[: split + 1], free[split + 1 :]
                    llb, lub = lb.copy(), ub.copy()
                    lub[right] = 0.0
                    llb[right] = 0.0
                    rlb, rub = lb.copy(), ub.copy()
                    rub[left] = 0.0
                    rlb[left] = 0.0
                    left_mass = float(cum[split])
                    if left_mass >= total - left_mass:
                        return [(llb, lub), (rlb, rub)]
                    return [(rlb, rub), (llb, lub)]
        v = x[branch_col]
        nearest = 1.0 if v >= 0.5 else 0.0
        out = []
        for fix in (nearest, 1.0 - nearest):
            clb, cub = lb.copy(), ub.copy()
            clb[branch_col] = fix
            cub[branch_col] = fix
            out.append((clb, cub))
        return out

    def warm_solve(st: BasisState, lb, ub) -> str:
        """Primal re-solve of ``st`` in place under new bounds."""
        fixed = (ub <= lb) & (st.vstat != simplex.BASIC)
        st.vstat[fixed] = simplex.AT_LB
        eng.recompute_xb(st, lb, ub)
        try:
            return eng.primal(st, lb, ub, comp.dantzig_iters, comp.max_iters)
        except simplex.NumericalBreakdown:
            return simplex.ITERATION_LIMIT

    # ``current`` carries a live, already-solved state with its inverse;
    # heap nodes are light (basis + bounds, parent bound as a valid proxy)
    # and are re-solved lazily when popped.
    current: Optional[tuple] = (state, lb0, ub0)

    while True:
        if current is None:
            while heap and heap[0].bound >= best_obj - prune_eps:
                heapq.heappop(heap)
            if not heap:
                break
            node = heapq.heappop(heap)
            try:
                st = eng.rebuild_state(node.basis, node.vstat, node.lb, node.ub)
                nstatus = eng.primal(st, node.lb, node.ub, comp.dantzig_iters, comp.max_iters)
            except simplex.NumericalBreakdown:
                nstatus, st = _primal_from_crash(comp, node.lb, node.ub)
            if nstatus == simplex.ITERATION_LIMIT:
                nstatus, st = _primal_from_crash(comp, node.lb, node.ub)
                if nstatus == simplex.ITERATION_LIMIT:
                    return MilpSolution(
                        status="iteration_limit", names=comp.names, pivots=total_pivots, nodes=nodes_processed
                    )
            total_pivots += st.pivots
            if nstatus == simplex.INFEASIBLE:
                continue
            current = (st, node.lb, node.ub)
        st, lb, ub = current
        current = None
        nodes_processed += 1
        if nodes_processed > node_limit:
            return MilpSolution(status="iteration_limit", names=comp.names, pivots=total_pivots, nodes=nodes_processed)

        obj = node_obj(st, lb, ub)
        if obj >= best_obj - prune_eps:
            continue
        x, branch_col, dist = frac_info(st, lb, ub)
        if dist <= INT_TOL:
            if obj < best_obj - 1e-12:
                best_obj = obj
                best_x = x[: comp.n_struct].copy()
            continue

        bounds_pair = child_bounds(lb, ub, x, branch_col)
        # sibling: solve eagerly from a copy, store light with its true bound
        slb, sub = bounds_pair[1]
        sst = st.copy()
        sst.pivots = 0
        sstatus = warm_solve(sst, slb, sub)
        if sstatus == simplex.ITERATION_LIMIT:
            sstatus, sst = _primal_from_crash(comp, slb, sub)
            if sstatus == simplex.ITERATION_LIMIT:
                return MilpSolution(
                    status="iteration_limit", names=comp.names, pivots=total_pivots, nodes=nodes_processed
                )
        total_pivots += sst.pivots
        if sstatus == simplex.OPTIMAL:
            sobj = node_obj(sst, slb, sub)
            if sobj < best_obj - prune_eps:
                basis, vstat = sst.light_copy()
                heapq.heappush(heap, _Node(sobj, seq, basis, vstat, slb, sub))
                seq += 1
        del sst
        # dive child: re-solve the parent state in place
        clb, cub = bounds_pair[0]
        st.pivots = 0
        cstatus = warm_solve(st, clb, cub)
        if cstatus == simplex.ITERATION_LIMIT:
            cstatus, st = _primal_from_crash(comp, clb, cub)
            if cstatus == simplex.ITERATION_LIMIT:
                return MilpSolution(
                    status="iteration_limit", names=comp.names, pivots=total_pivots, nodes=nodes_processed
                )
        total_pivots += st.pivots
        if cstatus == simplex.OPTIMAL:
            current = (st, clb, cub)

    if best_x is None:
        return MilpSolution(status="infeasible", names=comp.names, pivots=total_pivots, nodes=nodes_processed)
    return MilpSolution(
        status="optimal",
        objective_value=best_obj,
        x=best_x,
        names=comp.names,
        pivots=total_pivots,
        nodes=nodes_processed,
    )
