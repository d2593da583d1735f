"""Bounded-variable simplex engine (dense basis inverse, sparse columns).

Internal computational core behind :mod:`reccoord.milp`.  Works on the
standard form

    min c @ x   s.t.   A x + s = rhs,   lb <= (x, s) <= ub,

where every row owns one slack column (equalities get a fixed slack).
Structural variables must have finite bounds; slack bounds may be
half-infinite.  The engine offers

* a composite-phase primal simplex (phase 1 minimizes the total bound
  violation of the basic values, switching to the true objective as soon
  as the basis is feasible), and
* a dual simplex used to re-solve after bound tightening, starting from a
  dual-feasible basis (how branch-and-bound walks its tree).

Pivoting is deterministic: largest-coefficient pricing with lowest-index
tie-breaks, switching to Bland's rule after a fixed number of iterations
so that termination is guaranteed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

AT_LB = 0
AT_UB = 1
BASIC = 2

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration_limit"


class NumericalBreakdown(Exception):
    """The basis factorization failed; callers should restart from scratch."""

FEAS_TOL = 1e-7
DUAL_TOL = 1e-9
PIVOT_TOL = 1e-9
RATIO_TIE = 1e-9


@dataclass
class BasisState:
    basis: np.ndarray  # (m,) column index of each basic variable
    vstat: np.ndarray  # (n_total,) AT_LB / AT_UB / BASIC
    binv: np.ndarray   # (m, m) dense inverse of the basis matrix
    xb: np.ndarray     # (m,) values of the basic variables
    pivots: int = 0

    def copy(self) -> "BasisState":
        return BasisState(
            basis=self.basis.copy(),
            vstat=self.vstat.copy(),
            binv=self.binv.copy(),
            xb=self.xb.copy(),
            pivots=self.pivots,
        )

    def light_copy(self) -> tuple:
        """Basis description without the inverse (cheap to store)."""
        return self.basis.copy(), self.vstat.copy()


class SimplexEngine:
    """Holds the immutable problem data; states carry the moving parts.

    Bounds are passed per call so branch-and-bound can tighten binaries
    without copying the matrix.
    """

    def __init__(self, a_struct: sp.csr_matrix, c_struct: np.ndarray, rhs: np.ndarray, senses: list):
        m, n = a_struct.shape
        self.m = m
        self.n_struct = n
        self.n_total = n + m
        eye = sp.eye(m, format="csr")
        self.A = sp.hstack([a_struct, eye], format="csr")
        self.A_csc = self.A.tocsc()
        self.AT = self.A.T.tocsr()
        self.rhs = np.asarray(rhs, dtype=float)
        self.c = np.concatenate([np.asarray(c_struct, dtype=float), np.zeros(m)])
        # slack bounds by sense: "<=" -> [0, inf), ">=" -> (-inf, 0], "=" -> [0, 0]
        slack_lb = np.zeros(m)
        slack_ub = np.zeros(m)
        for i, s in enumerate(senses):
            if s == "<=":
                slack_ub[i] = np.inf
            elif s == ">=":
                slack_lb[i] = -np.inf
            elif s != "=":
                raise ValueError(f"unknown sense {s!r}")
        self.slack_lb = slack_lb
        self.slack_ub = slack_ub

    # -- bounds ------------------------------------------------------------

    def full_bounds(self, lb_struct: np.ndarray, ub_struct: np.ndarray):
        lb = np.concatenate([lb_struct, self.slack_lb])
        ub = np.concatenate([ub_struct, self.slack_ub])
        return lb, ub

    # -- state construction -------------------------------------------------

    def crash_state(self, lb: np.ndarray, ub: np.ndarray) -> BasisState:
        """All-slack basis; structurals sit at their cost-minimizing bound."""
        n, m = self.n_struct, self.m
        vstat = np.full(self.n_total, AT_LB, dtype=np.int8)
        take_ub = self.c[:n] < 0
        vstat[:n][take_ub] = AT_UB
        vstat[n:] = BASIC
        basis = np.arange(n, n + m)
        binv = np.eye(m)
        state = BasisState(basis=basis, vstat=vstat, binv=binv, xb=np.zeros(m))
        self.recompute_xb(state, lb, ub)
        return state

    def rebuild_state(self, basis: np.ndarray, vstat: np.ndarray, lb: np.ndarray, ub: np.ndarray) -> BasisState:
        """Recover a full state (inverse included) from a stored basis."""
        bmat = self.A_csc[:, basis].toarray()
        try:
            binv = np.linalg.inv(bmat)
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown("singular basis") from exc
        state = BasisState(basis=basis.copy(), vstat=vstat.copy(), binv=binv, xb=np.zeros(self.m))
        self.recompute_xb(state, lb, ub)
        return state

    def nonbasic_values(self, state: BasisState, lb: np.ndarray, ub: np.ndarray) -> np.ndarray:
        x = np.where(state.vstat == AT_UB, ub, lb)
        x[state.vstat == BASIC] = 0.0
        return x

    def recompute_xb(self, state: BasisState, lb: np.ndarray, ub: np.ndarray) -> None:
        xn = self.nonbasic_values(state, lb, ub)
        state.xb = state.binv @ (self.rhs - self.A @ xn)

    def extract(self, state: BasisState, lb: np.ndarray, ub: np.ndarray) -> np.ndarray:
        x = self.nonbasic_values(state, lb, ub)
        x[state.basis] = state.xb
        return x

    # -- shared pieces -------------------------------------------------------

    def _column(self, state: BasisState, j: int) -> np.ndarray:
        sl = slice(self.A_csc.indptr[j], self.A_csc.indptr[j + 1])
        rows = self.A_csc.indices[sl]
        vals = self.A_csc.data[sl]
        return state.binv[:, rows] @ vals

    def _row(self, state: BasisState, r: int) -> np.ndarray:
        return self.AT @ state.binv[r]

    def _apply_pivot(self, state: BasisState, r: int, q: int, w: np.ndarray) -> None:
        u = w.copy()
        u[r] -= 1.0
        u /= w[r]
        state.binv -= np.outer(u, state.binv[r].copy())
        state.basis[r] = q
        state.vstat[q] = BASIC
        state.pivots += 1

    def residual(self, state: BasisState, lb: np.ndarray, ub: np.ndarray) -> float:
        x = self.extract(state, lb, ub)
        return float(np.max(np.abs(self.A @ x - self.rhs))) if self.m else 0.0

    def _refactorize(self, state: BasisState, lb: np.ndarray, ub: np.ndarray) -> None:
        bmat = self.A_csc[:, state.basis].toarray()
        try:
            state.binv = np.linalg.inv(bmat)
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown("singular basis") from exc
        self.recompute_xb(state, lb, ub)

    # -- primal simplex -------------------------------------------------------

    def primal(
        self,
        state: BasisState,
        lb: np.ndarray,
        ub: np.ndarray,
        dantzig_iters: int,
        max_iters: int,
    ) -> str:
        """Composite two-phase primal simplex. Mutates ``state``."""
        m = self.m
        iters = 0
        refresh_every = 512 if m > 200 else 4096
        since_refresh = 0
        retried_iter = -1
        while True:
            if iters >= max_iters:
                return ITERATION_LIMIT
            lob = lb[state.basis]
            upb = ub[state.basis]
            below = lob - state.xb > FEAS_TOL
            above = state.xb - upb > FEAS_TOL
            phase1 = bool(below.any() or above.any())
            if phase1:
                g = above.astype(float) - below.astype(float)
                y = state.binv.T @ g
                d = -(self.AT @ y)
            else:
                y = state.binv.T @ self.c[state.basis]
                d = self.c - self.AT @ y
            d[state.basis] = 0.0

            movable = ub > lb
            elig = ((state.vstat == AT_LB) & (d < -DUAL_TOL) | (state.vstat == AT_UB) & (d > DUAL_TOL)) & movable
            if not elig.any():
                if phase1:
                    return INFEASIBLE
                return OPTIMAL

            if iters < dantzig_iters:
                scores = np.where(elig, np.abs(d), -1.0)
                q = int(np.argmax(scores))
            else:
                q = int(np.argmax(elig))  # Bland: first eligible index

            t = 1.0 if state.vstat[q] == AT_LB else -1.0
            w = self._column(state, q)
            rate = -t * w

            # Composite ratio test: feasible basics block at the bound they
            # approach; basics below lb block at lb when rising, basics above
            # ub block at ub when falling; basics moving further away from
            # their violated bound never block (their growing violation is
            # already priced into the phase-1 gradient).
            limits = np.full(m, np.inf)
            idx = np.flatnonzero(rate > PIVOT_TOL)
            if idx.size:
                tgt = np.where(below[idx], lob[idx], upb[idx])
                tgt[above[idx]] = np.inf
                limits[idx] = (tgt - state.xb[idx]) / rate[idx]
            idx = np.flatnonzero(rate < -PIVOT_TOL)
            if idx.size:
                tgt = np.where(above[idx], upb[idx], lob[idx])
                tgt[below[idx]] = -np.inf
                limits[idx] = (tgt - state.xb[idx]) / rate[idx]
            limits = np.where(np.isfinite(limits), np.maximum(limits, 0.0), np.inf)
            basics_min = float(limits.min(initial=np.inf))
            self_limit = float(ub[q] - lb[q])

            if not np.isfinite(min(basics_min, self_limit)):
                # Cannot happen on well-posed problems (finite structural
                # bounds); treat as numerical breakdown.
                return ITERATION_LIMIT

            if self_limit <= basics_min + RATIO_TIE:
                # Bound flip: move q to its other bound, no basis change.
                state.xb += rate * self_limit
                state.vstat[q] = AT_UB if state.vstat[q] == AT_LB else AT_LB
            else:
                cand = np.flatnonzero(limits <= basics_min + RATIO_TIE)
                strong = cand[np.abs(w[cand]) >= 1e-7]
                if strong.size:
                    cand = strong
                else:
                    mags = np.abs(w[cand])
                    cand = cand[mags >= mags.max() - RATIO_TIE]
                r = int(cand[np.argmin(state.basis[cand])])
                if abs(rate[r]) < 1e-7 and retried_iter != iters:
                    # Weak pivot: refresh the factorization and retry once.
                    retried_iter = iters
                    self._refactorize(state, lb, ub)
                    continue
                p = state.basis[r]
                step = max(float(limits[r]), 0.0)
                entering_val = (lb[q] if state.vstat[q] == AT_LB else ub[q]) + t * step
                state.xb += rate * step
                # leaving variable lands on the bound it blocked at
                land_lb = (rate[r] < 0 and not above[r]) or (rate[r] > 0 and below[r])
                state.vstat[p] = AT_LB if land_lb else AT_UB
                self._apply_pivot(state, r, q, w)
                state.xb[r] = entering_val
                since_refresh += 1
                if since_refresh >= refresh_every:
                    self._refactorize(state, lb, ub)
                    since_refresh = 0
            iters += 1

    # -- dual simplex ----------------------------------------------------------

    def dual(self, state: BasisState, lb: np.ndarray, ub: np.ndarray, max_iters: int) -> str:
        """Dual simplex from a dual-feasible basis. Mutates ``state``.

        Returns OPTIMAL once the basis is primal feasible, INFEASIBLE when a
        violated basic row proves emptiness, ITERATION_LIMIT otherwise.
        """
        m = self.m

        def fresh_d():
            y = state.binv.T @ self.c[state.basis]
            dd = self.c - self.AT @ y
            dd[state.basis] = 0.0
            return dd

        d = fresh_d()
        iters = 0
        refresh_every = 512 if m > 200 else 4096
        since_refresh = 0
        retried_row = -1
        while True:
            if iters >= max_iters:
                return ITERATION_LIMIT
            lob = lb[state.basis]
            upb = ub[state.basis]
            viol_low = lob - state.xb
            viol_up = state.xb - upb
            viol = np.maximum(viol_low, viol_up)
            worst = float(viol.max(initial=0.0))
            if worst <= FEAS_TOL:
                return OPTIMAL
            cand = np.flatnonzero(viol >= worst - RATIO_TIE)
            r = int(cand[np.argmin(state.basis[cand])])
            below = viol_low[r] >= viol_up[r]

            rho = self._row(state, r)
            movable = ub > lb
            at_lb = (state.vstat == AT_LB) & movable
            at_ub = (state.vstat == AT_UB) & movable
            strong_tol = 1e-7
            if below:
                elig = at_lb & (rho < -strong_tol) | at_ub & (rho > strong_tol)
                if not elig.any():
                    elig = at_lb & (rho < -PIVOT_TOL) | at_ub & (rho > PIVOT_TOL)
            else:
                elig = at_lb & (rho > strong_tol) | at_ub & (rho < -strong_tol)
                if not elig.any():
                    elig = at_lb & (rho > PIVOT_TOL) | at_ub & (rho < -PIVOT_TOL)
            idx = np.flatnonzero(elig)
            if idx.size == 0:
                # Nothing can repair the row.  Refresh the factorization once
                # to rule out drift before declaring the node infeasible.
                if retried_row != r:
                    retried_row = r
                    self._refactorize(state, lb, ub)
                    d = fresh_d()
                    continue
                return INFEASIBLE
            ratios = np.abs(d[idx]) / np.abs(rho[idx])
            best = float(ratios.min())
            tie = idx[ratios <= best + RATIO_TIE]
            strong = tie[np.abs(rho[tie]) >= strong_tol]
            if strong.size:
                tie = strong
            else:
                mags = np.abs(rho[tie])
                tie = tie[mags >= mags.max() - RATIO_TIE]
            q = int(tie.min())

            w = self._column(state, q)
            if abs(w[r]) < 1e-9 or abs(w[r] - rho[q]) > 1e-6 * max(1.0, abs(rho[q])):
                # Column and row views of the pivot disagree: factorization
                # drift.  Refresh and retry this iteration once.
                if retried_row != r:
                    retried_row = r
                    self._refactorize(state, lb, ub)
                    d = fresh_d()
                    continue
                return ITERATION_LIMIT
            retried_row = -1

            t = 1.0 if state.vstat[q] == AT_LB else -1.0
            target = lob[r] if below else upb[r]
            delta = (target - state.xb[r]) / (-t * w[r])
            if delta < 0.0:
                delta = 0.0
            p = state.basis[r]
            entering_val = (lb[q] if state.vstat[q] == AT_LB else ub[q]) + t * delta
            state.xb += (-t) * w * delta
            state.vstat[p] = AT_LB if below else AT_UB
            # dual price update before basis change (w[r] is the pivot)
            d -= (d[q] / w[r]) * rho
            self._apply_pivot(state, r, q, w)
            state.xb[r] = entering_val
            d[q] = 0.0
            since_refresh += 1
            iters += 1
            if since_refresh >= refresh_every:
                self._refactorize(state, lb, ub)
                d = fresh_d()
                since_refresh = 0

    # -- helpers for callers ---------------------------------------------------

    def objective(self, state: BasisState, lb: np.ndarray, ub: np.ndarray) -> float:
        x = self.extract(state, lb, ub)
        return float(self.c @ x)

    def is_dual_feasible(self, state: BasisState, lb: np.ndarray, ub: np.ndarray, tol: float = 1e-7) -> bool:
        y = state.binv.T @ self.c[state.basis]
        d = self.c - self.AT @ y
        d[state.basis] = 0.0
        movable = ub > lb
        bad = ((state.vstat == AT_LB) & (d < -tol) | (state.vstat == AT_UB) & (d > tol)) & movable
        return not bool(bad.any())
