"""Convex-quadratic program container with tagged constraints and dual extraction.

Problems are minimize 0.5 x'Hx + q'x + const subject to linear equalities and
<= inequalities, solved with Clarabel. The dual sign convention is fixed: for
minimize f s.t. g = 0, stationarity reads grad f + J' lambda = 0, and
inequality duals are nonnegative for g <= h. All downstream pricing depends on
this convention; test_convexprog pins it with canary problems.

Programs are value objects and solving is a pure function; concurrent solves
share no mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

import clarabel

_INF = math.inf


class ProgramError(ValueError):
    """Raised for malformed programs or misuse of results."""


class ConvexProgram:
    """Incrementally built LP/QP with named variables and tagged rows.

    Variables may carry box bounds; exactly-degenerate boxes (lb == ub) are
    emitted as equality rows tagged ``fix[<name>]`` so the interior-point
    backend never sees a zero-width inequality pair.
    """

    def __init__(self, name: str = "") -> None:
        self.name = name
        self.nvar = 0
        self._var_slices: dict[str, slice] = {}
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._hess: dict[tuple[int, int], float] = {}
        self._lin: dict[int, float] = {}
        self._const = 0.0
        self._eq: list[tuple[np.ndarray, np.ndarray, float, str]] = []
        self._ineq: list[tuple[np.ndarray, np.ndarray, float, str]] = []

    # ---- construction -----------------------------------------------------

    def add_variable(self, name: str, size: int = 1, lb=-_INF, ub=_INF) -> np.ndarray:
        if name in self._var_slices:
            raise ProgramError(f"duplicate variable {name!r}")
        start = self.nvar
        self.nvar += size
        self._var_slices[name] = slice(start, self.nvar)
        lb_arr = np.broadcast_to(np.asarray(lb, dtype=float), (size,))
        ub_arr = np.broadcast_to(np.asarray(ub, dtype=float), (size,))
        if np.any(lb_arr > ub_arr):
            raise ProgramError(f"variable {name!r}: lb > ub")
        self._lb.extend(lb_arr.tolist())
        self._ub.extend(ub_arr.tolist())
        return np.arange(start, self.nvar)

    def indices(self, name: str) -> np.ndarray:
        s = self._var_slices[name]
        return np.arange(s.start, s.stop)

    def add_quadratic(self, i: int, j: int, coeff: float) -> None:
        """Add the objective term coeff * x_i * x_j."""
        if coeff == 0.0:
            return
        i, j = int(i), int(j)
        if i == j:
            self._hess[(i, i)] = self._hess.get((i, i), 0.0) + 2.0 * coeff
        else:
            self._hess[(i, j)] = self._hess.get((i, j), 0.0) + coeff
            self._hess[(j, i)] = self._hess.get((j, i), 0.0) + coeff

    def add_quadratic_form(self, idx: np.ndarray, h: np.ndarray, weight: float = 1.0) -> None:
        """Add weight * x[idx]' h x[idx] for a symmetric matrix h."""
        idx = np.asarray(idx, dtype=int)
        m = len(idx)
        for a in range(m):
            for b in range(a, m):
                c = h[a, b] if a == b else h[a, b] + h[b, a]
                if c != 0.0:
                    self.add_quadratic(idx[a], idx[b], weight * float(c))

    def add_linear(self, idx, coeff) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        coeff = np.broadcast_to(np.asarray(coeff, dtype=float), idx.shape)
        for i, c in zip(idx, coeff):
            if c != 0.0:
                self._lin[int(i)] = self._lin.get(int(i), 0.0) + float(c)

    def add_constant(self, value: float) -> None:
        self._const += float(value)

    def add_equality(self, idx, coeff, rhs: float, tag: str) -> None:
        """Row sum(coeff * x[idx]) = rhs, dual keyed by tag."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        coeff = np.broadcast_to(np.asarray(coeff, dtype=float), idx.shape).astype(float)
        self._eq.append((idx.copy(), coeff.copy(), float(rhs), tag))

    def add_inequality(self, idx, coeff, rhs: float, tag: str = "ineq") -> None:
        """Row sum(coeff * x[idx]) <= rhs."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        coeff = np.broadcast_to(np.asarray(coeff, dtype=float), idx.shape).astype(float)
        self._ineq.append((idx.copy(), coeff.copy(), float(rhs), tag))

    # ---- assembly ----------------------------------------------------------

    def _bound_rows(self) -> tuple[list, list]:
        """Finite box bounds as rows: degenerate boxes as equalities, rest as ineqs."""
        eq_rows, ineq_rows = [], []
        names = sorted(self._var_slices, key=lambda n: self._var_slices[n].start)
        for name in names:
            s = self._var_slices[name]
            for off, k in enumerate(range(s.start, s.stop)):
                lb, ub = self._lb[k], self._ub[k]
                one = np.array([k]), np.array([1.0])
                if lb == ub:
                    eq_rows.append((one[0], one[1], lb, f"fix[{name}]"))
                else:
                    if ub < _INF:
                        ineq_rows.append((one[0], one[1], ub, f"ub[{name}]"))
                    if lb > -_INF:
                        ineq_rows.append((one[0], np.array([-1.0]), -lb, f"lb[{name}]"))
        return eq_rows, ineq_rows

    def matrices(self):
        """Assemble (H, q, A_eq, b_eq, eq_tags, A_in, b_in, in_tags)."""
        n = self.nvar
        if self._hess:
            items = sorted(self._hess.items())
            rows = [ij[0] for ij, _ in items]
            cols = [ij[1] for ij, _ in items]
            vals = [v for _, v in items]
            h = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
        else:
            h = sp.csc_matrix((n, n))
        q = np.zeros(n)
        for i, c in sorted(self._lin.items()):
            q[i] = c

        fix_rows, bound_rows = self._bound_rows()
        eq_all = self._eq + fix_rows
        in_all = self._ineq + bound_rows

        def stack(rows):
            if not rows:
                return sp.csc_matrix((0, n)), np.zeros(0), []
            data, ri, ci = [], [], []
            rhs, tags = [], []
            for r, (idx, coeff, b, tag) in enumerate(rows):
                ri.extend([r] * len(idx))
                ci.extend(idx.tolist())
                data.extend(coeff.tolist())
                rhs.append(b)
                tags.append(tag)
            a = sp.csc_matrix((data, (ri, ci)), shape=(len(rows), n))
            return a, np.array(rhs), tags

        a_eq, b_eq, eq_tags = stack(eq_all)
        a_in, b_in, in_tags = stack(in_all)
        return h, q, a_eq, b_eq, eq_tags, a_in, b_in, in_tags

    def objective_value(self, x: np.ndarray) -> float:
        h, q, *_ = self.matrices()
        return float(0.5 * x @ (h @ x) + q @ x + self._const)


@dataclass
class KktReport:
    stationarity: float
    primal_eq: float
    primal_ineq: float
    dual_feasibility: float
    complementarity: float
    duality_gap: float

    def max_residual(self) -> float:
        return max(
            self.stationarity,
            self.primal_eq,
            self.primal_ineq,
            self.dual_feasibility,
            self.complementarity,
        )


@dataclass
class SolveResult:
    """Outcome of one solve. Infeasible/unbounded are statuses, not exceptions."""

    status: str  # "optimal" | "infeasible" | "unbounded" | "numerical-failure"
    objective: float | None = None
    dual_objective: float | None = None
    x: np.ndarray | None = None
    values: dict[str, np.ndarray] = field(default_factory=dict)
    eq_duals: dict[str, np.ndarray] = field(default_factory=dict)
    ineq_duals: dict[str, np.ndarray] = field(default_factory=dict)
    eq_dual_vec: np.ndarray | None = None
    ineq_dual_vec: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def value(self, name: str) -> np.ndarray:
        return self.values[name]


_STATUS_OPTIMAL = {"Solved"}
_STATUS_INFEASIBLE = {"PrimalInfeasible", "AlmostPrimalInfeasible"}
_STATUS_UNBOUNDED = {"DualInfeasible", "AlmostDualInfeasible"}

# Solves recorded here when auditing is enabled (see solve_audit).
_AUDIT_SINK: list | None = None


class solve_audit:
    """Context manager collecting (program, result) pairs for KKT health checks."""

    def __init__(self) -> None:
        self.records: list[tuple[ConvexProgram, SolveResult]] = []

    def __enter__(self) -> "solve_audit":
        global _AUDIT_SINK
        self._prev = _AUDIT_SINK
        _AUDIT_SINK = self.records
        return self

    def __exit__(self, *exc) -> None:
        global _AUDIT_SINK
        _AUDIT_SINK = self._prev


def _run_clarabel(h, q, a, b, cones, tol_feas, tol_gap, max_iter):
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_feas = tol_feas
    settings.tol_gap_abs = tol_gap
    settings.tol_gap_rel = tol_gap
    settings.max_iter = max_iter
    solver = clarabel.DefaultSolver(sp.triu(h).tocsc(), q, a, b, cones, settings)
    return solver.solve()


def solve(
    prog: ConvexProgram,
    feas_tol: float = 1e-8,
    gap_tol: float = 1e-8,
    max_iter: int = 200,
) -> SolveResult:
    """Solve the program and extract primal/dual values.

    The backend is run at tolerances two decades tighter than requested; if it
    only reaches reduced accuracy, the result is accepted as optimal when our
    own KKT residuals pass (feas_tol, 1e-6), otherwise reported as
    numerical-failure with residual diagnostics.
    """
    h, q, a_eq, b_eq, eq_tags, a_in, b_in, in_tags = prog.matrices()
    m_eq, m_in = a_eq.shape[0], a_in.shape[0]
    a = sp.vstack([a_eq, a_in]).tocsc() if (m_eq or m_in) else sp.csc_matrix((0, prog.nvar))
    b = np.concatenate([b_eq, b_in])
    cones = []
    if m_eq:
        cones.append(clarabel.ZeroConeT(m_eq))
    if m_in:
        cones.append(clarabel.NonnegativeConeT(m_in))

    tight_feas = max(feas_tol * 1e-2, 1e-12)
    tight_gap = max(gap_tol * 1e-2, 1e-12)
    sol = _run_clarabel(h, q, a, b, cones, tight_feas, tight_gap, max_iter)
    status_name = str(sol.status)
    if status_name not in (_STATUS_OPTIMAL | _STATUS_INFEASIBLE | _STATUS_UNBOUNDED):
        # Retry at the caller's requested accuracy before giving up.
        sol = _run_clarabel(h, q, a, b, cones, feas_tol, gap_tol, max_iter)
        status_name = str(sol.status)

    diagnostics = {
        "solver_status": status_name,
        "iterations": sol.iterations,
        "r_prim": sol.r_prim,
        "r_dual": sol.r_dual,
    }

    if status_name in _STATUS_INFEASIBLE:
        return SolveResult(status="infeasible", diagnostics=diagnostics)
    if status_name in _STATUS_UNBOUNDED:
        return SolveResult(status="unbounded", diagnostics=diagnostics)

    x = np.asarray(sol.x, dtype=float)
    z = np.asarray(sol.z, dtype=float)
    lam_eq, lam_in = z[:m_eq], z[m_eq:]
    result = SolveResult(
        status="optimal",
        objective=float(0.5 * x @ (h @ x) + q @ x + prog._const),
        dual_objective=float(sol.obj_val_dual) + prog._const,
        x=x,
        values={name: x[s] for name, s in prog._var_slices.items()},
        eq_duals=_group_by_tag(eq_tags, lam_eq),
        ineq_duals=_group_by_tag(in_tags, lam_in),
        eq_dual_vec=lam_eq,
        ineq_dual_vec=lam_in,
        diagnostics=diagnostics,
    )

    if status_name not in _STATUS_OPTIMAL:
        # Reduced-accuracy exit: accept only if the KKT system checks out.
        report = kkt_residuals(prog, result)
        diagnostics["kkt_max_residual"] = report.max_residual()
        if report.max_residual() > max(feas_tol, 1e-6):
            return SolveResult(status="numerical-failure", diagnostics=diagnostics)

    if _AUDIT_SINK is not None:
        _AUDIT_SINK.append((prog, result))
    return result


def _group_by_tag(tags: list[str], duals: np.ndarray) -> dict[str, np.ndarray]:
    grouped: dict[str, list[float]] = {}
    for tag, val in zip(tags, duals):
        grouped.setdefault(tag, []).append(float(val))
    return {tag: np.array(vals) for tag, vals in grouped.items()}


def kkt_residuals(prog: ConvexProgram, result: SolveResult) -> KktReport:
    """Max KKT residuals of an optimal primal/dual pair under our sign convention.

    Rejects non-optimal results: residuals are only meaningful at optimality.
    """
    if result.status != "optimal":
        raise ProgramError(f"kkt_residuals requires an optimal result, got {result.status!r}")
    h, q, a_eq, b_eq, _, a_in, b_in, _ = prog.matrices()
    x = result.x
    lam = result.eq_dual_vec
    mu = result.ineq_dual_vec

    grad = h @ x + q
    if a_eq.shape[0]:
        grad = grad + a_eq.T @ lam
    if a_in.shape[0]:
        grad = grad + a_in.T @ mu
    stationarity = float(np.max(np.abs(grad))) if len(grad) else 0.0

    primal_eq = float(np.max(np.abs(a_eq @ x - b_eq))) if a_eq.shape[0] else 0.0
    slack = b_in - a_in @ x if a_in.shape[0] else np.zeros(0)
    primal_ineq = float(np.max(np.maximum(-slack, 0.0))) if len(slack) else 0.0
    dual_feas = float(np.max(np.maximum(-mu, 0.0))) if len(mu) else 0.0
    comp = float(np.max(np.abs(mu * slack))) if len(mu) else 0.0

    gap = abs(result.objective - result.dual_objective)
    return KktReport(
        stationarity=stationarity,
        primal_eq=primal_eq,
        primal_ineq=primal_ineq,
        dual_feasibility=dual_feas,
        complementarity=comp,
        duality_gap=gap,
    )
