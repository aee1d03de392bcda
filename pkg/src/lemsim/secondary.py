"""Secondary-market clearing: lexicographic DCA scheduling, ex-post budget-balanced
retail tariffs, and bid aggregation toward the primary market.

Sign conventions: all powers are net injections in p.u. (generation positive,
consumption negative). Load-kind commodities carry downward-only flexibility in
consumption, which in injection orientation pins the lower bound at the
baseline (p_min == p0, injection may only rise toward zero).

Clearings for distinct SMOs are independent given their PM setpoints and may
run concurrently; stages within one clearing are strictly sequential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .convexprog import ConvexProgram, solve

# Net injections smaller than this (summed over phases) count as zero for
# commodity classification, guarding the tariff division.
ZERO_INJECTION_TOL = 1e-9

# Tiny L2 pull toward baselines; breaks ties between equally ranked optima so
# repeated clearings are bit-identical.
_TIE_BREAK_WEIGHT = 1e-9


class BidValidationError(ValueError):
    pass


@dataclass
class DcaBid:
    """Flexibility bid of one DER-coordinated asset for one SM interval."""

    dca_id: str
    smo_id: str
    phases: str
    p0: np.ndarray
    q0: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    commitment: float
    beta_p: float
    beta_q: float
    kind_p: str = "load"  # "load" | "generator"
    kind_q: str = "load"

    def __post_init__(self) -> None:
        m = len(self.phases)
        for name in ("p0", "q0", "p_min", "p_max", "q_min", "q_max"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape == ():
                arr = arr.reshape(1)
            if arr.shape != (m,):
                raise BidValidationError(f"bid {self.dca_id!r}: {name} must have {m} entries")
            setattr(self, name, arr)
        if not (0.0 <= self.commitment <= 1.0):
            raise BidValidationError(f"bid {self.dca_id!r}: commitment outside [0, 1]")
        if self.beta_p <= 0 or self.beta_q <= 0:
            raise BidValidationError(f"bid {self.dca_id!r}: beta coefficients must be > 0")
        for kind, lo, mid, hi, label in (
            (self.kind_p, self.p_min, self.p0, self.p_max, "P"),
            (self.kind_q, self.q_min, self.q0, self.q_max, "Q"),
        ):
            if kind not in ("load", "generator"):
                raise BidValidationError(f"bid {self.dca_id!r}: bad kind {kind!r}")
            if np.any(lo > mid + 1e-12) or np.any(mid > hi + 1e-12):
                raise BidValidationError(
                    f"bid {self.dca_id!r}: {label} range does not contain baseline"
                )
            if kind == "load" and np.any(np.abs(lo - mid) > 1e-12):
                raise BidValidationError(
                    f"bid {self.dca_id!r}: load {label} flexibility must be downward-only "
                    f"(lower bound pinned at baseline)"
                )


@dataclass
class PmSetpoint:
    """Setpoints and prices handed down by the most recent PM clearing."""

    smo_id: str
    phases: str
    p_star: np.ndarray
    q_star: np.ndarray
    price_p: np.ndarray  # $ per p.u.-hour, per phase
    price_q: np.ndarray
    timestamp: int  # minutes; the PM clearing time t_hat_p


@dataclass
class SmClearingResult:
    smo_id: str
    timestamp: int  # SM clearing time t_s (minutes)
    pm_timestamp: int  # the referenced PM clearing t_hat_p
    phases: str
    dca_ids: list[str]
    feasible: bool
    infeasibility: str | None = None
    dca_phases: dict[str, str] = field(default_factory=dict)
    p: dict[str, np.ndarray] = field(default_factory=dict)
    q: dict[str, np.ndarray] = field(default_factory=dict)
    dp: dict[str, np.ndarray] = field(default_factory=dict)
    dq: dict[str, np.ndarray] = field(default_factory=dict)
    # Stage optima in canonical orientation (f1/f3 maximize-form, f4 minimize-form,
    # all nonnegative); f2 is the ex-post net cost, filled by tariff computation.
    stage_values: dict[str, float | None] = field(default_factory=dict)
    tariff_p: dict[str, float] = field(default_factory=dict)
    tariff_q: dict[str, float] = field(default_factory=dict)
    cash_flow: dict[str, float] = field(default_factory=dict)

    def net_p(self, dca_id: str) -> float:
        return float(np.sum(self.p[dca_id]))

    def net_q(self, dca_id: str) -> float:
        return float(np.sum(self.q[dca_id]))


@dataclass
class CommoditySets:
    """Per-commodity generator/load index sets, classified by net-injection sign."""

    gen_p: set[str]
    load_p: set[str]
    gen_q: set[str]
    load_q: set[str]


def _stage_f1(bids: list[DcaBid], dp, dq) -> float:
    return sum(b.commitment * (float(np.sum(dp[b.dca_id])) + float(np.sum(dq[b.dca_id]))) for b in bids)


def _stage_f3(bids: list[DcaBid], dp, dq) -> float:
    return sum(float(np.sum(dp[b.dca_id])) + float(np.sum(dq[b.dca_id])) for b in bids)


def _stage_f4(bids: list[DcaBid], p, q) -> float:
    total = 0.0
    for b in bids:
        total += b.beta_p * float(np.sum((p[b.dca_id] - b.p0) ** 2))
        total += b.beta_q * float(np.sum((q[b.dca_id] - b.q0) ** 2))
    return total


def clear_sm_lexicographic(
    bids: list[DcaBid],
    pm_setpoint: PmSetpoint,
    epsilon: float = 0.05,
    feas_tol: float = 1e-7,
    timestamp: int | None = None,
) -> SmClearingResult:
    """Clear one SMO's secondary market by staged convex optimization.

    Three stages in ranking order (the net-cost term is removed in the
    convexified variant; prices are set ex post):

      1. maximize trust-weighted flexibility  sum_j C_j sum_phi (dP_j + dQ_j)
      2. maximize aggregate flexibility       sum_j sum_phi (dP_j + dQ_j)
      3. minimize disutility                  sum_j beta_j sum_phi (dev^2)

    Each stage constrains earlier stage objectives to degrade at most epsilon
    (maximize-form stages keep F >= (1-eps) F*, which also satisfies the
    F <= (1+eps) F* monotonicity bound since stage values are nonnegative).
    Infeasible setpoint splits are reported, naming the violated balance row.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    smo_id = pm_setpoint.smo_id
    phases = pm_setpoint.phases
    for b in bids:
        if b.smo_id != smo_id:
            raise BidValidationError(f"bid {b.dca_id!r} belongs to SMO {b.smo_id!r}, not {smo_id!r}")
        if any(p not in phases for p in b.phases):
            raise BidValidationError(f"bid {b.dca_id!r} has phases outside the SMO's {phases!r}")

    result = SmClearingResult(
        smo_id=smo_id,
        timestamp=pm_setpoint.timestamp if timestamp is None else timestamp,
        pm_timestamp=pm_setpoint.timestamp,
        phases=phases,
        dca_ids=[b.dca_id for b in bids],
        feasible=True,
    )

    # Feasibility pre-check: the setpoint must lie in the Minkowski sum of
    # bid ranges, per phase and commodity.
    for pi, ph in enumerate(phases):
        lo_p = sum(b.p_min[b.phases.index(ph)] for b in bids if ph in b.phases)
        hi_p = sum(b.p_max[b.phases.index(ph)] for b in bids if ph in b.phases)
        lo_q = sum(b.q_min[b.phases.index(ph)] for b in bids if ph in b.phases)
        hi_q = sum(b.q_max[b.phases.index(ph)] for b in bids if ph in b.phases)
        if not (lo_p - feas_tol <= pm_setpoint.p_star[pi] <= hi_p + feas_tol):
            result.feasible = False
            result.infeasibility = (
                f"P balance violated on phase {ph}: setpoint {pm_setpoint.p_star[pi]:.6g} "
                f"outside aggregate range [{lo_p:.6g}, {hi_p:.6g}]"
            )
            return result
        if not (lo_q - feas_tol <= pm_setpoint.q_star[pi] <= hi_q + feas_tol):
            result.feasible = False
            result.infeasibility = (
                f"Q balance violated on phase {ph}: setpoint {pm_setpoint.q_star[pi]:.6g} "
                f"outside aggregate range [{lo_q:.6g}, {hi_q:.6g}]"
            )
            return result

    def build_program() -> tuple[ConvexProgram, dict]:
        prog = ConvexProgram(name=f"sm[{smo_id}]")
        idx: dict[tuple[str, str], np.ndarray] = {}
        for b in bids:
            m = len(b.phases)
            idx[("p", b.dca_id)] = prog.add_variable(f"p[{b.dca_id}]", m, lb=b.p_min, ub=b.p_max)
            idx[("q", b.dca_id)] = prog.add_variable(f"q[{b.dca_id}]", m, lb=b.q_min, ub=b.q_max)
            idx[("dp", b.dca_id)] = prog.add_variable(f"dp[{b.dca_id}]", m, lb=0.0)
            idx[("dq", b.dca_id)] = prog.add_variable(f"dq[{b.dca_id}]", m, lb=0.0)
            # Containment: setpoint +/- radius within the bid range.
            for k in range(m):
                prog.add_inequality(
                    [idx[("p", b.dca_id)][k], idx[("dp", b.dca_id)][k]], [1.0, 1.0],
                    b.p_max[k], tag="contain_p_hi",
                )
                prog.add_inequality(
                    [idx[("p", b.dca_id)][k], idx[("dp", b.dca_id)][k]], [-1.0, 1.0],
                    -b.p_min[k], tag="contain_p_lo",
                )
                prog.add_inequality(
                    [idx[("q", b.dca_id)][k], idx[("dq", b.dca_id)][k]], [1.0, 1.0],
                    b.q_max[k], tag="contain_q_hi",
                )
                prog.add_inequality(
                    [idx[("q", b.dca_id)][k], idx[("dq", b.dca_id)][k]], [-1.0, 1.0],
                    -b.q_min[k], tag="contain_q_lo",
                )
        # Balance rows, one per phase and commodity.
        for pi, ph in enumerate(phases):
            rows_p, rows_q = [], []
            for b in bids:
                if ph in b.phases:
                    k = b.phases.index(ph)
                    rows_p.append(idx[("p", b.dca_id)][k])
                    rows_q.append(idx[("q", b.dca_id)][k])
            if rows_p:
                prog.add_equality(rows_p, np.ones(len(rows_p)), pm_setpoint.p_star[pi], tag="balance_p")
                prog.add_equality(rows_q, np.ones(len(rows_q)), pm_setpoint.q_star[pi], tag="balance_q")
            elif abs(pm_setpoint.p_star[pi]) > feas_tol or abs(pm_setpoint.q_star[pi]) > feas_tol:
                raise BidValidationError(
                    f"SMO {smo_id!r}: nonzero setpoint on phase {ph} with no DCA present"
                )
        # Tie-break regularization toward baselines.
        for b in bids:
            for k in range(len(b.phases)):
                i_p, i_q = idx[("p", b.dca_id)][k], idx[("q", b.dca_id)][k]
                prog.add_quadratic(i_p, i_p, _TIE_BREAK_WEIGHT)
                prog.add_linear(i_p, -2.0 * _TIE_BREAK_WEIGHT * b.p0[k])
                prog.add_quadratic(i_q, i_q, _TIE_BREAK_WEIGHT)
                prog.add_linear(i_q, -2.0 * _TIE_BREAK_WEIGHT * b.q0[k])
                prog.add_quadratic(idx[("dp", b.dca_id)][k], idx[("dp", b.dca_id)][k], _TIE_BREAK_WEIGHT)
                prog.add_quadratic(idx[("dq", b.dca_id)][k], idx[("dq", b.dca_id)][k], _TIE_BREAK_WEIGHT)
        return prog, idx

    def delta_coeffs(prog: ConvexProgram, idx, weights: dict[str, float]):
        cols, coefs = [], []
        for b in bids:
            w = weights[b.dca_id]
            if w == 0.0:
                continue
            cols.extend(idx[("dp", b.dca_id)].tolist())
            coefs.extend([w] * len(b.phases))
            cols.extend(idx[("dq", b.dca_id)].tolist())
            coefs.extend([w] * len(b.phases))
        return np.array(cols, dtype=int), np.array(coefs)

    anchors: list[tuple[str, float]] = []  # (stage, maximize-form anchor F*)

    def run_stage(stage: str):
        prog, idx = build_program()
        if stage == "f1":
            cols, coefs = delta_coeffs(prog, idx, {b.dca_id: b.commitment for b in bids})
            prog.add_linear(cols, -coefs)  # maximize => minimize negative
        elif stage == "f3":
            cols, coefs = delta_coeffs(prog, idx, {b.dca_id: 1.0 for b in bids})
            prog.add_linear(cols, -coefs)
        elif stage == "f4":
            for b in bids:
                for k in range(len(b.phases)):
                    i_p, i_q = idx[("p", b.dca_id)][k], idx[("q", b.dca_id)][k]
                    prog.add_quadratic(i_p, i_p, b.beta_p)
                    prog.add_linear(i_p, -2.0 * b.beta_p * b.p0[k])
                    prog.add_constant(b.beta_p * b.p0[k] ** 2)
                    prog.add_quadratic(i_q, i_q, b.beta_q)
                    prog.add_linear(i_q, -2.0 * b.beta_q * b.q0[k])
                    prog.add_constant(b.beta_q * b.q0[k] ** 2)
        # Degradation constraints on all earlier stages (maximize-form:
        # allow at most an epsilon drop below the recorded optimum).
        for prev_stage, f_star in anchors:
            weights = (
                {b.dca_id: b.commitment for b in bids}
                if prev_stage == "f1"
                else {b.dca_id: 1.0 for b in bids}
            )
            cols, coefs = delta_coeffs(prog, idx, weights)
            if len(cols):
                prog.add_inequality(cols, -coefs, -(1.0 - epsilon) * f_star, tag=f"degrade_{prev_stage}")
        return solve(prog)

    for stage in ("f1", "f3", "f4"):
        sol = run_stage(stage)
        if sol.status != "optimal":
            result.feasible = False
            result.infeasibility = f"stage {stage} solve ended with status {sol.status}"
            return result
        if stage == "f1":
            dp = {b.dca_id: sol.value(f"dp[{b.dca_id}]") for b in bids}
            dq = {b.dca_id: sol.value(f"dq[{b.dca_id}]") for b in bids}
            anchors.append(("f1", _stage_f1(bids, dp, dq)))
        elif stage == "f3":
            dp = {b.dca_id: sol.value(f"dp[{b.dca_id}]") for b in bids}
            dq = {b.dca_id: sol.value(f"dq[{b.dca_id}]") for b in bids}
            anchors.append(("f3", _stage_f3(bids, dp, dq)))
        final = sol

    for b in bids:
        result.dca_phases[b.dca_id] = b.phases
        p = final.value(f"p[{b.dca_id}]").copy()
        q = final.value(f"q[{b.dca_id}]").copy()
        dp = final.value(f"dp[{b.dca_id}]").copy()
        dq = final.value(f"dq[{b.dca_id}]").copy()
        # Numerical polish: snap setpoints into the bid range, then shrink the
        # radii so containment holds exactly and delta >= 0.
        p = np.minimum(np.maximum(p, b.p_min), b.p_max)
        q = np.minimum(np.maximum(q, b.q_min), b.q_max)
        dp = np.maximum(0.0, np.minimum(dp, np.minimum(b.p_max - p, p - b.p_min)))
        dq = np.maximum(0.0, np.minimum(dq, np.minimum(b.q_max - q, q - b.q_min)))
        result.p[b.dca_id] = p
        result.q[b.dca_id] = q
        result.dp[b.dca_id] = dp
        result.dq[b.dca_id] = dq

    result.stage_values = {
        "f1": anchors[0][1],
        "f2": None,
        "f3": anchors[1][1],
        "f4": _stage_f4(bids, result.p, result.q),
    }
    return result


def classify_commodity_sets(result: SmClearingResult) -> CommoditySets:
    """Split DCAs into per-commodity generator/load sets by net-injection sign.

    Net injections within ZERO_INJECTION_TOL of zero belong to neither set.
    """
    sets = CommoditySets(set(), set(), set(), set())
    for dca_id in result.dca_ids:
        net_p = result.net_p(dca_id)
        net_q = result.net_q(dca_id)
        if net_p > ZERO_INJECTION_TOL:
            sets.gen_p.add(dca_id)
        elif net_p < -ZERO_INJECTION_TOL:
            sets.load_p.add(dca_id)
        if net_q > ZERO_INJECTION_TOL:
            sets.gen_q.add(dca_id)
        elif net_q < -ZERO_INJECTION_TOL:
            sets.load_q.add(dca_id)
    return sets


def compute_price_multipliers(sets: CommoditySets) -> dict[str, dict[str, float]]:
    """Budget-balancing price multipliers y per DCA and commodity.

    Generators: 0 if no generators, 1/(2|S_G|) if no loads, 1 otherwise.
    Loads: 0 if no loads, 1/(2|S_L|) if no generators,
    (1 + 2|S_G|)/(2|S_L|) otherwise. DCAs in neither set get 0.
    """
    out: dict[str, dict[str, float]] = {"p": {}, "q": {}}
    for comm, gens, loads in (("p", sets.gen_p, sets.load_p), ("q", sets.gen_q, sets.load_q)):
        n_g, n_l = len(gens), len(loads)
        for j in gens:
            if n_g == 0:
                out[comm][j] = 0.0
            elif n_l == 0:
                out[comm][j] = 1.0 / (2.0 * n_g)
            else:
                out[comm][j] = 1.0
        for j in loads:
            if n_l == 0:
                out[comm][j] = 0.0
            elif n_g == 0:
                out[comm][j] = 1.0 / (2.0 * n_l)
            else:
                out[comm][j] = (1.0 + 2.0 * n_g) / (2.0 * n_l)
    return out


@dataclass
class TariffLedger:
    r_pm: float  # $, net SMO revenue from the most recent PM clearing
    multipliers: dict[str, dict[str, float]]
    tariff_p: dict[str, float]  # $/kWh
    tariff_q: dict[str, float]  # $/kVARh
    cash_flow_p: dict[str, float]  # $, positive = SMO pays the DCA
    cash_flow_q: dict[str, float]

    def net_dca_to_smo(self) -> float:
        """Total cash flowing DCA -> SMO (loads pay, generators receive)."""
        return -sum(self.cash_flow_p.values()) - sum(self.cash_flow_q.values())


def compute_retail_tariffs(
    result: SmClearingResult,
    sets: CommoditySets,
    pm_setpoint: PmSetpoint,
    dt_s_hours: float,
    dt_p_hours: float,
    s_base: float,
) -> TariffLedger:
    """Ex-post budget-balanced retail tariffs and the per-DCA cash-flow ledger.

    mu_j = y_j |R_PM| / (|net injection in kW| * dt_s), identical across phases
    of a DCA; zero net injection in a commodity yields a zero tariff and zero
    cash flow for it. With all four commodity sets non-empty the ledger nets to
    |R_PM| flowing DCA -> SMO.
    """
    if dt_s_hours <= 0 or dt_p_hours <= 0:
        raise ValueError("time steps must be positive")
    s_base_kw = s_base / 1e3
    r_pm = float(
        np.sum(pm_setpoint.price_p * pm_setpoint.p_star)
        + np.sum(pm_setpoint.price_q * pm_setpoint.q_star)
    ) * dt_p_hours
    mult = compute_price_multipliers(sets)

    tariff_p: dict[str, float] = {}
    tariff_q: dict[str, float] = {}
    flow_p: dict[str, float] = {}
    flow_q: dict[str, float] = {}
    for dca_id in result.dca_ids:
        net_p_kw = result.net_p(dca_id) * s_base_kw
        net_q_kvar = result.net_q(dca_id) * s_base_kw
        y_p = mult["p"].get(dca_id, 0.0)
        y_q = mult["q"].get(dca_id, 0.0)
        if abs(net_p_kw) <= ZERO_INJECTION_TOL * s_base_kw or y_p == 0.0:
            tariff_p[dca_id] = 0.0
            flow_p[dca_id] = 0.0
        else:
            tariff_p[dca_id] = y_p * abs(r_pm) / (abs(net_p_kw) * dt_s_hours)
            flow_p[dca_id] = tariff_p[dca_id] * net_p_kw * dt_s_hours
        if abs(net_q_kvar) <= ZERO_INJECTION_TOL * s_base_kw or y_q == 0.0:
            tariff_q[dca_id] = 0.0
            flow_q[dca_id] = 0.0
        else:
            tariff_q[dca_id] = y_q * abs(r_pm) / (abs(net_q_kvar) * dt_s_hours)
            flow_q[dca_id] = tariff_q[dca_id] * net_q_kvar * dt_s_hours

    ledger = TariffLedger(
        r_pm=r_pm,
        multipliers=mult,
        tariff_p=tariff_p,
        tariff_q=tariff_q,
        cash_flow_p=flow_p,
        cash_flow_q=flow_q,
    )
    result.tariff_p = tariff_p
    result.tariff_q = tariff_q
    result.cash_flow = {
        j: flow_p[j] + flow_q[j] for j in result.dca_ids
    }
    # Ex-post net cost (the removed optimization term, recorded for reporting).
    result.stage_values["f2"] = sum(result.cash_flow.values())
    return ledger


def aggregate_smo_bid_ranges(
    results: list[SmClearingResult],
) -> tuple[SmClearingResult, dict[str, np.ndarray]]:
    """Aggregate the most recent SM clearing into per-phase baseline and range.

    Returns (latest_result, arrays) with arrays p0/q0 (sum of setpoints) and
    p_min/p_max/q_min/q_max (setpoints -/+ radii, summed per SMO phase).
    """
    if not results:
        raise ValueError("at least one SM clearing is required for aggregation")
    latest = max(results, key=lambda r: r.timestamp)
    phases = latest.phases
    m = len(phases)
    p0 = np.zeros(m)
    q0 = np.zeros(m)
    dp_sum = np.zeros(m)
    dq_sum = np.zeros(m)
    for dca_id in latest.dca_ids:
        dca_ph = latest.dca_phases[dca_id]
        for k, ph in enumerate(dca_ph):
            pi = phases.index(ph)
            p0[pi] += latest.p[dca_id][k]
            q0[pi] += latest.q[dca_id][k]
            dp_sum[pi] += latest.dp[dca_id][k]
            dq_sum[pi] += latest.dq[dca_id][k]
    arrays = {
        "p0": p0,
        "q0": q0,
        "p_min": p0 - dp_sum,
        "p_max": p0 + dp_sum,
        "q_min": q0 - dq_sum,
        "q_max": q0 + dq_sum,
    }
    return latest, arrays


# ---------------------------------------------------------------------------
# Brute-force lexicographic clearing on a grid (tiny single-phase instances).
# Doubles as the independent oracle for the convex path and as the optional
# literal-f1 mode, where stage 1 scores C * squared deviation directly.
# ---------------------------------------------------------------------------


def lexicographic_grid_search(
    bids: list[DcaBid],
    pm_setpoint: PmSetpoint,
    epsilon: float = 0.05,
    step: float = 0.01,
    stage1: str = "surrogate",
) -> dict:
    """Exhaustive staged search over a step-resolution grid.

    Single-phase bids only; the last DCA's setpoint is implied by the balance
    row so balance holds exactly on every grid point. Commodities with zero
    aggregate width are held at their (implied) setpoints to keep the grid
    small. Returns stage values and one optimal point.
    """
    if any(len(b.phases) != 1 for b in bids):
        raise ValueError("grid search supports single-phase bids only")
    if stage1 not in ("surrogate", "literal"):
        raise ValueError("stage1 must be 'surrogate' or 'literal'")
    n = len(bids)
    if n == 0:
        raise ValueError("no bids")

    def axis(lo: float, hi: float) -> np.ndarray:
        k = int(round((hi - lo) / step))
        if abs(lo + k * step - hi) > 1e-9:
            k = int(math.floor((hi - lo) / step + 1e-9))
        return lo + step * np.arange(k + 1)

    def commodity_grids(lo, hi, target):
        """Mesh of setpoints (n axes, last implied) and radii (n axes)."""
        set_axes = [axis(lo[j], hi[j]) for j in range(n - 1)]
        rad_axes = [axis(0.0, hi[j] - lo[j]) for j in range(n)]
        mesh = np.meshgrid(*set_axes, *rad_axes, indexing="ij") if (set_axes or rad_axes) else []
        if not mesh:
            return None
        setp = list(mesh[: n - 1])
        rads = list(mesh[n - 1 :])
        last = np.full_like(rads[0], float(target))
        for s in setp:
            last = last - s
        setp.append(last)
        ok = np.ones_like(rads[0], dtype=bool)
        for j in range(n):
            ok &= setp[j] >= lo[j] - 1e-9
            ok &= setp[j] <= hi[j] + 1e-9
            ok &= setp[j] - rads[j] >= lo[j] - 1e-9
            ok &= setp[j] + rads[j] <= hi[j] + 1e-9
        return setp, rads, ok

    p_lo = np.array([b.p_min[0] for b in bids])
    p_hi = np.array([b.p_max[0] for b in bids])
    q_lo = np.array([b.q_min[0] for b in bids])
    q_hi = np.array([b.q_max[0] for b in bids])
    p_target = float(pm_setpoint.p_star[0])
    q_target = float(pm_setpoint.q_star[0])

    p_degenerate = np.allclose(p_hi - p_lo, 0.0)
    q_degenerate = np.allclose(q_hi - q_lo, 0.0)

    if p_degenerate and q_degenerate:
        point = {
            "p": p_lo.copy(), "q": q_lo.copy(),
            "dp": np.zeros(n), "dq": np.zeros(n),
        }
        f4 = sum(
            b.beta_p * (point["p"][j] - b.p0[0]) ** 2 + b.beta_q * (point["q"][j] - b.q0[0]) ** 2
            for j, b in enumerate(bids)
        )
        return {"f1": 0.0, "f3": 0.0, "f4": f4, "point": point}

    # Build joint feasible enumeration: treat P and Q grids jointly only when
    # both are active (sizes stay tiny for <=3 DCAs by construction).
    grids = {}
    if not p_degenerate:
        grids["p"] = commodity_grids(p_lo, p_hi, p_target)
    if not q_degenerate:
        grids["q"] = commodity_grids(q_lo, q_hi, q_target)

    def flatten(g):
        setp, rads, ok = g
        cols = [s.ravel() for s in setp] + [r.ravel() for r in rads]
        mask = ok.ravel()
        return [c[mask] for c in cols]

    c_vec = np.array([b.commitment for b in bids])
    bp = np.array([b.beta_p for b in bids])
    bq = np.array([b.beta_q for b in bids])
    p0 = np.array([b.p0[0] for b in bids])
    q0 = np.array([b.q0[0] for b in bids])

    if "p" in grids and "q" in grids:
        pc = flatten(grids["p"])
        qc = flatten(grids["q"])
        np_pts, nq_pts = len(pc[0]), len(qc[0])
        ip = np.repeat(np.arange(np_pts), nq_pts)
        iq = np.tile(np.arange(nq_pts), np_pts)
        p_set = [pc[j][ip] for j in range(n)]
        p_rad = [pc[n + j][ip] for j in range(n)]
        q_set = [qc[j][iq] for j in range(n)]
        q_rad = [qc[n + j][iq] for j in range(n)]
    elif "p" in grids:
        pc = flatten(grids["p"])
        p_set = [pc[j] for j in range(n)]
        p_rad = [pc[n + j] for j in range(n)]
        q_set = [np.full_like(p_set[0], q_lo[j]) for j in range(n)]
        q_rad = [np.zeros_like(p_set[0]) for _ in range(n)]
        if abs(float(np.sum(q_lo)) - q_target) > 1e-7:
            raise ValueError("degenerate Q bids cannot meet the Q setpoint")
    else:
        qc = flatten(grids["q"])
        q_set = [qc[j] for j in range(n)]
        q_rad = [qc[n + j] for j in range(n)]
        p_set = [np.full_like(q_set[0], p_lo[j]) for j in range(n)]
        p_rad = [np.zeros_like(q_set[0]) for _ in range(n)]
        if abs(float(np.sum(p_lo)) - p_target) > 1e-7:
            raise ValueError("degenerate P bids cannot meet the P setpoint")

    if len(p_set[0]) == 0:
        raise ValueError("grid search found no feasible point")

    total_rad = sum(p_rad) + sum(q_rad)
    if stage1 == "surrogate":
        f1_vals = sum(c_vec[j] * (p_rad[j] + q_rad[j]) for j in range(n))
    else:
        f1_vals = sum(
            c_vec[j] * ((p_set[j] - p0[j]) ** 2 + (q_set[j] - q0[j]) ** 2) for j in range(n)
        )
    f3_vals = total_rad
    f4_vals = sum(
        bp[j] * (p_set[j] - p0[j]) ** 2 + bq[j] * (q_set[j] - q0[j]) ** 2 for j in range(n)
    )

    f1_star = float(np.max(f1_vals))
    keep = f1_vals >= (1.0 - epsilon) * f1_star - 1e-12
    f3_star = float(np.max(f3_vals[keep]))
    keep &= f3_vals >= (1.0 - epsilon) * f3_star - 1e-12
    cand = np.where(keep)[0]
    best = cand[np.argmin(f4_vals[cand])]
    f4_star = float(f4_vals[best])

    point = {
        "p": np.array([p_set[j][best] for j in range(n)]),
        "q": np.array([q_set[j][best] for j in range(n)]),
        "dp": np.array([p_rad[j][best] for j in range(n)]),
        "dq": np.array([q_rad[j][best] for j in range(n)]),
    }
    return {"f1": f1_star, "f3": f3_star, "f4": f4_star, "point": point}
