"""Primary-market clearing: bound preprocessing, McCormick-relaxed current-injection
OPF, dLMP extraction from equality duals, relaxation-gap audit, and equivalent rates.

Internally all powers/voltages/currents are p.u. and prices are $ per p.u.-hour;
`per_kwh_to_internal` / `internal_to_per_kwh` are the single conversion points
(s_base fixes the scaling), so pricing stays consistent across modules.

Assembly and solving are pure functions of their inputs; dLMP extraction and
gap audits are read-only post-processing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .convexprog import ConvexProgram, SolveResult, solve
from .network import ThreePhaseNetwork, branch_currents


class BoundsInfeasibleError(ValueError):
    """Preprocessing produced an empty box; carries the offending node-phase."""

    def __init__(self, message: str, node: tuple[str, str] | None = None) -> None:
        super().__init__(message)
        self.node = node


class PmInfeasibleError(RuntimeError):
    """Relaxed CI-OPF infeasible; carries the preprocessing bounds for diagnosis."""

    def __init__(self, message: str, bounds: "VarBounds | None" = None) -> None:
        super().__init__(message)
        self.bounds = bounds


class PmSolveError(RuntimeError):
    pass


def per_kwh_to_internal(price_per_kwh: float, s_base: float) -> float:
    """$/kWh -> $ per p.u.-hour on s_base."""
    return price_per_kwh * (s_base / 1e3)


def internal_to_per_kwh(value: float, s_base: float) -> float:
    """$ per p.u.-hour -> $/kWh."""
    return value / (s_base / 1e3)


@dataclass
class SmoBid:
    """Aggregated bid of one SMO at a primary-feeder bus."""

    smo_id: str
    bus_id: str
    phases: str
    p0: np.ndarray
    q0: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    alpha_p: float
    alpha_q: float
    beta_p: float
    beta_q: float
    p_load0: np.ndarray | None = None  # consumption-positive load baseline
    q_load0: np.ndarray | None = None

    def __post_init__(self) -> None:
        m = len(self.phases)
        for name in ("p0", "q0", "p_min", "p_max", "q_min", "q_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(m))
        if self.p_load0 is None:
            self.p_load0 = np.zeros(m)
        if self.q_load0 is None:
            self.q_load0 = np.zeros(m)
        self.p_load0 = np.asarray(self.p_load0, dtype=float).reshape(m)
        self.q_load0 = np.asarray(self.q_load0, dtype=float).reshape(m)
        if self.alpha_p < 0 or self.alpha_q < 0 or self.beta_p < 0 or self.beta_q < 0:
            raise ValueError(f"SMO bid {self.smo_id!r}: cost coefficients must be >= 0")
        if (
            np.any(self.p_min > self.p0 + 1e-9)
            or np.any(self.p0 > self.p_max + 1e-9)
            or np.any(self.q_min > self.q0 + 1e-9)
            or np.any(self.q0 > self.q_max + 1e-9)
        ):
            raise ValueError(f"SMO bid {self.smo_id!r}: ranges must contain baselines")


@dataclass
class VarBounds:
    """Per node-phase rectangular boxes for V and I (p.u.)."""

    vr_lo: np.ndarray
    vr_hi: np.ndarray
    vi_lo: np.ndarray
    vi_hi: np.ndarray
    ir_lo: np.ndarray
    ir_hi: np.ndarray
    ii_lo: np.ndarray
    ii_hi: np.ndarray
    v_limits: tuple[float, float] = (0.95, 1.05)
    theta_window_deg: float = 15.0


def _sector_hull(r_lo: float, r_hi: float, ang_lo: float, ang_hi: float):
    """Axis-aligned hull of {r e^{j t}: r in [r_lo, r_hi], t in [ang_lo, ang_hi]}."""
    angles = [ang_lo, ang_hi]
    k_min = math.ceil(ang_lo / (math.pi / 2) - 1e-12)
    k_max = math.floor(ang_hi / (math.pi / 2) + 1e-12)
    for k in range(k_min, k_max + 1):
        angles.append(k * math.pi / 2)
    xs, ys = [], []
    for t in angles:
        for r in (r_lo, r_hi):
            xs.append(r * math.cos(t))
            ys.append(r * math.sin(t))
    return min(xs), max(xs), min(ys), max(ys)


def _interval_matvec(g: np.ndarray, b: np.ndarray, vr_lo, vr_hi, vi_lo, vi_hi):
    """Interval bounds of I = YV over the V boxes (Y = G + jB)."""

    def scaled(coef: np.ndarray, lo: np.ndarray, hi: np.ndarray):
        lo_c = np.where(coef >= 0, coef * lo, coef * hi)
        hi_c = np.where(coef >= 0, coef * hi, coef * lo)
        return lo_c, hi_c

    # I^R = G VR - B VI ; I^I = B VR + G VI
    g_lo, g_hi = scaled(g, vr_lo[None, :], vr_hi[None, :])
    nb_lo, nb_hi = scaled(-b, vi_lo[None, :], vi_hi[None, :])
    ir_lo = np.sum(g_lo + nb_lo, axis=1)
    ir_hi = np.sum(g_hi + nb_hi, axis=1)
    b_lo, b_hi = scaled(b, vr_lo[None, :], vr_hi[None, :])
    gg_lo, gg_hi = scaled(g, vi_lo[None, :], vi_hi[None, :])
    ii_lo = np.sum(b_lo + gg_lo, axis=1)
    ii_hi = np.sum(b_hi + gg_hi, axis=1)
    return ir_lo, ir_hi, ii_lo, ii_hi


def preprocess_bounds(
    net: ThreePhaseNetwork,
    y_bus: np.ndarray,
    bids: list[SmoBid],
    theta_window_deg: float = 15.0,
    v_limits: tuple[float, float] = (0.95, 1.05),
) -> VarBounds:
    """Voltage and current boxes for the McCormick relaxation.

    V boxes are the rectangle hulls of the polar sets {|V| in v_limits, angle
    within +/- theta_window of the nominal phase angle}; slack node-phases get
    degenerate boxes at nominal. I boxes come from interval arithmetic on
    I = YV over the V boxes, intersected at bid nodes with |I| <= S_max/V_min
    from the bid P/Q limits and everywhere with summed incident ampacities.
    """
    if not (0 < v_limits[0] <= v_limits[1]):
        raise ValueError("v_limits must satisfy 0 < lo <= hi")
    n = net.n
    vnom = net.nominal_voltages()
    vr_lo = np.empty(n)
    vr_hi = np.empty(n)
    vi_lo = np.empty(n)
    vi_hi = np.empty(n)
    window = math.radians(theta_window_deg)
    slack_set = set(net.slack_indices.tolist())
    for k, (bus_id, ph) in enumerate(net.node_phases):
        if k in slack_set:
            vr_lo[k] = vr_hi[k] = vnom[k].real
            vi_lo[k] = vi_hi[k] = vnom[k].imag
        else:
            ang = math.atan2(vnom[k].imag, vnom[k].real)
            mag = abs(vnom[k])
            x_lo, x_hi, y_lo, y_hi = _sector_hull(
                v_limits[0] * mag, v_limits[1] * mag, ang - window, ang + window
            )
            vr_lo[k], vr_hi[k], vi_lo[k], vi_hi[k] = x_lo, x_hi, y_lo, y_hi

    ir_lo, ir_hi, ii_lo, ii_hi = _interval_matvec(
        np.real(y_bus), np.imag(y_bus), vr_lo, vr_hi, vi_lo, vi_hi
    )

    bids_by_bus = {bid.bus_id: bid for bid in bids}
    # Apparent-power-derived current magnitude bound at bid nodes.
    for k, (bus_id, ph) in enumerate(net.node_phases):
        bid = bids_by_bus.get(bus_id)
        if bid is None or ph not in bid.phases:
            continue
        pi = bid.phases.index(ph)
        p_abs = max(abs(bid.p_min[pi]), abs(bid.p_max[pi]))
        q_abs = max(abs(bid.q_min[pi]), abs(bid.q_max[pi]))
        i_mag = math.hypot(p_abs, q_abs) / v_limits[0]
        ir_lo[k] = max(ir_lo[k], -i_mag)
        ir_hi[k] = min(ir_hi[k], i_mag)
        ii_lo[k] = max(ii_lo[k], -i_mag)
        ii_hi[k] = min(ii_hi[k], i_mag)
    # Summed incident branch ampacities bound the nodal injection current.
    amp_sum = np.zeros(n)
    for br in net.branches:
        for j, ph in enumerate(br.phases):
            cap = br.i_max[j]
            if math.isfinite(cap):
                amp_sum[net.index[(br.from_bus, ph)]] += cap
                amp_sum[net.index[(br.to_bus, ph)]] += cap
            else:
                amp_sum[net.index[(br.from_bus, ph)]] = math.inf
                amp_sum[net.index[(br.to_bus, ph)]] = math.inf
    finite = np.isfinite(amp_sum)
    ir_lo[finite] = np.maximum(ir_lo[finite], -amp_sum[finite])
    ir_hi[finite] = np.minimum(ir_hi[finite], amp_sum[finite])
    ii_lo[finite] = np.maximum(ii_lo[finite], -amp_sum[finite])
    ii_hi[finite] = np.minimum(ii_hi[finite], amp_sum[finite])

    for k, node in enumerate(net.node_phases):
        for lo, hi, label in (
            (vr_lo[k], vr_hi[k], "V^R"),
            (vi_lo[k], vi_hi[k], "V^I"),
            (ir_lo[k], ir_hi[k], "I^R"),
            (ii_lo[k], ii_hi[k], "I^I"),
        ):
            if lo > hi:
                raise BoundsInfeasibleError(
                    f"empty {label} box at node {node[0]!r} phase {node[1]}", node=node
                )

    # The nominal operating point (and its baseline current) must fit.
    for k, node in enumerate(net.node_phases):
        if not (vr_lo[k] - 1e-12 <= vnom[k].real <= vr_hi[k] + 1e-12) or not (
            vi_lo[k] - 1e-12 <= vnom[k].imag <= vi_hi[k] + 1e-12
        ):
            raise BoundsInfeasibleError(
                f"nominal voltage outside V box at node {node[0]!r} phase {node[1]}",
                node=node,
            )
        bus_id, ph = node
        bid = bids_by_bus.get(bus_id)
        if bid is not None and ph in bid.phases:
            pi = bid.phases.index(ph)
            s0 = bid.p0[pi] + 1j * bid.q0[pi]
            i0 = np.conj(s0 / vnom[k])
            if not (
                ir_lo[k] - 1e-9 <= i0.real <= ir_hi[k] + 1e-9
                and ii_lo[k] - 1e-9 <= i0.imag <= ii_hi[k] + 1e-9
            ):
                raise BoundsInfeasibleError(
                    f"baseline current outside I box at node {bus_id!r} phase {ph}",
                    node=node,
                )

    return VarBounds(
        vr_lo=vr_lo, vr_hi=vr_hi, vi_lo=vi_lo, vi_hi=vi_hi,
        ir_lo=ir_lo, ir_hi=ir_hi, ii_lo=ii_lo, ii_hi=ii_hi,
        v_limits=v_limits, theta_window_deg=theta_window_deg,
    )


def build_mce(x_box: tuple[float, float], y_box: tuple[float, float]):
    """The four envelope inequalities for w = x*y over the given boxes.

    Returned rows are (cw, cx, cy, rhs) meaning cw*w + cx*x + cy*y <= rhs. At
    any box corner the four rows force w = x*y exactly.
    """
    x_lo, x_hi = x_box
    y_lo, y_hi = y_box
    if x_lo > x_hi or y_lo > y_hi:
        raise ValueError("empty box")
    return [
        (-1.0, y_lo, x_lo, x_lo * y_lo),
        (-1.0, y_hi, x_hi, x_hi * y_hi),
        (1.0, -y_lo, -x_hi, -x_hi * y_lo),
        (1.0, -y_hi, -x_lo, -x_lo * y_hi),
    ]


@dataclass
class PmWeights:
    """Objective weights: xi trades electrical terms against economic ones;
    lmp_p/lmp_q price PCC imports (internal units, $ per p.u.-hour)."""

    xi: float = 1.0
    lmp_p: float = 0.0
    lmp_q: float = 0.0


@dataclass
class PmProgram:
    prog: ConvexProgram
    net: ThreePhaseNetwork
    y_bus: np.ndarray
    bounds: VarBounds
    weights: PmWeights
    bids_by_bus: dict[str, SmoBid]
    # per node-phase economics (zero at non-bid node-phases)
    beta_p: np.ndarray = field(default=None)
    beta_q: np.ndarray = field(default=None)
    p0: np.ndarray = field(default=None)
    q0: np.ndarray = field(default=None)
    cost_p: np.ndarray = field(default=None)
    cost_q: np.ndarray = field(default=None)
    p_load0: np.ndarray = field(default=None)
    q_load0: np.ndarray = field(default=None)


@dataclass
class CiOpfSolution:
    """Primal/dual outcome of one relaxed CI-OPF clearing."""

    net: ThreePhaseNetwork
    bounds: VarBounds
    weights: PmWeights
    p: np.ndarray
    q: np.ndarray
    vr: np.ndarray
    vi: np.ndarray
    ir: np.ndarray
    ii: np.ndarray
    aux_a: np.ndarray
    aux_b: np.ndarray
    aux_c: np.ndarray
    aux_d: np.ndarray
    lambda_p: np.ndarray
    lambda_q: np.ndarray
    lambda_i: np.ndarray  # complex; Re-part pairs the ohm_re rows, -Im the ohm_im rows
    objective: float
    objective_breakdown: dict[str, float]
    solve_result: SolveResult

    def voltages(self) -> np.ndarray:
        return self.vr + 1j * self.vi

    def currents(self) -> np.ndarray:
        return self.ir + 1j * self.ii


def assemble_ciopf(
    net: ThreePhaseNetwork,
    y_bus: np.ndarray,
    bids: list[SmoBid],
    bounds: VarBounds,
    weights: PmWeights,
    ohm_voltage_offset: np.ndarray | None = None,
) -> PmProgram:
    """Build the relaxed CI-OPF as a tagged convex program.

    Variables per node-phase: P, Q, V^R, V^I, I^R, I^I plus auxiliaries
    a, b, c, d for the four bilinear products. Rows: slack voltage pins,
    Ohm's law (tagged ohm_re/ohm_im for lambda_I), power definitions
    a+b-P=0 / -c+d-Q=0 (tagged p_def/q_def for lambda_P/lambda_Q), sixteen
    envelope inequalities per node-phase, V/I boxes, and bid ranges on P, Q.

    The objective is load disutility + generation cost
    + xi * (line losses + voltage regulation about the nominal phasors).
    Losses are expressed directly in V through the branch admittances, so no
    extra branch variables appear.

    `ohm_voltage_offset` shifts V inside Ohm's law only (I = Y (V - offset));
    it exists so sensitivity checks can perturb that constraint and re-solve.
    """
    n = net.n
    slack_set = set(net.slack_indices.tolist())
    bids_by_bus: dict[str, SmoBid] = {}
    for bid in bids:
        if bid.bus_id in bids_by_bus:
            raise ValueError(f"duplicate SMO bid at bus {bid.bus_id!r}")
        if bid.bus_id not in net.bus_by_id:
            raise ValueError(f"SMO bid at unknown bus {bid.bus_id!r}")
        if bid.bus_id == net.slack_id:
            raise ValueError("SMO bids may not sit at the slack bus")
        if bid.phases != net.bus_by_id[bid.bus_id].phases:
            raise ValueError(
                f"SMO bid at bus {bid.bus_id!r} must cover the bus phases "
                f"{net.bus_by_id[bid.bus_id].phases!r}"
            )
        bids_by_bus[bid.bus_id] = bid
    for bus in net.buses:
        if bus.kind != "slack" and bus.id not in bids_by_bus:
            raise ValueError(f"missing SMO bid at bus {bus.id!r}")

    # Per node-phase economic data.
    beta_p = np.zeros(n)
    beta_q = np.zeros(n)
    p0 = np.zeros(n)
    q0 = np.zeros(n)
    cost_p = np.zeros(n)
    cost_q = np.zeros(n)
    p_load0 = np.zeros(n)
    q_load0 = np.zeros(n)
    p_lb = np.full(n, -math.inf)
    p_ub = np.full(n, math.inf)
    q_lb = np.full(n, -math.inf)
    q_ub = np.full(n, math.inf)
    for k, (bus_id, ph) in enumerate(net.node_phases):
        if k in slack_set:
            cost_p[k] = weights.lmp_p
            cost_q[k] = weights.lmp_q
            continue
        bid = bids_by_bus[bus_id]
        pi = bid.phases.index(ph)
        beta_p[k] = bid.beta_p
        beta_q[k] = bid.beta_q
        p0[k] = bid.p0[pi]
        q0[k] = bid.q0[pi]
        cost_p[k] = bid.alpha_p
        cost_q[k] = bid.alpha_q
        p_load0[k] = bid.p_load0[pi]
        q_load0[k] = bid.q_load0[pi]
        p_lb[k], p_ub[k] = bid.p_min[pi], bid.p_max[pi]
        q_lb[k], q_ub[k] = bid.q_min[pi], bid.q_max[pi]

    prog = ConvexProgram(name="ciopf")
    vnom = net.nominal_voltages()
    vr_lb = bounds.vr_lo.copy()
    vr_ub = bounds.vr_hi.copy()
    vi_lb = bounds.vi_lo.copy()
    vi_ub = bounds.vi_hi.copy()
    for k in slack_set:
        vr_lb[k], vr_ub[k] = -math.inf, math.inf  # pinned by equalities below
        vi_lb[k], vi_ub[k] = -math.inf, math.inf

    i_p = prog.add_variable("P", n, lb=p_lb, ub=p_ub)
    i_q = prog.add_variable("Q", n, lb=q_lb, ub=q_ub)
    i_vr = prog.add_variable("VR", n, lb=vr_lb, ub=vr_ub)
    i_vi = prog.add_variable("VI", n, lb=vi_lb, ub=vi_ub)
    i_ir = prog.add_variable("IR", n, lb=bounds.ir_lo, ub=bounds.ir_hi)
    i_ii = prog.add_variable("II", n, lb=bounds.ii_lo, ub=bounds.ii_hi)
    i_a = prog.add_variable("a", n)
    i_b = prog.add_variable("b", n)
    i_c = prog.add_variable("c", n)
    i_d = prog.add_variable("d", n)

    for k in sorted(slack_set):
        prog.add_equality([i_vr[k]], [1.0], vnom[k].real, tag="slack_vr")
        prog.add_equality([i_vi[k]], [1.0], vnom[k].imag, tag="slack_vi")

    g = np.real(y_bus)
    b_mat = np.imag(y_bus)
    if ohm_voltage_offset is None:
        ohm_rhs = np.zeros(n, dtype=complex)
    else:
        ohm_rhs = -(y_bus @ np.asarray(ohm_voltage_offset, dtype=complex))
    # Ohm's law: I^R - (G V^R - B V^I) = rhs_re ; I^I - (B V^R + G V^I) = rhs_im
    for k in range(n):
        cols = [i_ir[k]]
        coefs = [1.0]
        for m in range(n):
            if g[k, m] != 0.0:
                cols.append(i_vr[m])
                coefs.append(-g[k, m])
            if b_mat[k, m] != 0.0:
                cols.append(i_vi[m])
                coefs.append(b_mat[k, m])
        prog.add_equality(cols, coefs, ohm_rhs[k].real, tag="ohm_re")
    for k in range(n):
        cols = [i_ii[k]]
        coefs = [1.0]
        for m in range(n):
            if b_mat[k, m] != 0.0:
                cols.append(i_vr[m])
                coefs.append(-b_mat[k, m])
            if g[k, m] != 0.0:
                cols.append(i_vi[m])
                coefs.append(-g[k, m])
        prog.add_equality(cols, coefs, ohm_rhs[k].imag, tag="ohm_im")

    # Power definitions, oriented so lambda_P at the PCC equals +LMP.
    for k in range(n):
        prog.add_equality([i_a[k], i_b[k], i_p[k]], [1.0, 1.0, -1.0], 0.0, tag="p_def")
    for k in range(n):
        prog.add_equality([i_c[k], i_d[k], i_q[k]], [-1.0, 1.0, -1.0], 0.0, tag="q_def")

    # Envelope inequalities for a=VR*IR, b=VI*II, c=VR*II, d=VI*IR.
    combos = (
        (i_a, i_vr, i_ir, bounds.vr_lo, bounds.vr_hi, bounds.ir_lo, bounds.ir_hi),
        (i_b, i_vi, i_ii, bounds.vi_lo, bounds.vi_hi, bounds.ii_lo, bounds.ii_hi),
        (i_c, i_vr, i_ii, bounds.vr_lo, bounds.vr_hi, bounds.ii_lo, bounds.ii_hi),
        (i_d, i_vi, i_ir, bounds.vi_lo, bounds.vi_hi, bounds.ir_lo, bounds.ir_hi),
    )
    for k in range(n):
        for i_w, i_x, i_y, x_lo, x_hi, y_lo, y_hi in combos:
            for cw, cx, cy, rhs in build_mce((x_lo[k], x_hi[k]), (y_lo[k], y_hi[k])):
                prog.add_inequality(
                    [i_w[k], i_x[k], i_y[k]], [cw, cx, cy], rhs, tag="mce"
                )

    # Objective: disutility + generation cost + xi (losses + voltage regulation).
    for k in range(n):
        if beta_p[k] > 0:
            prog.add_quadratic(i_p[k], i_p[k], beta_p[k])
            prog.add_linear(i_p[k], -2.0 * beta_p[k] * p0[k])
            prog.add_constant(beta_p[k] * p0[k] ** 2)
        if beta_q[k] > 0:
            prog.add_quadratic(i_q[k], i_q[k], beta_q[k])
            prog.add_linear(i_q[k], -2.0 * beta_q[k] * q0[k])
            prog.add_constant(beta_q[k] * q0[k] ** 2)
        if cost_p[k] != 0.0:
            prog.add_linear(i_p[k], cost_p[k])
            prog.add_constant(cost_p[k] * p_load0[k])
        if cost_q[k] != 0.0:
            prog.add_linear(i_q[k], cost_q[k])
            prog.add_constant(cost_q[k] * q_load0[k])

    xi = weights.xi
    if xi != 0.0:
        for br in net.branches:
            y = br.admittance_block()
            p = len(br.phases)
            fi = np.array([net.index[(br.from_bus, ph)] for ph in br.phases])
            ti = np.array([net.index[(br.to_bus, ph)] for ph in br.phases])
            gy, by = np.real(y), np.imag(y)
            m = np.block(
                [
                    [gy, -by, -gy, by],
                    [by, gy, -by, -gy],
                ]
            )
            r_diag = np.concatenate([br.series_resistance(), br.series_resistance()])
            h_local = m.T @ np.diag(r_diag) @ m
            idx_local = np.concatenate([i_vr[fi], i_vi[fi], i_vr[ti], i_vi[ti]])
            prog.add_quadratic_form(idx_local, h_local, weight=xi)
        for k in range(n):
            prog.add_quadratic(i_vr[k], i_vr[k], xi)
            prog.add_linear(i_vr[k], -2.0 * xi * vnom[k].real)
            prog.add_constant(xi * vnom[k].real ** 2)
            prog.add_quadratic(i_vi[k], i_vi[k], xi)
            prog.add_linear(i_vi[k], -2.0 * xi * vnom[k].imag)
            prog.add_constant(xi * vnom[k].imag ** 2)

    return PmProgram(
        prog=prog, net=net, y_bus=y_bus, bounds=bounds, weights=weights,
        bids_by_bus=bids_by_bus, beta_p=beta_p, beta_q=beta_q, p0=p0, q0=q0,
        cost_p=cost_p, cost_q=cost_q, p_load0=p_load0, q_load0=q_load0,
    )


def objective_breakdown(pm: PmProgram, p, q, vr, vi) -> dict[str, float]:
    """Per-term objective values at a primal point (losses/voltreg unweighted)."""
    disutil = float(np.sum(pm.beta_p * (p - pm.p0) ** 2) + np.sum(pm.beta_q * (q - pm.q0) ** 2))
    gen_cost = float(
        np.sum(pm.cost_p * (p + pm.p_load0)) + np.sum(pm.cost_q * (q + pm.q_load0))
    )
    v = vr + 1j * vi
    losses = 0.0
    for br in pm.net.branches:
        fi = np.array([pm.net.index[(br.from_bus, ph)] for ph in br.phases])
        ti = np.array([pm.net.index[(br.to_bus, ph)] for ph in br.phases])
        i_br = br.admittance_block() @ (v[fi] - v[ti])
        losses += float(np.sum(br.series_resistance() * np.abs(i_br) ** 2))
    vnom = pm.net.nominal_voltages()
    voltreg = float(np.sum((vr - vnom.real) ** 2 + (vi - vnom.imag) ** 2))
    total = disutil + gen_cost + pm.weights.xi * (losses + voltreg)
    return {
        "load_disutility": disutil,
        "generation_cost": gen_cost,
        "losses": losses,
        "voltage_regulation": voltreg,
        "xi": pm.weights.xi,
        "total": total,
    }


def solve_pm(pm: PmProgram) -> CiOpfSolution:
    """Solve the relaxed CI-OPF and collect the primal/dual pair."""
    res = solve(pm.prog)
    if res.status == "infeasible":
        raise PmInfeasibleError("relaxed CI-OPF infeasible", bounds=pm.bounds)
    if res.status != "optimal":
        raise PmSolveError(f"CI-OPF solve failed with status {res.status}: {res.diagnostics}")
    lam_re = res.eq_duals["ohm_re"]
    lam_im = res.eq_duals["ohm_im"]
    p = res.value("P")
    q = res.value("Q")
    vr = res.value("VR")
    vi = res.value("VI")
    return CiOpfSolution(
        net=pm.net,
        bounds=pm.bounds,
        weights=pm.weights,
        p=p, q=q, vr=vr, vi=vi,
        ir=res.value("IR"), ii=res.value("II"),
        aux_a=res.value("a"), aux_b=res.value("b"),
        aux_c=res.value("c"), aux_d=res.value("d"),
        lambda_p=res.eq_duals["p_def"],
        lambda_q=res.eq_duals["q_def"],
        lambda_i=lam_re - 1j * lam_im,
        objective=res.objective,
        objective_breakdown=objective_breakdown(pm, p, q, vr, vi),
        solve_result=res,
    )


@dataclass
class Dlmp:
    """Three-component nodal prices (internal units, $ per p.u.-hour)."""

    node_phases: list[tuple[str, str]]
    lambda_p: np.ndarray
    lambda_q: np.ndarray
    lambda_v: np.ndarray  # complex Y^T lambda_I
    lambda_v_bar: np.ndarray  # Re(lambda_v)
    node_means: dict[str, tuple[float, float, float]]
    lambda_eq: dict[str, float] | None = None


def extract_dlmp(solution: CiOpfSolution, y_bus: np.ndarray) -> Dlmp:
    """dLMP vector [lambda_P, lambda_Q, lambda_V_bar] from the equality duals.

    lambda_V = Y^T lambda_I exactly; lambda_V_bar takes the real part first and
    per-node means average over the phases present at each node.
    """
    lam_v = y_bus.T @ solution.lambda_i
    lam_v_bar = np.real(lam_v)
    node_means: dict[str, tuple[float, float, float]] = {}
    for bus in solution.net.buses:
        idx = solution.net.bus_indices(bus.id)
        node_means[bus.id] = (
            float(np.mean(solution.lambda_p[idx])),
            float(np.mean(solution.lambda_q[idx])),
            float(np.mean(lam_v_bar[idx])),
        )
    return Dlmp(
        node_phases=list(solution.net.node_phases),
        lambda_p=solution.lambda_p.copy(),
        lambda_q=solution.lambda_q.copy(),
        lambda_v=lam_v,
        lambda_v_bar=lam_v_bar,
        node_means=node_means,
    )


@dataclass
class GapReport:
    """Violations of the original bilinear/ring/ampacity constraints."""

    p_gap: np.ndarray
    q_gap: np.ndarray
    max_p_gap: float
    max_q_gap: float
    ring_violation: float
    ampacity_violation: float

    @property
    def max_bilinear(self) -> float:
        return max(self.max_p_gap, self.max_q_gap)


def relaxation_gap(solution: CiOpfSolution, net: ThreePhaseNetwork) -> GapReport:
    """Audit the relaxed optimum against the true nonconvex constraints."""
    p_true = solution.vr * solution.ir + solution.vi * solution.ii
    q_true = -solution.vr * solution.ii + solution.vi * solution.ir
    p_gap = np.abs(solution.p - p_true)
    q_gap = np.abs(solution.q - q_true)

    vmag = np.abs(solution.voltages())
    v_lo, v_hi = solution.bounds.v_limits
    ring = float(np.max(np.maximum.reduce([v_lo - vmag, vmag - v_hi, np.zeros_like(vmag)])))

    amp = 0.0
    i_br, rows = branch_currents(net, solution.voltages())
    for (bi, ph), cur in zip(rows, i_br):
        br = net.branches[bi]
        cap = br.i_max[br.phases.index(ph)]
        if math.isfinite(cap):
            amp = max(amp, float(np.abs(cur)) - cap)
    return GapReport(
        p_gap=p_gap,
        q_gap=q_gap,
        max_p_gap=float(np.max(p_gap)),
        max_q_gap=float(np.max(q_gap)),
        ring_violation=ring,
        ampacity_violation=max(amp, 0.0),
    )


def equivalent_rate(
    dlmp: Dlmp, solution: CiOpfSolution, p_zero_tol: float = 1e-9
) -> dict[str, float]:
    """Single-number rate per node: (lP P* + lQ Q* + lV dV*) / P*.

    dV* sums |V^R - nominal| + |V^I - nominal| over the node's phases (the
    nominal phasor plays the paper-frame role of 1 + j0); prices are the
    node's phase means, P*/Q* the phase sums. Nodes with P* ~ 0 get NaN and
    are excluded from averages.
    """
    vnom = solution.net.nominal_voltages()
    rates: dict[str, float] = {}
    for bus in solution.net.buses:
        idx = solution.net.bus_indices(bus.id)
        p_net = float(np.sum(solution.p[idx]))
        q_net = float(np.sum(solution.q[idx]))
        dv = float(
            np.sum(
                np.abs(solution.vr[idx] - vnom[idx].real)
                + np.abs(solution.vi[idx] - vnom[idx].imag)
            )
        )
        lp, lq, lv = dlmp.node_means[bus.id]
        if abs(p_net) <= p_zero_tol:
            rates[bus.id] = math.nan
        else:
            rates[bus.id] = (lp * p_net + lq * q_net + lv * dv) / p_net
    dlmp.lambda_eq = rates
    return rates
