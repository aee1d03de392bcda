"""Two-cadence co-simulation: clear every SM each dt_s, aggregate and clear the
PM each dt_p, feed setpoints and prices back down, and score the outcome
against a no-LEM power-flow baseline.

The run is single-owner and append-only; identical scenarios and seeds yield
bit-identical logs. Any infeasible clearing halts the run at that timestep
with a partial log (silent gaps would corrupt the price series).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import ThreePhaseNetwork, build_admittance, power_flow_oracle
from .primary import (
    BoundsInfeasibleError,
    CiOpfSolution,
    Dlmp,
    GapReport,
    PmInfeasibleError,
    PmSolveError,
    PmWeights,
    SmoBid,
    assemble_ciopf,
    equivalent_rate,
    extract_dlmp,
    internal_to_per_kwh,
    preprocess_bounds,
    relaxation_gap,
    solve_pm,
)
from .secondary import (
    BidValidationError,
    CommoditySets,
    DcaBid,
    PmSetpoint,
    SmClearingResult,
    TariffLedger,
    aggregate_smo_bid_ranges,
    classify_commodity_sets,
    clear_sm_lexicographic,
    compute_retail_tariffs,
)


class ScenarioError(ValueError):
    pass


@dataclass
class SmoSpec:
    smo_id: str
    bus_id: str
    alpha_p: float
    alpha_q: float
    beta_p: float
    beta_q: float


@dataclass
class DcaSpec:
    dca_id: str
    smo_id: str
    phases: str
    kind_p: str
    kind_q: str
    commitment: float
    beta_p: float | None = None  # drawn from U[0.1, 1] with the scenario seed if absent
    beta_q: float | None = None
    # Fixed flexibility fractions (may be 0 for firm assets); drawn from the
    # scenario's flexibility_range when absent.
    flex_p: float | None = None
    flex_q: float | None = None


@dataclass
class Scenario:
    """Everything one run needs: network, population, profiles, prices, knobs.

    Profiles are per-DCA baselines at SM resolution, shape (T, n_phases) with
    T = horizon_min / dt_s_min. LMP series are per PM interval in internal
    price units ($ per p.u.-hour).
    """

    name: str
    network: ThreePhaseNetwork
    smos: list[SmoSpec]
    dcas: list[DcaSpec]
    profiles_p: dict[str, np.ndarray]
    profiles_q: dict[str, np.ndarray]
    lmp_p: np.ndarray
    lmp_q: np.ndarray
    dt_s_min: int = 1
    dt_p_min: int = 5
    horizon_min: int = 60
    xi: float = 1.0
    epsilon: float = 0.05
    v_limits: tuple[float, float] = (0.95, 1.05)
    theta_window_deg: float = 15.0
    seed: int = 0
    flexibility_range: tuple[float, float] = (0.1, 0.3)

    def __post_init__(self) -> None:
        if self.dt_s_min <= 0 or self.dt_p_min <= 0:
            raise ScenarioError("time steps must be positive")
        if self.dt_p_min % self.dt_s_min != 0:
            raise ScenarioError(
                f"dt_p ({self.dt_p_min} min) must be an integer multiple of dt_s ({self.dt_s_min} min)"
            )
        if self.horizon_min % self.dt_p_min != 0:
            raise ScenarioError("horizon must be an integer multiple of dt_p")
        lo, hi = self.flexibility_range
        if not (0.0 < lo <= hi < 1.0):
            raise ScenarioError("flexibility_range must lie inside (0, 1)")
        smo_ids = [s.smo_id for s in self.smos]
        if len(set(smo_ids)) != len(smo_ids):
            raise ScenarioError("duplicate SMO ids")
        smo_by_id = {s.smo_id: s for s in self.smos}
        non_slack = {b.id for b in self.network.buses if b.kind != "slack"}
        smo_buses = [s.bus_id for s in self.smos]
        if len(set(smo_buses)) != len(smo_buses):
            raise ScenarioError("multiple SMOs at one bus")
        for s in self.smos:
            if s.bus_id not in non_slack:
                raise ScenarioError(f"SMO {s.smo_id!r} must sit at a non-slack bus")
        missing = non_slack - set(smo_buses)
        if missing:
            raise ScenarioError(f"non-slack buses without an SMO: {sorted(missing)}")
        dca_ids = [d.dca_id for d in self.dcas]
        if len(set(dca_ids)) != len(dca_ids):
            raise ScenarioError("duplicate DCA ids")
        for d in self.dcas:
            if d.smo_id not in smo_by_id:
                raise ScenarioError(f"DCA {d.dca_id!r} references unknown SMO {d.smo_id!r}")
            bus = self.network.bus_by_id[smo_by_id[d.smo_id].bus_id]
            for ph in d.phases:
                if ph not in bus.phases:
                    raise ScenarioError(
                        f"DCA {d.dca_id!r} phase {ph!r} missing at bus {bus.id!r}"
                    )
        for s in self.smos:
            if not any(d.smo_id == s.smo_id for d in self.dcas):
                raise ScenarioError(f"SMO {s.smo_id!r} has no DCAs")
        t_steps = self.horizon_min // self.dt_s_min
        for d in self.dcas:
            for label, profs in (("p", self.profiles_p), ("q", self.profiles_q)):
                if d.dca_id not in profs:
                    raise ScenarioError(f"missing {label} profile for DCA {d.dca_id!r}")
                arr = np.asarray(profs[d.dca_id], dtype=float)
                if arr.shape != (t_steps, len(d.phases)):
                    raise ScenarioError(
                        f"profile {label}[{d.dca_id!r}] must have shape "
                        f"({t_steps}, {len(d.phases)}), got {arr.shape}"
                    )
                profs[d.dca_id] = arr
        n_pm = self.horizon_min // self.dt_p_min
        for label in ("lmp_p", "lmp_q"):
            arr = np.asarray(getattr(self, label), dtype=float)
            if arr.shape != (n_pm,):
                raise ScenarioError(f"{label} must have one entry per PM interval ({n_pm})")
            setattr(self, label, arr)

    @property
    def n_pm_intervals(self) -> int:
        return self.horizon_min // self.dt_p_min

    @property
    def sm_per_pm(self) -> int:
        return self.dt_p_min // self.dt_s_min

    def smo_by_id(self, smo_id: str) -> SmoSpec:
        return next(s for s in self.smos if s.smo_id == smo_id)


def prepare_population(scenario: Scenario) -> tuple[dict[str, tuple[float, float]], dict[str, tuple[float, float]]]:
    """Draw per-DCA disutility coefficients and flexibility fractions.

    One pass over the DCA list in scenario order with a single seeded RNG, so
    a fixed seed yields identical draws run over run. Returns
    (betas, fractions) keyed by dca_id, each (P, Q).
    """
    rng = np.random.default_rng(scenario.seed)
    betas: dict[str, tuple[float, float]] = {}
    fractions: dict[str, tuple[float, float]] = {}
    lo, hi = scenario.flexibility_range
    for d in scenario.dcas:
        bp = d.beta_p if d.beta_p is not None else float(rng.uniform(0.1, 1.0))
        bq = d.beta_q if d.beta_q is not None else float(rng.uniform(0.1, 1.0))
        betas[d.dca_id] = (bp, bq)
        fp = d.flex_p if d.flex_p is not None else float(rng.uniform(lo, hi))
        fq = d.flex_q if d.flex_q is not None else float(rng.uniform(lo, hi))
        fractions[d.dca_id] = (fp, fq)
    return betas, fractions


def _flex_range(baseline: float, fraction: float, kind: str) -> tuple[float, float]:
    width = fraction * abs(baseline)
    if kind == "load":
        # Downward-only consumption flexibility: injection may only rise.
        return baseline, baseline + width
    return baseline - width, baseline + width


def generate_synthetic_bids(
    scenario: Scenario,
    t_index: int,
    betas: dict[str, tuple[float, float]],
    fractions: dict[str, tuple[float, float]],
) -> dict[str, list[DcaBid]]:
    """Per-SMO DCA bids at one SM timestep from the baseline profiles.

    Ranges are baseline +/- fraction * |baseline| with loads clipped to
    downward-only consumption flexibility; zero baselines give zero-width
    ranges. Deterministic given (betas, fractions).
    """
    out: dict[str, list[DcaBid]] = {s.smo_id: [] for s in scenario.smos}
    for d in scenario.dcas:
        p0 = scenario.profiles_p[d.dca_id][t_index]
        q0 = scenario.profiles_q[d.dca_id][t_index]
        fp, fq = fractions[d.dca_id]
        bp, bq = betas[d.dca_id]
        p_rng = [_flex_range(v, fp, d.kind_p) for v in p0]
        q_rng = [_flex_range(v, fq, d.kind_q) for v in q0]
        out[d.smo_id].append(
            DcaBid(
                dca_id=d.dca_id,
                smo_id=d.smo_id,
                phases=d.phases,
                p0=p0.copy(),
                q0=q0.copy(),
                p_min=np.array([r[0] for r in p_rng]),
                p_max=np.array([r[1] for r in p_rng]),
                q_min=np.array([r[0] for r in q_rng]),
                q_max=np.array([r[1] for r in q_rng]),
                commitment=d.commitment,
                beta_p=bp,
                beta_q=bq,
                kind_p=d.kind_p,
                kind_q=d.kind_q,
            )
        )
    return out


@dataclass
class PmRecord:
    t: int
    smo_bids: list[SmoBid]
    solution: CiOpfSolution
    dlmp: Dlmp
    gap: GapReport
    setpoints: dict[str, PmSetpoint]
    lambda_eq: dict[str, float]
    baseline_v: np.ndarray | None = None
    baseline_converged: bool = False


@dataclass
class SmRecord:
    t: int
    smo_id: str
    result: SmClearingResult
    sets: CommoditySets
    ledger: TariffLedger


@dataclass
class MarketLog:
    scenario_name: str
    pm_records: list[PmRecord] = field(default_factory=list)
    sm_records: list[SmRecord] = field(default_factory=list)
    halted: bool = False
    halt_reason: str | None = None
    halt_time: int | None = None


def _smo_phases(scenario: Scenario, smo: SmoSpec) -> str:
    return scenario.network.bus_by_id[smo.bus_id].phases


def _bootstrap_smo_bid(
    scenario: Scenario, smo: SmoSpec, bids: list[DcaBid]
) -> SmoBid:
    """First-interval SMO bid: aggregate the raw DCA bid ranges directly."""
    phases = _smo_phases(scenario, smo)
    m = len(phases)
    arrays = {k: np.zeros(m) for k in ("p0", "q0", "p_min", "p_max", "q_min", "q_max")}
    for b in bids:
        for k, ph in enumerate(b.phases):
            pi = phases.index(ph)
            arrays["p0"][pi] += b.p0[k]
            arrays["q0"][pi] += b.q0[k]
            arrays["p_min"][pi] += b.p_min[k]
            arrays["p_max"][pi] += b.p_max[k]
            arrays["q_min"][pi] += b.q_min[k]
            arrays["q_max"][pi] += b.q_max[k]
    return _make_smo_bid(scenario, smo, arrays, bids)


def _make_smo_bid(scenario, smo, arrays, bids: list[DcaBid]) -> SmoBid:
    phases = _smo_phases(scenario, smo)
    m = len(phases)
    p_load0 = np.zeros(m)
    q_load0 = np.zeros(m)
    for b in bids:
        for k, ph in enumerate(b.phases):
            pi = phases.index(ph)
            if b.kind_p == "load":
                p_load0[pi] -= b.p0[k]
            if b.kind_q == "load":
                q_load0[pi] -= b.q0[k]
    return SmoBid(
        smo_id=smo.smo_id,
        bus_id=smo.bus_id,
        phases=phases,
        p0=arrays["p0"],
        q0=arrays["q0"],
        p_min=arrays["p_min"],
        p_max=arrays["p_max"],
        q_min=arrays["q_min"],
        q_max=arrays["q_max"],
        alpha_p=smo.alpha_p,
        alpha_q=smo.alpha_q,
        beta_p=smo.beta_p,
        beta_q=smo.beta_q,
        p_load0=p_load0,
        q_load0=q_load0,
    )


def _baseline_injections(scenario: Scenario, t_index: int) -> np.ndarray:
    """Raw per node-phase complex injections with no flexibility dispatch."""
    net = scenario.network
    s = np.zeros(net.n, dtype=complex)
    smo_by_id = {sm.smo_id: sm for sm in scenario.smos}
    for d in scenario.dcas:
        bus_id = smo_by_id[d.smo_id].bus_id
        p0 = scenario.profiles_p[d.dca_id][t_index]
        q0 = scenario.profiles_q[d.dca_id][t_index]
        for k, ph in enumerate(d.phases):
            s[net.index[(bus_id, ph)]] += p0[k] + 1j * q0[k]
    return s


def run(scenario: Scenario, compute_baseline: bool = True) -> MarketLog:
    """Execute the full two-cadence timeline.

    Per PM interval: (i) aggregate SMO bids from the latest SM results (the
    first interval bootstraps from the raw DCA bids); (ii) preprocess bounds;
    (iii) clear the PM and extract prices; (iv) clear every SMO's SM at each
    dt_s against those setpoints and settle tariffs. `compute_baseline`
    controls the no-LEM power-flow reference series.
    """
    net = scenario.network
    y_bus = build_admittance(net)
    betas, fractions = prepare_population(scenario)
    log = MarketLog(scenario_name=scenario.name)
    dt_s_hours = scenario.dt_s_min / 60.0
    dt_p_hours = scenario.dt_p_min / 60.0
    last_results: dict[str, list[SmClearingResult]] = {s.smo_id: [] for s in scenario.smos}

    for k in range(scenario.n_pm_intervals):
        t_p = k * scenario.dt_p_min
        sm_index = t_p // scenario.dt_s_min
        bids_by_smo = generate_synthetic_bids(scenario, sm_index, betas, fractions)
        smo_bids: list[SmoBid] = []
        for smo in scenario.smos:
            if k == 0 or not last_results[smo.smo_id]:
                smo_bids.append(_bootstrap_smo_bid(scenario, smo, bids_by_smo[smo.smo_id]))
            else:
                _, arrays = aggregate_smo_bid_ranges(last_results[smo.smo_id])
                smo_bids.append(_make_smo_bid(scenario, smo, arrays, bids_by_smo[smo.smo_id]))

        weights = PmWeights(
            xi=scenario.xi, lmp_p=float(scenario.lmp_p[k]), lmp_q=float(scenario.lmp_q[k])
        )
        try:
            bounds = preprocess_bounds(
                net, y_bus, smo_bids,
                theta_window_deg=scenario.theta_window_deg,
                v_limits=scenario.v_limits,
            )
            pm_prog = assemble_ciopf(net, y_bus, smo_bids, bounds, weights)
            solution = solve_pm(pm_prog)
        except (BoundsInfeasibleError, PmInfeasibleError, PmSolveError) as exc:
            log.halted = True
            log.halt_reason = f"PM clearing at t={t_p} min failed: {exc}"
            log.halt_time = t_p
            return log

        dlmp = extract_dlmp(solution, y_bus)
        rates = equivalent_rate(dlmp, solution)
        gap = relaxation_gap(solution, net)

        setpoints: dict[str, PmSetpoint] = {}
        for smo in scenario.smos:
            idx = net.bus_indices(smo.bus_id)
            setpoints[smo.smo_id] = PmSetpoint(
                smo_id=smo.smo_id,
                phases=_smo_phases(scenario, smo),
                p_star=solution.p[idx].copy(),
                q_star=solution.q[idx].copy(),
                price_p=dlmp.lambda_p[idx].copy(),
                price_q=dlmp.lambda_q[idx].copy(),
                timestamp=t_p,
            )

        baseline_v = None
        baseline_converged = False
        if compute_baseline:
            pf = power_flow_oracle(net, _baseline_injections(scenario, sm_index), y_bus=y_bus)
            baseline_v = pf.v if pf.converged else None
            baseline_converged = pf.converged
        log.pm_records.append(
            PmRecord(
                t=t_p,
                smo_bids=smo_bids,
                solution=solution,
                dlmp=dlmp,
                gap=gap,
                setpoints=setpoints,
                lambda_eq=rates,
                baseline_v=baseline_v,
                baseline_converged=baseline_converged,
            )
        )

        for t in range(t_p, t_p + scenario.dt_p_min, scenario.dt_s_min):
            sm_i = t // scenario.dt_s_min
            bids_now = generate_synthetic_bids(scenario, sm_i, betas, fractions)
            for smo in scenario.smos:
                try:
                    result = clear_sm_lexicographic(
                        bids_now[smo.smo_id],
                        setpoints[smo.smo_id],
                        epsilon=scenario.epsilon,
                        timestamp=t,
                    )
                except BidValidationError as exc:
                    log.halted = True
                    log.halt_reason = f"SM clearing for {smo.smo_id!r} at t={t} min rejected: {exc}"
                    log.halt_time = t
                    return log
                if not result.feasible:
                    log.halted = True
                    log.halt_reason = (
                        f"SM clearing for {smo.smo_id!r} at t={t} min infeasible: "
                        f"{result.infeasibility}"
                    )
                    log.halt_time = t
                    return log
                sets = classify_commodity_sets(result)
                ledger = compute_retail_tariffs(
                    result, sets, setpoints[smo.smo_id],
                    dt_s_hours, dt_p_hours, net.s_base,
                )
                log.sm_records.append(
                    SmRecord(t=t, smo_id=smo.smo_id, result=result, sets=sets, ledger=ledger)
                )
                last_results[smo.smo_id].append(result)

    return log


@dataclass
class Metrics:
    """Voltage/price/cost summary of one run. Prices reported in $/kWh."""

    mean_vmag_lem: float
    mean_vmag_nolem: float
    mean_abs_vdev_lem: float
    mean_abs_vdev_nolem: float
    violations_lem: int
    violations_nolem: int
    mean_lambda_p: float
    mean_lambda_q: float
    mean_lambda_v: float
    mean_lambda_eq: float
    max_bilinear_gap: float
    node_mean_dlmp: dict[str, tuple[float, float, float]]
    n_pm_clearings: int
    n_sm_clearings: int

    def as_rows(self) -> list[tuple[str, float]]:
        rows = [
            ("mean_vmag_lem", self.mean_vmag_lem),
            ("mean_vmag_nolem", self.mean_vmag_nolem),
            ("mean_abs_vdev_lem", self.mean_abs_vdev_lem),
            ("mean_abs_vdev_nolem", self.mean_abs_vdev_nolem),
            ("violations_lem", float(self.violations_lem)),
            ("violations_nolem", float(self.violations_nolem)),
            ("mean_lambda_p_per_kwh", self.mean_lambda_p),
            ("mean_lambda_q_per_kwh", self.mean_lambda_q),
            ("mean_lambda_v_per_kwh", self.mean_lambda_v),
            ("mean_lambda_eq_per_kwh", self.mean_lambda_eq),
            ("max_bilinear_gap", self.max_bilinear_gap),
            ("n_pm_clearings", float(self.n_pm_clearings)),
            ("n_sm_clearings", float(self.n_sm_clearings)),
        ]
        return rows


def compute_metrics(log: MarketLog, scenario: Scenario) -> Metrics:
    """Score a (possibly partial) log: with-LEM voltages from the PM solutions,
    without-LEM from the power-flow baseline, dLMP decomposition and mean
    equivalent rate excluding undefined markers."""
    net = scenario.network
    s_base = net.s_base
    vnom_mag = np.abs(net.nominal_voltages())
    v_lo, v_hi = scenario.v_limits

    lem_mags, nolem_mags = [], []
    for rec in log.pm_records:
        lem_mags.append(np.abs(rec.solution.voltages()))
        if rec.baseline_v is not None:
            nolem_mags.append(np.abs(rec.baseline_v))
    if lem_mags:
        lem = np.stack(lem_mags)
        mean_vmag_lem = float(np.mean(lem))
        mean_dev_lem = float(np.mean(np.abs(lem - vnom_mag[None, :])))
        viol_lem = int(np.sum((lem < v_lo) | (lem > v_hi)))
    else:
        mean_vmag_lem = mean_dev_lem = math.nan
        viol_lem = 0
    if nolem_mags:
        nol = np.stack(nolem_mags)
        mean_vmag_nolem = float(np.mean(nol))
        mean_dev_nolem = float(np.mean(np.abs(nol - vnom_mag[None, :])))
        viol_nolem = int(np.sum((nol < v_lo) | (nol > v_hi)))
    else:
        mean_vmag_nolem = mean_dev_nolem = math.nan
        viol_nolem = 0

    lam_p, lam_q, lam_v, lam_eq = [], [], [], []
    node_acc: dict[str, list[np.ndarray]] = {b.id: [] for b in net.buses}
    for rec in log.pm_records:
        lam_p.append(np.mean(rec.dlmp.lambda_p))
        lam_q.append(np.mean(rec.dlmp.lambda_q))
        lam_v.append(np.mean(rec.dlmp.lambda_v_bar))
        lam_eq.extend(v for v in rec.lambda_eq.values() if not math.isnan(v))
        for bus_id, comps in rec.dlmp.node_means.items():
            node_acc[bus_id].append(np.array(comps))
    to_kwh = lambda v: internal_to_per_kwh(float(v), s_base)
    node_mean_dlmp = {
        bus_id: tuple(to_kwh(x) for x in np.mean(arrs, axis=0)) if arrs else (math.nan,) * 3
        for bus_id, arrs in node_acc.items()
    }

    gaps = [rec.gap.max_bilinear for rec in log.pm_records]
    return Metrics(
        mean_vmag_lem=mean_vmag_lem,
        mean_vmag_nolem=mean_vmag_nolem,
        mean_abs_vdev_lem=mean_dev_lem,
        mean_abs_vdev_nolem=mean_dev_nolem,
        violations_lem=viol_lem,
        violations_nolem=viol_nolem,
        mean_lambda_p=to_kwh(np.mean(lam_p)) if lam_p else math.nan,
        mean_lambda_q=to_kwh(np.mean(lam_q)) if lam_q else math.nan,
        mean_lambda_v=to_kwh(np.mean(lam_v)) if lam_v else math.nan,
        mean_lambda_eq=to_kwh(np.mean(lam_eq)) if lam_eq else math.nan,
        max_bilinear_gap=float(np.max(gaps)) if gaps else math.nan,
        node_mean_dlmp=node_mean_dlmp,
        n_pm_clearings=len(log.pm_records),
        n_sm_clearings=len(log.sm_records),
    )
