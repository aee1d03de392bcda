"""Scenario file parsing/serialization and result-bundle export.

Scenario files are schema-versioned JSON with sections network / population /
profiles / market / prices; units are declared per section and converted to
per-unit (and internal price units) at this boundary only. Result bundles are
plain delimited text whose numeric formatting round-trips at full precision.
"""

from __future__ import annotations

import csv
import json
import math
import os
from datetime import datetime, timezone

import numpy as np

from .cosim import DcaSpec, MarketLog, Metrics, Scenario, ScenarioError, SmoSpec
from .network import Branch, Bus, NetworkValidationError, ThreePhaseNetwork
from .primary import internal_to_per_kwh, per_kwh_to_internal

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """Carries the full list of schema violations, each named individually."""

    def __init__(self, errors: list[str]) -> None:
        self.errors = list(errors)
        super().__init__(
            "scenario schema errors:\n" + "\n".join(f"  - {e}" for e in self.errors)
        )


def _expand_profile(spec, t_steps: int, n_phases: int, dt_s: int, where: str, errors: list[str]):
    """Expand {"constant": [...]} or {"steps": [[t_min, [...]], ...]} to (T, m)."""
    arr = np.zeros((t_steps, n_phases))
    if not isinstance(spec, dict):
        errors.append(f"{where}: profile must be an object with 'constant' or 'steps'")
        return arr
    if "constant" in spec:
        vals = np.atleast_1d(np.asarray(spec["constant"], dtype=float))
        if vals.shape != (n_phases,):
            errors.append(f"{where}: constant profile needs {n_phases} per-phase values")
            return arr
        arr[:] = vals
        return arr
    if "steps" in spec:
        steps = spec["steps"]
        if not steps or steps[0][0] != 0:
            errors.append(f"{where}: step profile must start at t=0")
            return arr
        try:
            for i, (t_min, vals) in enumerate(steps):
                vals = np.atleast_1d(np.asarray(vals, dtype=float))
                if vals.shape != (n_phases,):
                    errors.append(f"{where}: step {i} needs {n_phases} per-phase values")
                    return arr
                start = int(t_min) // dt_s
                end = int(steps[i + 1][0]) // dt_s if i + 1 < len(steps) else t_steps
                arr[start:end] = vals
        except (TypeError, ValueError):
            errors.append(f"{where}: malformed step profile")
        return arr
    errors.append(f"{where}: profile must define 'constant' or 'steps'")
    return arr


def _expand_price_series(spec, n_pm: int, dt_p: int, where: str, errors: list[str]):
    arr = np.zeros(n_pm)
    if isinstance(spec, (int, float)):
        arr[:] = float(spec)
        return arr
    if isinstance(spec, dict) and "constant" in spec:
        arr[:] = float(spec["constant"])
        return arr
    if isinstance(spec, dict) and "steps" in spec:
        steps = spec["steps"]
        if not steps or steps[0][0] != 0:
            errors.append(f"{where}: step series must start at t=0")
            return arr
        for i, (t_min, val) in enumerate(steps):
            start = int(t_min) // dt_p
            end = int(steps[i + 1][0]) // dt_p if i + 1 < len(steps) else n_pm
            arr[start:end] = float(val)
        return arr
    errors.append(f"{where}: price series must be a number or define 'constant'/'steps'")
    return arr


def parse_scenario_dict(doc: dict, name_hint: str = "scenario") -> Scenario:
    """Validate and build a Scenario from a parsed JSON document."""
    errors: list[str] = []
    if not isinstance(doc, dict):
        raise SchemaError(["top level: document must be a JSON object"])
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        errors.append(f"top level: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    for section in ("network", "population", "profiles", "market", "prices"):
        if section not in doc:
            errors.append(f"top level: missing section {section!r}")
    if errors:
        raise SchemaError(errors)

    net_sec = doc["network"]
    s_base = float(net_sec.get("s_base_va", 1e6))
    v_base = float(net_sec.get("v_base_v", 2400.0))
    net_units = net_sec.get("units", "pu")
    if net_units not in ("pu", "si"):
        errors.append("network.units: must be 'pu' or 'si'")
        net_units = "pu"
    z_base = v_base**2 / s_base
    i_base = s_base / v_base

    buses: list[Bus] = []
    for i, b in enumerate(net_sec.get("buses", [])):
        try:
            v_nom = None
            if "v_nominal" in b:
                v_nom = np.array(
                    [complex(v[0], v[1]) for v in b["v_nominal"]], dtype=complex
                )
            buses.append(
                Bus(
                    id=str(b["id"]),
                    phases=b.get("phases", "abc"),
                    kind=b.get("kind", "pq"),
                    v_nominal=v_nom,
                )
            )
        except (KeyError, NetworkValidationError, ValueError, TypeError) as exc:
            errors.append(f"network.buses[{i}]: {exc}")

    branches: list[Branch] = []
    for i, br in enumerate(net_sec.get("branches", [])):
        try:
            phases = br.get("phases", "abc")
            m = len(phases)
            r = np.asarray(br["r"], dtype=float).reshape(m, m)
            x = np.asarray(br["x"], dtype=float).reshape(m, m)
            z = r + 1j * x
            i_max = br.get("i_max", math.inf)
            if isinstance(i_max, list):
                i_max = np.array([math.inf if v is None else float(v) for v in i_max])
            if net_units == "si":
                z = z / z_base
                i_max = np.asarray(i_max, dtype=float)
                finite = np.isfinite(i_max)
                i_max = np.where(finite, i_max / i_base, i_max)
            branches.append(
                Branch(
                    from_bus=str(br["from"]),
                    to_bus=str(br["to"]),
                    z=z,
                    phases=phases,
                    i_max=i_max,
                )
            )
        except (KeyError, NetworkValidationError, ValueError, TypeError) as exc:
            errors.append(f"network.branches[{i}]: {exc}")
    if errors:
        raise SchemaError(errors)

    try:
        network = ThreePhaseNetwork(buses, branches, s_base=s_base, v_base=v_base)
    except NetworkValidationError as exc:
        raise SchemaError([f"network: {exc}"]) from exc

    pop = doc["population"]
    smos: list[SmoSpec] = []
    for i, s in enumerate(pop.get("smos", [])):
        try:
            smos.append(
                SmoSpec(
                    smo_id=str(s["id"]),
                    bus_id=str(s["bus"]),
                    alpha_p=float(s["alpha_p"]),
                    alpha_q=float(s["alpha_q"]),
                    beta_p=float(s.get("beta_p", 0.0)),
                    beta_q=float(s.get("beta_q", 0.0)),
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"population.smos[{i}]: {exc}")
    dcas: list[DcaSpec] = []
    for i, d in enumerate(pop.get("dcas", [])):
        try:
            dcas.append(
                DcaSpec(
                    dca_id=str(d["id"]),
                    smo_id=str(d["smo"]),
                    phases=d.get("phases", "abc"),
                    kind_p=d.get("kind_p", "load"),
                    kind_q=d.get("kind_q", "load"),
                    commitment=float(d.get("commitment", 1.0)),
                    beta_p=float(d["beta_p"]) if "beta_p" in d else None,
                    beta_q=float(d["beta_q"]) if "beta_q" in d else None,
                    flex_p=float(d["flex_p"]) if "flex_p" in d else None,
                    flex_q=float(d["flex_q"]) if "flex_q" in d else None,
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"population.dcas[{i}]: {exc}")

    market = doc["market"]
    try:
        dt_s = int(market.get("dt_s_min", 1))
        dt_p = int(market.get("dt_p_min", 5))
        horizon = int(market.get("horizon_min", 60))
    except (ValueError, TypeError) as exc:
        errors.append(f"market: {exc}")
        raise SchemaError(errors)
    if dt_s <= 0 or dt_p <= 0 or horizon <= 0:
        errors.append("market: dt_s_min, dt_p_min and horizon_min must be positive")
    elif dt_p % dt_s != 0:
        errors.append(
            f"market: dt_p_min ({dt_p}) must be an integer multiple of dt_s_min ({dt_s})"
        )
    elif horizon % dt_p != 0:
        errors.append(f"market: horizon_min ({horizon}) must be a multiple of dt_p_min ({dt_p})")
    if errors:
        raise SchemaError(errors)

    t_steps = horizon // dt_s
    n_pm = horizon // dt_p

    prof_sec = doc["profiles"]
    prof_units = prof_sec.get("units", "pu")
    if prof_units not in ("pu", "si"):
        errors.append("profiles.units: must be 'pu' or 'si'")
        prof_units = "pu"
    scale = 1.0 if prof_units == "pu" else 1.0 / s_base
    profiles_p: dict[str, np.ndarray] = {}
    profiles_q: dict[str, np.ndarray] = {}
    series = prof_sec.get("series", {})
    for d in dcas:
        if d.dca_id not in series:
            errors.append(f"profiles.series: missing entry for DCA {d.dca_id!r}")
            continue
        entry = series[d.dca_id]
        m = len(d.phases)
        profiles_p[d.dca_id] = scale * _expand_profile(
            entry.get("p"), t_steps, m, dt_s, f"profiles.series[{d.dca_id}].p", errors
        )
        profiles_q[d.dca_id] = scale * _expand_profile(
            entry.get("q"), t_steps, m, dt_s, f"profiles.series[{d.dca_id}].q", errors
        )
    for key in series:
        if key not in {d.dca_id for d in dcas}:
            errors.append(f"profiles.series: profile for unknown DCA {key!r}")

    prices = doc["prices"]
    price_units = prices.get("units", "per_kwh")
    if price_units not in ("per_kwh", "per_pu"):
        errors.append("prices.units: must be 'per_kwh' or 'per_pu'")
        price_units = "per_kwh"
    lmp_p = _expand_price_series(prices.get("lmp_p", 0.0), n_pm, dt_p, "prices.lmp_p", errors)
    lmp_q = _expand_price_series(prices.get("lmp_q", 0.0), n_pm, dt_p, "prices.lmp_q", errors)
    if price_units == "per_kwh":
        lmp_p = np.array([per_kwh_to_internal(v, s_base) for v in lmp_p])
        lmp_q = np.array([per_kwh_to_internal(v, s_base) for v in lmp_q])
    smo_alphas = {}
    for s in smos:
        if price_units == "per_kwh":
            smo_alphas[s.smo_id] = (
                per_kwh_to_internal(s.alpha_p, s_base),
                per_kwh_to_internal(s.alpha_q, s_base),
            )
        else:
            smo_alphas[s.smo_id] = (s.alpha_p, s.alpha_q)
    for s in smos:
        s.alpha_p, s.alpha_q = smo_alphas[s.smo_id]

    if errors:
        raise SchemaError(errors)

    try:
        return Scenario(
            name=str(doc.get("name", name_hint)),
            network=network,
            smos=smos,
            dcas=dcas,
            profiles_p=profiles_p,
            profiles_q=profiles_q,
            lmp_p=lmp_p,
            lmp_q=lmp_q,
            dt_s_min=dt_s,
            dt_p_min=dt_p,
            horizon_min=horizon,
            xi=float(market.get("xi", 1.0)),
            epsilon=float(market.get("epsilon", 0.05)),
            v_limits=tuple(market.get("v_limits", (0.95, 1.05))),
            theta_window_deg=float(market.get("theta_window_deg", 15.0)),
            seed=int(market.get("seed", 0)),
            flexibility_range=tuple(market.get("flexibility_range", (0.1, 0.3))),
        )
    except ScenarioError as exc:
        raise SchemaError([f"scenario: {exc}"]) from exc


def parse_scenario(path: str) -> Scenario:
    """Parse and validate a scenario file; raises SchemaError with all findings."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError([f"file: invalid JSON at line {exc.lineno}: {exc.msg}"]) from exc
    return parse_scenario_dict(doc, name_hint=os.path.splitext(os.path.basename(path))[0])


def serialize_scenario(scenario: Scenario) -> str:
    """Canonical JSON text; parse(serialize(s)) reproduces s exactly.

    Everything is written in per-unit / internal price units with explicit
    step series, so no unit conversion is applied on re-parse.
    """
    net = scenario.network
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": scenario.name,
        "network": {
            "s_base_va": net.s_base,
            "v_base_v": net.v_base,
            "units": "pu",
            "buses": [
                {
                    "id": b.id,
                    "phases": b.phases,
                    "kind": b.kind,
                    "v_nominal": [[v.real, v.imag] for v in b.v_nominal],
                }
                for b in net.buses
            ],
            "branches": [
                {
                    "from": br.from_bus,
                    "to": br.to_bus,
                    "phases": br.phases,
                    "r": np.real(br.z).tolist(),
                    "x": np.imag(br.z).tolist(),
                    "i_max": [v if math.isfinite(v) else None for v in br.i_max],
                }
                for br in net.branches
            ],
        },
        "population": {
            "smos": [
                {
                    "id": s.smo_id,
                    "bus": s.bus_id,
                    "alpha_p": s.alpha_p,
                    "alpha_q": s.alpha_q,
                    "beta_p": s.beta_p,
                    "beta_q": s.beta_q,
                }
                for s in scenario.smos
            ],
            "dcas": [
                {
                    "id": d.dca_id,
                    "smo": d.smo_id,
                    "phases": d.phases,
                    "kind_p": d.kind_p,
                    "kind_q": d.kind_q,
                    "commitment": d.commitment,
                    **({"beta_p": d.beta_p} if d.beta_p is not None else {}),
                    **({"beta_q": d.beta_q} if d.beta_q is not None else {}),
                    **({"flex_p": d.flex_p} if d.flex_p is not None else {}),
                    **({"flex_q": d.flex_q} if d.flex_q is not None else {}),
                }
                for d in scenario.dcas
            ],
        },
        "profiles": {
            "units": "pu",
            "series": {
                d.dca_id: {
                    "p": {
                        "steps": [
                            [t * scenario.dt_s_min, scenario.profiles_p[d.dca_id][t].tolist()]
                            for t in range(scenario.horizon_min // scenario.dt_s_min)
                        ]
                    },
                    "q": {
                        "steps": [
                            [t * scenario.dt_s_min, scenario.profiles_q[d.dca_id][t].tolist()]
                            for t in range(scenario.horizon_min // scenario.dt_s_min)
                        ]
                    },
                }
                for d in scenario.dcas
            },
        },
        "market": {
            "dt_s_min": scenario.dt_s_min,
            "dt_p_min": scenario.dt_p_min,
            "horizon_min": scenario.horizon_min,
            "xi": scenario.xi,
            "epsilon": scenario.epsilon,
            "v_limits": list(scenario.v_limits),
            "theta_window_deg": scenario.theta_window_deg,
            "seed": scenario.seed,
            "flexibility_range": list(scenario.flexibility_range),
        },
        "prices": {
            "units": "per_pu",
            "lmp_p": {
                "steps": [
                    [k * scenario.dt_p_min, float(scenario.lmp_p[k])]
                    for k in range(scenario.n_pm_intervals)
                ]
            },
            "lmp_q": {
                "steps": [
                    [k * scenario.dt_p_min, float(scenario.lmp_q[k])]
                    for k in range(scenario.n_pm_intervals)
                ]
            },
        },
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def _fmt(x) -> str:
    """Full-precision float formatting (repr round-trips exactly)."""
    return repr(float(x))


def write_result_bundle(
    log: MarketLog,
    metrics: Metrics,
    scenario: Scenario,
    out_dir: str,
    effective_config: dict | None = None,
) -> list[str]:
    """Write the delimited result files and the run manifest.

    Files: voltages.csv, dlmp.csv, tariffs.csv, gaps.csv, summary.csv and
    manifest.txt. All numeric columns round-trip at full precision; the
    manifest carries the only timestamped line.
    """
    os.makedirs(out_dir, exist_ok=True)
    net = scenario.network
    s_base = net.s_base
    paths = []

    def open_csv(name, header):
        path = os.path.join(out_dir, name)
        paths.append(path)
        fh = open(path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(header)
        return fh, writer

    fh, w = open_csv("voltages.csv", ["node", "phase", "t_min", "vmag_lem", "vmag_nolem"])
    with fh:
        for rec in log.pm_records:
            v_lem = np.abs(rec.solution.voltages())
            v_nol = np.abs(rec.baseline_v) if rec.baseline_v is not None else None
            for k, (bus_id, ph) in enumerate(net.node_phases):
                w.writerow(
                    [
                        bus_id,
                        ph,
                        rec.t,
                        _fmt(v_lem[k]),
                        _fmt(v_nol[k]) if v_nol is not None else "nan",
                    ]
                )

    fh, w = open_csv(
        "dlmp.csv",
        ["node", "phase", "t_min", "lambda_p_per_kwh", "lambda_q_per_kwh",
         "lambda_v_per_kwh", "lambda_eq_per_kwh"],
    )
    with fh:
        for rec in log.pm_records:
            for k, (bus_id, ph) in enumerate(net.node_phases):
                lam_eq = rec.lambda_eq.get(bus_id, math.nan)
                w.writerow(
                    [
                        bus_id,
                        ph,
                        rec.t,
                        _fmt(internal_to_per_kwh(rec.dlmp.lambda_p[k], s_base)),
                        _fmt(internal_to_per_kwh(rec.dlmp.lambda_q[k], s_base)),
                        _fmt(internal_to_per_kwh(rec.dlmp.lambda_v_bar[k], s_base)),
                        _fmt(internal_to_per_kwh(lam_eq, s_base))
                        if not math.isnan(lam_eq)
                        else "nan",
                    ]
                )

    fh, w = open_csv(
        "tariffs.csv",
        ["smo", "dca", "t_min", "mu_p_per_kwh", "mu_q_per_kvarh", "cash_flow_usd"],
    )
    with fh:
        for rec in log.sm_records:
            for dca_id in rec.result.dca_ids:
                w.writerow(
                    [
                        rec.smo_id,
                        dca_id,
                        rec.t,
                        _fmt(rec.result.tariff_p.get(dca_id, math.nan)),
                        _fmt(rec.result.tariff_q.get(dca_id, math.nan)),
                        _fmt(rec.result.cash_flow.get(dca_id, math.nan)),
                    ]
                )

    fh, w = open_csv(
        "gaps.csv",
        ["t_min", "max_p_gap", "max_q_gap", "ring_violation", "ampacity_violation"],
    )
    with fh:
        for rec in log.pm_records:
            w.writerow(
                [
                    rec.t,
                    _fmt(rec.gap.max_p_gap),
                    _fmt(rec.gap.max_q_gap),
                    _fmt(rec.gap.ring_violation),
                    _fmt(rec.gap.ampacity_violation),
                ]
            )

    fh, w = open_csv("summary.csv", ["metric", "value"])
    with fh:
        for key, val in metrics.as_rows():
            w.writerow([key, _fmt(val)])

    manifest = os.path.join(out_dir, "manifest.txt")
    paths.append(manifest)
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write(f"schema_version={SCHEMA_VERSION}\n")
        fh.write(f"scenario={scenario.name}\n")
        fh.write(f"seed={scenario.seed}\n")
        fh.write(f"xi={_fmt(scenario.xi)}\n")
        fh.write(f"epsilon={_fmt(scenario.epsilon)}\n")
        fh.write(f"horizon_min={scenario.horizon_min}\n")
        fh.write(f"dt_s_min={scenario.dt_s_min}\n")
        fh.write(f"dt_p_min={scenario.dt_p_min}\n")
        for key, val in sorted((effective_config or {}).items()):
            fh.write(f"override.{key}={val}\n")
        fh.write(f"halted={log.halted}\n")
        if log.halted:
            fh.write(f"halt_reason={log.halt_reason}\n")
            fh.write(f"halt_time={log.halt_time}\n")
        fh.write(f"generated_at={datetime.now(timezone.utc).isoformat()}\n")
    return paths
