"""Shared builders for networks, bids and scenarios used across the suite."""

from __future__ import annotations

import json

import numpy as np
import pytest

from lemsim import Branch, Bus, ThreePhaseNetwork
from lemsim.scenario_io import parse_scenario_dict

S_BASE = 1e5  # 100 kVA base keeps p.u. loads O(0.1) and $/kWh prices O(0.1)


def two_bus_net(z=0.01 + 0.02j, s_base=S_BASE):
    return ThreePhaseNetwork(
        [Bus("pcc", "a", "slack"), Bus("n1", "a")],
        [Branch("pcc", "n1", z=[[z]], phases="a")],
        s_base=s_base,
    )


def three_bus_chain():
    z = [[0.01 + 0.02j]]
    return ThreePhaseNetwork(
        [Bus("pcc", "a", "slack"), Bus("n1", "a"), Bus("n2", "a")],
        [Branch("pcc", "n1", z=z, phases="a"), Branch("n1", "n2", z=z, phases="a")],
        s_base=S_BASE,
    )


def triangle_net(z=0.01 + 0.02j):
    zb = [[z]]
    return ThreePhaseNetwork(
        [Bus("pcc", "a", "slack"), Bus("n1", "a"), Bus("n2", "a")],
        [
            Branch("pcc", "n1", z=zb, phases="a"),
            Branch("n1", "n2", z=zb, phases="a"),
            Branch("n2", "pcc", z=zb, phases="a"),
        ],
        s_base=S_BASE,
    )


def coupled_three_phase_net():
    """2-bus three-phase with mutual coupling between phases."""
    z = np.array(
        [
            [0.02 + 0.05j, 0.005 + 0.012j, 0.004 + 0.01j],
            [0.005 + 0.012j, 0.021 + 0.052j, 0.005 + 0.011j],
            [0.004 + 0.01j, 0.005 + 0.011j, 0.022 + 0.049j],
        ]
    )
    return ThreePhaseNetwork(
        [Bus("pcc", "abc", "slack"), Bus("n1", "abc")],
        [Branch("pcc", "n1", z=z, phases="abc")],
        s_base=S_BASE,
    )


def four_bus_net(z=0.02 + 0.04j, s_base=S_BASE):
    zb = [[z]]
    return ThreePhaseNetwork(
        [Bus("pcc", "a", "slack"), Bus("n1", "a"), Bus("n2", "a"), Bus("n3", "a")],
        [
            Branch("pcc", "n1", z=zb, phases="a"),
            Branch("n1", "n2", z=zb, phases="a"),
            Branch("n1", "n3", z=zb, phases="a"),
        ],
        s_base=s_base,
    )


def branch_dict(from_bus, to_bus, z=0.02 + 0.04j, phases="a"):
    m = len(phases)
    r = (np.eye(m) * z.real).tolist()
    x = (np.eye(m) * z.imag).tolist()
    return {"from": from_bus, "to": to_bus, "phases": phases, "r": r, "x": x}


def smoke_doc(seed=7, horizon=60, xi=1.0):
    """4-bus, 3 SMOs, 2-4 DCAs each. Baseline profiles are constant over the
    horizon (the Eq.-5 SMO bid is backward-looking, so a setpoint riding a
    bid-range edge stays deliverable interval over interval); the temporal
    dynamics come from a stepped LMP series."""

    def const(v):
        return {"constant": [v]}

    return {
        "schema_version": 1,
        "name": "smoke_4bus",
        "network": {
            "s_base_va": S_BASE,
            "v_base_v": 2400.0,
            "units": "pu",
            "buses": [
                {"id": "pcc", "phases": "a", "kind": "slack"},
                {"id": "n1", "phases": "a"},
                {"id": "n2", "phases": "a"},
                {"id": "n3", "phases": "a"},
            ],
            "branches": [
                branch_dict("pcc", "n1"),
                branch_dict("n1", "n2"),
                branch_dict("n1", "n3"),
            ],
        },
        "population": {
            "smos": [
                {"id": "smo1", "bus": "n1", "alpha_p": 0.095, "alpha_q": 0.01,
                 "beta_p": 20.0, "beta_q": 20.0},
                {"id": "smo2", "bus": "n2", "alpha_p": 0.095, "alpha_q": 0.01,
                 "beta_p": 20.0, "beta_q": 20.0},
                {"id": "smo3", "bus": "n3", "alpha_p": 0.095, "alpha_q": 0.01,
                 "beta_p": 20.0, "beta_q": 20.0},
            ],
            "dcas": [
                {"id": "d1", "smo": "smo1", "phases": "a", "kind_p": "load",
                 "kind_q": "load", "commitment": 0.9},
                {"id": "d2", "smo": "smo1", "phases": "a", "kind_p": "generator",
                 "kind_q": "generator", "commitment": 0.7},
                {"id": "d3", "smo": "smo2", "phases": "a", "kind_p": "load",
                 "kind_q": "load", "commitment": 0.8},
                {"id": "d4", "smo": "smo2", "phases": "a", "kind_p": "load",
                 "kind_q": "load", "commitment": 0.5},
                {"id": "d5", "smo": "smo2", "phases": "a", "kind_p": "generator",
                 "kind_q": "generator", "commitment": 0.6},
                {"id": "d6", "smo": "smo3", "phases": "a", "kind_p": "load",
                 "kind_q": "load", "commitment": 0.4},
                {"id": "d7", "smo": "smo3", "phases": "a", "kind_p": "generator",
                 "kind_q": "generator", "commitment": 0.95},
                {"id": "d8", "smo": "smo3", "phases": "a", "kind_p": "load",
                 "kind_q": "load", "commitment": 0.85},
            ],
        },
        "profiles": {
            "units": "pu",
            "series": {
                "d1": {"p": const(-0.25), "q": const(-0.08)},
                "d2": {"p": const(0.10), "q": const(0.03)},
                "d3": {"p": const(-0.18), "q": const(-0.05)},
                "d4": {"p": const(-0.12), "q": const(-0.04)},
                "d5": {"p": const(0.08), "q": const(0.02)},
                "d6": {"p": const(-0.20), "q": const(-0.06)},
                "d7": {"p": const(0.12), "q": const(0.04)},
                "d8": {"p": const(-0.10), "q": const(-0.03)},
            },
        },
        "market": {
            "dt_s_min": 1,
            "dt_p_min": 5,
            "horizon_min": horizon,
            "xi": xi,
            "epsilon": 0.05,
            "v_limits": [0.95, 1.05],
            "theta_window_deg": 15.0,
            "seed": seed,
            "flexibility_range": [0.1, 0.3],
        },
        "prices": {
            "units": "per_kwh",
            "lmp_p": {"steps": [[0, 0.10], [15, 0.12], [30, 0.09], [45, 0.11]]},
            "lmp_q": {"steps": [[0, 0.010], [15, 0.012], [30, 0.009], [45, 0.011]]},
        },
    }


def smoke_scenario(seed=7, horizon=60, xi=1.0):
    return parse_scenario_dict(smoke_doc(seed=seed, horizon=horizon, xi=xi))


def fixed_point_doc():
    """1 SMO, 1 firm DCA (zero flexibility), flat profiles, 2 PM intervals."""
    return {
        "schema_version": 1,
        "name": "fixed_point",
        "network": {
            "s_base_va": S_BASE,
            "v_base_v": 2400.0,
            "units": "pu",
            "buses": [
                {"id": "pcc", "phases": "a", "kind": "slack"},
                {"id": "n1", "phases": "a"},
            ],
            "branches": [branch_dict("pcc", "n1", z=0.01 + 0.02j)],
        },
        "population": {
            "smos": [
                {"id": "smo1", "bus": "n1", "alpha_p": 0.10, "alpha_q": 0.0,
                 "beta_p": 1.0, "beta_q": 1.0}
            ],
            "dcas": [
                {"id": "d1", "smo": "smo1", "phases": "a", "kind_p": "load",
                 "kind_q": "load", "commitment": 1.0, "flex_p": 0.0, "flex_q": 0.0}
            ],
        },
        "profiles": {
            "units": "pu",
            "series": {"d1": {"p": {"constant": [-0.3]}, "q": {"constant": [-0.09]}}},
        },
        "market": {
            "dt_s_min": 1, "dt_p_min": 5, "horizon_min": 10, "xi": 1.0,
            "epsilon": 0.05, "seed": 3,
        },
        "prices": {"units": "per_kwh", "lmp_p": 0.10, "lmp_q": 0.01},
    }


def pareto_doc(xi=1.0, horizon=15):
    """Loaded 4-bus with price-neutral economics (alpha == LMP, small beta) so
    flexibility serves voltage regulation when xi > 0."""
    doc = smoke_doc(horizon=horizon, xi=xi)
    doc["name"] = "pareto_4bus"
    for s in doc["population"]["smos"]:
        # The disutility anchor must rival the generation-cost pull (which the
        # envelope slack decouples from the import cost), or the optimum pins
        # at a bid-range edge for every xi and the sweep degenerates.
        s["alpha_p"] = 0.10
        s["alpha_q"] = 0.01
        s["beta_p"] = 60.0
        s["beta_q"] = 60.0
    # Heavier constant loads, no PV ramps: deeper sag, regulation-dominant.
    series = doc["profiles"]["series"]
    series["d1"] = {"p": {"constant": [-0.35]}, "q": {"constant": [-0.12]}}
    series["d2"] = {"p": {"constant": [0.05]}, "q": {"constant": [0.02]}}
    series["d3"] = {"p": {"constant": [-0.25]}, "q": {"constant": [-0.08]}}
    series["d4"] = {"p": {"constant": [-0.15]}, "q": {"constant": [-0.05]}}
    series["d5"] = {"p": {"constant": [0.06]}, "q": {"constant": [0.02]}}
    series["d6"] = {"p": {"constant": [-0.30]}, "q": {"constant": [-0.10]}}
    series["d7"] = {"p": {"constant": [0.08]}, "q": {"constant": [0.03]}}
    series["d8"] = {"p": {"constant": [-0.12]}, "q": {"constant": [-0.04]}}
    doc["market"]["flexibility_range"] = [0.2, 0.3]
    doc["prices"]["lmp_p"] = 0.10
    doc["prices"]["lmp_q"] = 0.01
    return doc


def pareto_scenario(xi=1.0, horizon=15):
    return parse_scenario_dict(pareto_doc(xi=xi, horizon=horizon))


def coupled_branch_dict(from_bus, to_bus):
    z_self = 0.02 + 0.05j
    z_mut = 0.005 + 0.012j
    r = [[z_self.real if i == j else z_mut.real for j in range(3)] for i in range(3)]
    x = [[z_self.imag if i == j else z_mut.imag for j in range(3)] for i in range(3)]
    return {"from": from_bus, "to": to_bus, "phases": "abc", "r": r, "x": x}


def unbalanced_doc(horizon=15, seed=5, xi=1.0):
    """3-bus, three-phase, mutually coupled branches, unbalanced loads, DCAs on
    phase subsets and with mixed per-commodity kinds."""
    c = lambda vals: {"constant": vals}
    return {
        "schema_version": 1,
        "name": "unbalanced_3bus",
        "network": {
            "s_base_va": S_BASE,
            "v_base_v": 2400.0,
            "units": "pu",
            "buses": [
                {"id": "pcc", "phases": "abc", "kind": "slack"},
                {"id": "n1", "phases": "abc"},
                {"id": "n2", "phases": "abc"},
            ],
            "branches": [
                coupled_branch_dict("pcc", "n1"),
                coupled_branch_dict("n1", "n2"),
            ],
        },
        "population": {
            "smos": [
                {"id": "smo1", "bus": "n1", "alpha_p": 0.095, "alpha_q": 0.01,
                 "beta_p": 20.0, "beta_q": 20.0},
                {"id": "smo2", "bus": "n2", "alpha_p": 0.098, "alpha_q": 0.01,
                 "beta_p": 20.0, "beta_q": 20.0},
            ],
            "dcas": [
                {"id": "d1", "smo": "smo1", "phases": "abc", "kind_p": "load",
                 "kind_q": "load", "commitment": 0.9},
                {"id": "d2", "smo": "smo1", "phases": "a", "kind_p": "generator",
                 "kind_q": "generator", "commitment": 0.7},
                {"id": "d3", "smo": "smo2", "phases": "bc", "kind_p": "load",
                 "kind_q": "load", "commitment": 0.6},
                {"id": "d4", "smo": "smo2", "phases": "abc", "kind_p": "generator",
                 "kind_q": "load", "commitment": 0.8},
            ],
        },
        "profiles": {
            "units": "pu",
            "series": {
                "d1": {"p": c([-0.2, -0.28, -0.24]), "q": c([-0.06, -0.09, -0.07])},
                "d2": {"p": c([0.09]), "q": c([0.03])},
                "d3": {"p": c([-0.16, -0.11]), "q": c([-0.05, -0.03])},
                "d4": {"p": c([0.05, 0.04, 0.06]), "q": c([-0.02, -0.015, -0.02])},
            },
        },
        "market": {
            "dt_s_min": 1, "dt_p_min": 5, "horizon_min": horizon, "xi": xi,
            "epsilon": 0.05, "seed": seed, "flexibility_range": [0.1, 0.3],
        },
        "prices": {
            "units": "per_kwh",
            "lmp_p": {"steps": [[0, 0.10], [10, 0.115]]},
            "lmp_q": {"steps": [[0, 0.010], [10, 0.0115]]},
        },
    }


def unbalanced_scenario(horizon=15, seed=5, xi=1.0):
    return parse_scenario_dict(unbalanced_doc(horizon=horizon, seed=seed, xi=xi))


def deep_sag_doc(horizon=10):
    """Heavier loads pushing the no-LEM voltages below the ANSI band so the
    violation counters engage; regulation-dominant economics as in pareto."""
    doc = pareto_doc(horizon=horizon)
    doc["name"] = "deep_sag_4bus"
    series = doc["profiles"]["series"]
    series["d1"] = {"p": {"constant": [-0.55]}, "q": {"constant": [-0.18]}}
    series["d3"] = {"p": {"constant": [-0.40]}, "q": {"constant": [-0.13]}}
    series["d4"] = {"p": {"constant": [-0.25]}, "q": {"constant": [-0.08]}}
    series["d6"] = {"p": {"constant": [-0.50]}, "q": {"constant": [-0.16]}}
    series["d8"] = {"p": {"constant": [-0.20]}, "q": {"constant": [-0.07]}}
    doc["market"]["xi"] = 10.0
    doc["market"]["flexibility_range"] = [0.25, 0.3]
    return doc


def write_doc(tmp_path, doc, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=1))
    return str(path)


@pytest.fixture
def smoke_doc_fixture():
    return smoke_doc()
