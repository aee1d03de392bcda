import math

import numpy as np
import pytest

from lemsim import (
    Bus,
    Branch,
    ThreePhaseNetwork,
    assemble_ciopf,
    build_admittance,
    build_mce,
    equivalent_rate,
    extract_dlmp,
    power_flow_oracle,
    preprocess_bounds,
    relaxation_gap,
    solve_pm,
)
from lemsim.network import total_losses
from lemsim.primary import (
    BoundsInfeasibleError,
    PmInfeasibleError,
    PmWeights,
    SmoBid,
    VarBounds,
)

from conftest import four_bus_net, two_bus_net


def pm_bid(bus, p0, q0, p_rng, q_rng, alpha_p=8.0, alpha_q=0.5, beta_p=0.0,
           beta_q=0.0, phases="a", smo=None):
    m = len(phases)
    as_arr = lambda v: np.full(m, v) if np.ndim(v) == 0 else np.asarray(v, float)
    return SmoBid(
        smo_id=smo or f"smo_{bus}",
        bus_id=bus,
        phases=phases,
        p0=as_arr(p0), q0=as_arr(q0),
        p_min=as_arr(p_rng[0]), p_max=as_arr(p_rng[1]),
        q_min=as_arr(q_rng[0]), q_max=as_arr(q_rng[1]),
        alpha_p=alpha_p, alpha_q=alpha_q, beta_p=beta_p, beta_q=beta_q,
        p_load0=as_arr(max(0.0, -np.min(as_arr(p0)))),
        q_load0=as_arr(max(0.0, -np.min(as_arr(q0)))),
    )


def two_bus_setup(p0=-0.3, q0=-0.1, width=0.06, beta=0.5):
    net = two_bus_net()
    y = build_admittance(net)
    bid = pm_bid(
        "n1", p0, q0,
        (p0, p0 + width), (q0, q0 + width / 3),
        alpha_p=8.0, alpha_q=0.5, beta_p=beta, beta_q=beta,
    )
    return net, y, [bid]


WEIGHTS = PmWeights(xi=1.0, lmp_p=10.0, lmp_q=1.0)


# ---------------------------------------------------------------------------
# preprocess_bounds
# ---------------------------------------------------------------------------


def test_slack_box_degenerate_at_nominal():
    net, y, bids = two_bus_setup()
    b = preprocess_bounds(net, y, bids)
    k = net.index[("pcc", "a")]
    assert b.vr_lo[k] == b.vr_hi[k] == 1.0
    assert b.vi_lo[k] == b.vi_hi[k] == 0.0


def test_zero_window_box_is_polar_rectangle():
    net, y, bids = two_bus_setup()
    b = preprocess_bounds(net, y, bids, theta_window_deg=0.0, v_limits=(0.95, 1.05))
    k = net.index[("n1", "a")]
    assert b.vr_lo[k] == pytest.approx(0.95)
    assert b.vr_hi[k] == pytest.approx(1.05)
    assert b.vi_lo[k] == pytest.approx(0.0, abs=1e-15)
    assert b.vi_hi[k] == pytest.approx(0.0, abs=1e-15)


def test_current_boxes_contain_newton_sweep():
    # For every P on a 21-point sweep of the bid range, the Newton power-flow
    # currents must lie inside the preprocessed I boxes.
    net = two_bus_net()
    y = build_admittance(net)
    bid = pm_bid("n1", 0.0, 0.0, (-0.2, 0.2), (-0.05, 0.05))
    b = preprocess_bounds(net, y, [bid])
    for p in np.linspace(-0.2, 0.2, 21):
        pf = power_flow_oracle(net, {("n1", "a"): complex(p, 0.0)})
        assert pf.converged
        for k in range(net.n):
            assert b.ir_lo[k] - 1e-12 <= pf.i[k].real <= b.ir_hi[k] + 1e-12
            assert b.ii_lo[k] - 1e-12 <= pf.i[k].imag <= b.ii_hi[k] + 1e-12


def test_sector_hull_matches_sampling_oracle():
    # Axis-aligned hull of an annulus sector vs a dense polar sampling.
    from lemsim.primary import _sector_hull

    rng = np.random.default_rng(3)
    for _ in range(20):
        r_lo = rng.uniform(0.5, 1.0)
        r_hi = r_lo + rng.uniform(0.0, 0.5)
        ang0 = rng.uniform(-math.pi, math.pi)
        window = rng.uniform(0.0, 1.2)
        x_lo, x_hi, y_lo, y_hi = _sector_hull(r_lo, r_hi, ang0 - window, ang0 + window)
        ts = np.linspace(ang0 - window, ang0 + window, 4001)
        pts = np.concatenate([r_lo * np.exp(1j * ts), r_hi * np.exp(1j * ts)])
        tol = 1e-6
        assert x_lo <= pts.real.min() + tol and x_hi >= pts.real.max() - tol
        assert y_lo <= pts.imag.min() + tol and y_hi >= pts.imag.max() - tol
        # Tight: the hull edges are attained by sector points.
        assert x_lo >= pts.real.min() - 1e-3 and x_hi <= pts.real.max() + 1e-3
        assert y_lo >= pts.imag.min() - 1e-3 and y_hi <= pts.imag.max() + 1e-3


def test_mixed_phase_network_assembles_and_solves():
    # Slack on abc, load bus on ab only: indexing, Ohm rows and node means
    # must respect the per-bus phase subsets.
    z = np.array([[0.02 + 0.05j, 0.005 + 0.012j], [0.005 + 0.012j, 0.021 + 0.052j]])
    net = ThreePhaseNetwork(
        [Bus("pcc", "abc", "slack"), Bus("n1", "ab")],
        [Branch("pcc", "n1", z=z, phases="ab")],
        s_base=1e5,
    )
    y = build_admittance(net)
    bid = pm_bid("n1", -0.15, -0.05, (-0.15, -0.11), (-0.05, -0.037),
                 beta_p=0.3, beta_q=0.3, phases="ab")
    bounds = preprocess_bounds(net, y, [bid])
    sol = solve_pm(assemble_ciopf(net, y, [bid], bounds, WEIGHTS))
    assert net.n == 5
    assert sol.p.shape == (5,)
    d = extract_dlmp(sol, y)
    assert set(d.node_means) == {"pcc", "n1"}
    gap = relaxation_gap(sol, net)
    assert gap.max_bilinear < 0.5
    # The phase-c slack injection has no branch to feed: its current is zero.
    k_c = net.index[("pcc", "c")]
    assert abs(sol.ir[k_c]) < 1e-7 and abs(sol.ii[k_c]) < 1e-7


def test_bounds_report_names_node_when_nominal_excluded():
    net, y, bids = two_bus_setup()
    with pytest.raises(BoundsInfeasibleError, match="n1"):
        preprocess_bounds(net, y, bids, theta_window_deg=0.0, v_limits=(1.2, 1.3))


def test_bounds_report_when_ampacity_starves_baseline_current():
    net = ThreePhaseNetwork(
        [Bus("pcc", "a", "slack"), Bus("n1", "a")],
        [Branch("pcc", "n1", z=[[0.01 + 0.02j]], phases="a", i_max=1e-6)],
        s_base=1e5,
    )
    y = build_admittance(net)
    bid = pm_bid("n1", -0.3, -0.1, (-0.3, -0.24), (-0.1, -0.08))
    with pytest.raises(BoundsInfeasibleError, match="baseline current"):
        preprocess_bounds(net, y, [bid])


# ---------------------------------------------------------------------------
# McCormick envelope
# ---------------------------------------------------------------------------


def _mce_feasible_w(rows, x, y):
    """Feasible w interval implied by the four rows at a fixed (x, y)."""
    lo, hi = -math.inf, math.inf
    for cw, cx, cy, rhs in rows:
        margin = rhs - cx * x - cy * y
        if cw < 0:  # -w <= margin  ->  w >= -margin
            lo = max(lo, -margin)
        else:
            hi = min(hi, margin)
    return lo, hi


def test_mce_degenerate_x_collapses_to_linear():
    rows = build_mce((2.0, 2.0), (-1.0, 3.0))
    for yv in (-1.0, 0.0, 1.3, 3.0):
        lo, hi = _mce_feasible_w(rows, 2.0, yv)
        assert lo == pytest.approx(2 * yv, abs=1e-12)
        assert hi == pytest.approx(2 * yv, abs=1e-12)


def test_mce_feasible_interval_matches_vertex_hull():
    # Unit box at (0.5, 0.5): the convex hull of the corner points
    # (x, y, xy) gives w in [0, 0.5], containing the true 0.25.
    rows = build_mce((0.0, 1.0), (0.0, 1.0))
    lo, hi = _mce_feasible_w(rows, 0.5, 0.5)
    assert lo == pytest.approx(0.0, abs=1e-12)
    assert hi == pytest.approx(0.5, abs=1e-12)
    assert lo <= 0.25 <= hi


def test_mce_corner_forces_product():
    rows = build_mce((-0.4, 1.1), (0.3, 2.0))
    lo, hi = _mce_feasible_w(rows, 1.1, 2.0)
    assert lo == pytest.approx(2.2, abs=1e-12)
    assert hi == pytest.approx(2.2, abs=1e-12)


def test_mce_soundness_random_sample():
    rng = np.random.default_rng(5)
    for _ in range(500):
        x_lo, x_w = rng.uniform(-2, 2), rng.uniform(0, 2)
        y_lo, y_w = rng.uniform(-2, 2), rng.uniform(0, 2)
        rows = build_mce((x_lo, x_lo + x_w), (y_lo, y_lo + y_w))
        x = rng.uniform(x_lo, x_lo + x_w)
        y = rng.uniform(y_lo, y_lo + y_w)
        w = x * y
        for cw, cx, cy, rhs in rows:
            assert cw * w + cx * x + cy * y <= rhs + 1e-12


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def test_structural_census_two_bus():
    net, y, bids = two_bus_setup()
    pm = assemble_ciopf(net, y, bids, preprocess_bounds(net, y, bids), WEIGHTS)
    # 2 node-phases x (6 primal + 4 auxiliary) variables.
    assert pm.prog.nvar == 20
    h, q, a_eq, b_eq, eq_tags, a_in, b_in, in_tags = pm.prog.matrices()
    # Equalities: 2 slack pins + 2 ohm_re + 2 ohm_im + 2 p_def + 2 q_def = 10.
    assert a_eq.shape[0] == 10
    # Inequalities: 16 MCE rows per node-phase = 32, plus finite boxes:
    # P,Q at n1 (4), V^R,V^I at n1 (4; slack V is equality-pinned),
    # I^R,I^I at both node-phases (8) = 48 total.
    assert a_in.shape[0] == 48
    assert eq_tags.count("ohm_re") == 2 and eq_tags.count("p_def") == 2
    assert in_tags.count("mce") == 32


def test_xi_zero_removes_electrical_terms():
    net, y, bids = two_bus_setup(beta=0.5)
    pm = assemble_ciopf(net, y, bids, preprocess_bounds(net, y, bids),
                        PmWeights(xi=0.0, lmp_p=10.0, lmp_q=1.0))
    v_idx = set(pm.prog.indices("VR").tolist()) | set(pm.prog.indices("VI").tolist())
    for (i, j) in pm.prog._hess:
        assert i not in v_idx and j not in v_idx
    for i in pm.prog._lin:
        assert i not in v_idx


def test_generation_cost_coefficients_pcc_vs_alpha():
    # The PCC row carries the LMP; other nodes carry their alpha.
    net, y, _ = two_bus_setup()
    bid = pm_bid("n1", -0.3, -0.1, (-0.3, -0.24), (-0.1, -0.08),
                 alpha_p=8.0, alpha_q=0.5, beta_p=0.0, beta_q=0.0)
    pm = assemble_ciopf(net, y, [bid], preprocess_bounds(net, y, [bid]),
                        PmWeights(xi=0.0, lmp_p=10.0, lmp_q=1.0))
    p_idx = pm.prog.indices("P")
    k_pcc = net.index[("pcc", "a")]
    k_n1 = net.index[("n1", "a")]
    assert pm.prog._lin[p_idx[k_pcc]] == pytest.approx(10.0)
    assert pm.prog._lin[p_idx[k_n1]] == pytest.approx(8.0)


def test_missing_bid_rejected():
    net, y, _ = two_bus_setup()
    with pytest.raises(ValueError, match="missing SMO bid"):
        assemble_ciopf(net, y, [], preprocess_bounds(net, y, []), WEIGHTS)


# ---------------------------------------------------------------------------
# solve + gap audit
# ---------------------------------------------------------------------------


def test_no_load_network_solves_to_nominal():
    net, y, _ = two_bus_setup()
    bid = pm_bid("n1", 0.0, 0.0, (0.0, 0.0), (0.0, 0.0), alpha_p=0.0, alpha_q=0.0)
    sol = solve_pm(assemble_ciopf(net, y, [bid], preprocess_bounds(net, y, [bid]), WEIGHTS))
    assert abs(sol.objective) < 1e-7
    assert np.max(np.abs(sol.voltages() - net.nominal_voltages())) < 1e-6
    assert np.max(np.abs(sol.currents())) < 1e-6
    assert sol.objective_breakdown["losses"] < 1e-10
    gap = relaxation_gap(sol, net)
    assert gap.max_bilinear < 1e-6


def _newton_reference(net, y, p_load, q_load):
    pf = power_flow_oracle(net, {("n1", "a"): complex(p_load, q_load)}, y_bus=y)
    assert pf.converged
    return pf


def _bounds_around_point(net, v, i, width, v_limits=(0.95, 1.05)):
    half = width / 2.0
    n = net.n
    slack = set(net.slack_indices.tolist())
    vr_lo, vr_hi = v.real - half, v.real + half
    vi_lo, vi_hi = v.imag - half, v.imag + half
    for k in slack:
        vr_lo[k] = vr_hi[k] = v[k].real
        vi_lo[k] = vi_hi[k] = v[k].imag
    return VarBounds(
        vr_lo=vr_lo, vr_hi=vr_hi, vi_lo=vi_lo, vi_hi=vi_hi,
        ir_lo=i.real - half, ir_hi=i.real + half,
        ii_lo=i.imag - half, ii_hi=i.imag + half,
        v_limits=v_limits,
    )


def test_fixed_load_against_newton_and_tightening():
    net = two_bus_net()
    y = build_admittance(net)
    p_load, q_load = -0.25, -0.08
    bid = pm_bid("n1", p_load, q_load, (p_load, p_load), (q_load, q_load))
    pf = _newton_reference(net, y, p_load, q_load)

    # Default preprocessing: the slack injection agrees within a loose margin
    # set by the (reported) relaxation gap of the wide boxes.
    sol = solve_pm(assemble_ciopf(net, y, [bid], preprocess_bounds(net, y, [bid]), WEIGHTS))
    gap = relaxation_gap(sol, net)
    k_pcc = net.index[("pcc", "a")]
    assert gap.max_bilinear > 0.0
    assert abs(sol.p[k_pcc] - pf.injections()[k_pcc].real) < 0.1

    # Boxes of width 1e-3 around the Newton point: gap and slack mismatch < 1e-3.
    b = _bounds_around_point(net, pf.v, pf.i, 1e-3)
    sol_tight = solve_pm(assemble_ciopf(net, y, [bid], b, WEIGHTS))
    gap_tight = relaxation_gap(sol_tight, net)
    assert gap_tight.max_bilinear < 1e-3
    assert abs(sol_tight.p[k_pcc] - pf.injections()[k_pcc].real) < 1e-3


def test_gap_convergence_monotone_in_box_width():
    net = two_bus_net()
    y = build_admittance(net)
    p_load, q_load = -0.25, -0.08
    bid = pm_bid("n1", p_load, q_load, (p_load, p_load), (q_load, q_load))
    pf = _newton_reference(net, y, p_load, q_load)
    gaps = []
    for width in (1e-1, 1e-2, 1e-3):
        b = _bounds_around_point(net, pf.v, pf.i, width)
        sol = solve_pm(assemble_ciopf(net, y, [bid], b, WEIGHTS))
        gaps.append(relaxation_gap(sol, net).max_bilinear)
    assert gaps[0] >= gaps[1] >= gaps[2]
    assert gaps[2] < 1e-3


def test_degenerate_boxes_give_zero_gap():
    net = two_bus_net()
    y = build_admittance(net)
    p_load, q_load = -0.2, -0.05
    pf = _newton_reference(net, y, p_load, q_load)
    s_pcc = pf.injections()[net.index[("pcc", "a")]]
    bid = pm_bid("n1", p_load, q_load, (p_load - 1e-9, p_load + 1e-9),
                 (q_load - 1e-9, q_load + 1e-9))
    b = _bounds_around_point(net, pf.v, pf.i, 0.0)
    sol = solve_pm(assemble_ciopf(net, y, [bid], b, WEIGHTS))
    gap = relaxation_gap(sol, net)
    assert gap.max_bilinear < 1e-8
    assert abs(sol.p[net.index[("pcc", "a")]] - s_pcc.real) < 1e-7


def test_gap_report_ring_and_ampacity_arms():
    import dataclasses

    net, y, bids = two_bus_setup(p0=-0.3, q0=-0.1)
    sol = solve_pm(assemble_ciopf(net, y, bids, preprocess_bounds(net, y, bids), WEIGHTS))
    base = relaxation_gap(sol, net)
    assert base.ring_violation == 0.0 and base.ampacity_violation == 0.0
    # Tightened magnitude band: the sagging solution now violates the ring.
    sol_tight = dataclasses.replace(
        sol, bounds=dataclasses.replace(sol.bounds, v_limits=(0.999, 1.001))
    )
    assert relaxation_gap(sol_tight, net).ring_violation > 0.0
    # A starved ampacity on the same network flags the branch current.
    from lemsim import Branch, Bus, ThreePhaseNetwork

    small = ThreePhaseNetwork(
        [Bus("pcc", "a", "slack"), Bus("n1", "a")],
        [Branch("pcc", "n1", z=[[0.01 + 0.02j]], phases="a", i_max=1e-3)],
        s_base=1e5,
    )
    assert relaxation_gap(sol, small).ampacity_violation > 0.0


def test_loss_identity_and_objective_consistency():
    net, y, bids = two_bus_setup()
    pm = assemble_ciopf(net, y, bids, preprocess_bounds(net, y, bids), WEIGHTS)
    sol = solve_pm(pm)
    # Reported loss term equals an independent recomputation from the primal
    # voltages, and the term breakdown reproduces the solver objective.
    recomputed = total_losses(net, sol.voltages())
    assert abs(sol.objective_breakdown["losses"] - recomputed) < 1e-10
    assert sol.objective == pytest.approx(sol.objective_breakdown["total"], abs=1e-7)


def test_infeasible_relaxation_raises_with_bounds():
    net = two_bus_net()
    y = build_admittance(net)
    # Demand a large fixed injection while boxing currents near zero.
    bid = pm_bid("n1", 0.5, 0.0, (0.5, 0.5), (0.0, 0.0))
    vnom = net.nominal_voltages()
    b = _bounds_around_point(net, vnom, np.zeros(net.n, dtype=complex), 1e-4)
    with pytest.raises(PmInfeasibleError) as err:
        solve_pm(assemble_ciopf(net, y, [bid], b, WEIGHTS))
    assert err.value.bounds is b


# ---------------------------------------------------------------------------
# dLMP extraction
# ---------------------------------------------------------------------------


def test_dlmp_identity_admittance():
    net, y, bids = two_bus_setup()
    sol = solve_pm(assemble_ciopf(net, y, bids, preprocess_bounds(net, y, bids), WEIGHTS))
    d = extract_dlmp(sol, np.eye(net.n, dtype=complex))
    assert np.allclose(d.lambda_v, sol.lambda_i)


def test_dlmp_matches_ohm_constraint_sensitivity():
    # Central finite differences of the optimal objective under a voltage
    # offset inside Ohm's law: d(phi)/dvR = Re(lambda_V) and
    # d(phi)/dvI = -Im(lambda_V).
    net, y, bids = two_bus_setup()
    b = preprocess_bounds(net, y, bids)
    sol = solve_pm(assemble_ciopf(net, y, bids, b, WEIGHTS))
    lam_v = extract_dlmp(sol, y).lambda_v
    h = 1e-6
    for k in range(net.n):
        for unit, expected in ((1.0, lam_v[k].real), (1j, -lam_v[k].imag)):
            off = np.zeros(net.n, dtype=complex)
            off[k] = h * unit
            up = solve_pm(assemble_ciopf(net, y, bids, b, WEIGHTS, ohm_voltage_offset=off)).objective
            off[k] = -h * unit
            dn = solve_pm(assemble_ciopf(net, y, bids, b, WEIGHTS, ohm_voltage_offset=off)).objective
            assert (up - dn) / (2 * h) == pytest.approx(expected, abs=1e-6)


def test_dlmp_phase_symmetry_on_symmetric_network():
    # Per-phase identical nominals and a diagonal impedance block make the
    # assembled program exactly symmetric under phase permutation, so the
    # per-phase energy prices must coincide.
    vnom = np.ones(3, dtype=complex)
    z = np.diag([0.02 + 0.05j] * 3)
    net = ThreePhaseNetwork(
        [
            Bus("pcc", "abc", "slack", v_nominal=vnom),
            Bus("n1", "abc", v_nominal=vnom),
        ],
        [Branch("pcc", "n1", z=z, phases="abc")],
        s_base=1e5,
    )
    y = build_admittance(net)
    bid = pm_bid("n1", -0.2, -0.06, (-0.2, -0.15), (-0.06, -0.045),
                 beta_p=0.3, beta_q=0.3, phases="abc")
    sol = solve_pm(assemble_ciopf(net, y, [bid], preprocess_bounds(net, y, [bid]), WEIGHTS))
    lam = sol.lambda_p[net.bus_indices("n1")]
    assert np.max(np.abs(lam - lam[0])) < 1e-8


def test_voltage_regulation_pareto_in_xi():
    net = four_bus_net()
    y = build_admittance(net)
    bids = [
        pm_bid("n1", -0.35, -0.1, (-0.35, -0.25), (-0.1, -0.07),
               alpha_p=10.0, alpha_q=1.0, beta_p=0.05, beta_q=0.05),
        pm_bid("n2", -0.3, -0.09, (-0.3, -0.21), (-0.09, -0.06),
               alpha_p=10.0, alpha_q=1.0, beta_p=0.05, beta_q=0.05),
        pm_bid("n3", -0.25, -0.08, (-0.25, -0.18), (-0.08, -0.055),
               alpha_p=10.0, alpha_q=1.0, beta_p=0.05, beta_q=0.05),
    ]
    b = preprocess_bounds(net, y, bids)
    voltreg = []
    for xi in (0.0, 0.1, 1.0, 10.0):
        sol = solve_pm(assemble_ciopf(net, y, bids, b, PmWeights(xi=xi, lmp_p=10.0, lmp_q=1.0)))
        voltreg.append(sol.objective_breakdown["voltage_regulation"])
    for a, c in zip(voltreg, voltreg[1:]):
        assert c <= a + 1e-8


# ---------------------------------------------------------------------------
# relaxation lower bound (grid-search oracle over the windowed true problem)
# ---------------------------------------------------------------------------


def true_optimum_two_bus(net, y, bid, bounds, weights, resolution=1e-3):
    """Dense enumeration of (V^R, V^I) at the non-slack node.

    I = YV, P and Q formed bilinearly (exact), constraints: bid ranges and the
    voltage-magnitude ring; the search region is the angle-windowed V box the
    relaxation itself uses, so every feasible grid point is feasible for the
    relaxed program as well.
    """
    k = net.index[("n1", "a")]
    k0 = net.index[("pcc", "a")]
    vr = np.arange(bounds.vr_lo[k], bounds.vr_hi[k] + resolution / 2, resolution)
    vi = np.arange(bounds.vi_lo[k], bounds.vi_hi[k] + resolution / 2, resolution)
    vr_g, vi_g = np.meshgrid(vr, vi, indexing="ij")
    v1 = vr_g + 1j * vi_g
    v0 = net.nominal_voltages()[k0]
    i0 = y[k0, k0] * v0 + y[k0, k] * v1
    i1 = y[k, k0] * v0 + y[k, k] * v1
    p1 = v1.real * i1.real + v1.imag * i1.imag
    q1 = -v1.real * i1.imag + v1.imag * i1.real
    p0 = v0.real * i0.real + v0.imag * i0.imag
    q0 = -v0.real * i0.imag + v0.imag * i0.real
    vmag = np.abs(v1)
    feasible = (
        (p1 >= bid.p_min[0]) & (p1 <= bid.p_max[0])
        & (q1 >= bid.q_min[0]) & (q1 <= bid.q_max[0])
        & (vmag >= bounds.v_limits[0]) & (vmag <= bounds.v_limits[1])
    )
    assert np.any(feasible), "oracle grid found no feasible point"
    branch = net.branches[0]
    y_br = branch.admittance_block()[0, 0]
    r_br = branch.series_resistance()[0]
    losses = r_br * np.abs(y_br * (v0 - v1)) ** 2
    voltreg = (v1.real - 1.0) ** 2 + v1.imag**2
    disutil = bid.beta_p * (p1 - bid.p0[0]) ** 2 + bid.beta_q * (q1 - bid.q0[0]) ** 2
    gen_cost = (
        weights.lmp_p * p0 + weights.lmp_q * q0
        + bid.alpha_p * (p1 + bid.p_load0[0]) + bid.alpha_q * (q1 + bid.q_load0[0])
    )
    obj = disutil + gen_cost + weights.xi * (losses + voltreg)
    return float(np.min(obj[feasible]))


def test_relaxed_objective_lower_bounds_true_optimum():
    net, y, bids = two_bus_setup(p0=-0.3, q0=-0.1, width=0.08, beta=0.4)
    b = preprocess_bounds(net, y, bids)
    sol = solve_pm(assemble_ciopf(net, y, bids, b, WEIGHTS))
    true_opt = true_optimum_two_bus(net, y, bids[0], b, WEIGHTS)
    assert sol.objective <= true_opt + 1e-6


# ---------------------------------------------------------------------------
# equivalent rate
# ---------------------------------------------------------------------------


def _fake_solution_for_rates(net, p, q):
    y = build_admittance(net)
    bid = pm_bid("n1", p, q, (p, p), (q, q))
    return solve_pm(assemble_ciopf(net, y, [bid], preprocess_bounds(net, y, [bid]), WEIGHTS))


def test_equivalent_rate_single_term():
    net = two_bus_net()
    sol = _fake_solution_for_rates(net, -0.1, 0.0)
    sol.p = np.array([0.0, 2.0])
    sol.q = np.array([0.0, 0.0])
    sol.vr = np.array([1.0, 1.0])
    sol.vi = np.array([0.0, 0.0])
    d = extract_dlmp(sol, build_admittance(net))
    d.node_means["n1"] = (1.0, 0.0, 0.0)
    rates = equivalent_rate(d, sol)
    assert rates["n1"] == pytest.approx(1.0)


def test_equivalent_rate_arithmetic_example():
    net = two_bus_net()
    sol = _fake_solution_for_rates(net, -0.1, 0.0)
    sol.p = np.array([0.0, 1.0])
    sol.q = np.array([0.0, 0.2])
    sol.vr = np.array([1.0, 1.02])
    sol.vi = np.array([0.0, 0.01])
    d = extract_dlmp(sol, build_admittance(net))
    d.node_means["n1"] = (1.0, 0.1, 0.5)
    rates = equivalent_rate(d, sol)
    # (1*1 + 0.1*0.2 + 0.5*(0.02 + 0.01)) / 1 = 1.035
    assert rates["n1"] == pytest.approx(1.035)


def test_equivalent_rate_undefined_marker():
    net = two_bus_net()
    sol = _fake_solution_for_rates(net, -0.1, 0.0)
    sol.p = np.array([0.5, 0.0])
    d = extract_dlmp(sol, build_admittance(net))
    rates = equivalent_rate(d, sol)
    assert math.isnan(rates["n1"])
