"""Three-phase network model: admittance/incidence assembly and a Newton power-flow solver.

All electrical quantities are per-unit on (s_base, v_base). Networks are treated
as immutable after construction and are safe to share read-only across
concurrent market clearings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PHASES = "abc"

# Nominal phase angles (radians) for a..c in a direct-sequence system.
NOMINAL_ANGLES = {
    "a": 0.0,
    "b": -2.0 * math.pi / 3.0,
    "c": 2.0 * math.pi / 3.0,
}


class NetworkValidationError(ValueError):
    """Raised when a network fails structural validation."""


def default_nominal(phases: str) -> np.ndarray:
    """Unit-magnitude nominal phasors (1 p.u. at the standard phase angles)."""
    return np.array([np.exp(1j * NOMINAL_ANGLES[p]) for p in phases], dtype=complex)


def _check_phases(phases: str, where: str) -> None:
    if not phases:
        raise NetworkValidationError(f"{where}: empty phase set")
    seen = set()
    for p in phases:
        if p not in PHASES:
            raise NetworkValidationError(f"{where}: unknown phase {p!r}")
        if p in seen:
            raise NetworkValidationError(f"{where}: duplicate phase {p!r}")
        seen.add(p)
    if list(phases) != [p for p in PHASES if p in seen]:
        raise NetworkValidationError(f"{where}: phases must be in 'abc' order, got {phases!r}")


@dataclass
class Bus:
    """A network bus carrying a subset of the three phases.

    v_nominal, when given, must align with `phases`; defaults to unit phasors
    at the standard angles (1∠0°, 1∠-120°, 1∠120°).
    """

    id: str
    phases: str = "abc"
    kind: str = "pq"  # "slack" | "pq"
    v_nominal: np.ndarray | None = None

    def __post_init__(self) -> None:
        _check_phases(self.phases, f"bus {self.id!r}")
        if self.kind not in ("slack", "pq"):
            raise NetworkValidationError(f"bus {self.id!r}: kind must be 'slack' or 'pq'")
        if self.v_nominal is None:
            self.v_nominal = default_nominal(self.phases)
        else:
            self.v_nominal = np.asarray(self.v_nominal, dtype=complex)
            if self.v_nominal.shape != (len(self.phases),):
                raise NetworkValidationError(
                    f"bus {self.id!r}: v_nominal must have one entry per phase"
                )


@dataclass
class Branch:
    """Series branch between two buses.

    z is the per-phase-pair impedance block (p x p complex, p = len(phases));
    off-diagonal entries model inter-phase mutual coupling. i_max is the
    per-phase ampacity (p.u.), used only for audits.
    """

    from_bus: str
    to_bus: str
    z: np.ndarray
    phases: str = "abc"
    i_max: np.ndarray | float = math.inf

    def __post_init__(self) -> None:
        _check_phases(self.phases, f"branch {self.from_bus}-{self.to_bus}")
        p = len(self.phases)
        self.z = np.asarray(self.z, dtype=complex)
        if self.z.shape == ():
            self.z = self.z.reshape(1, 1)
        if self.z.shape != (p, p):
            raise NetworkValidationError(
                f"branch {self.from_bus}-{self.to_bus}: z must be {p}x{p}"
            )
        if not np.allclose(self.z, self.z.T, atol=1e-12):
            raise NetworkValidationError(
                f"branch {self.from_bus}-{self.to_bus}: z must be symmetric"
            )
        if np.any(np.abs(np.diag(self.z)) == 0.0):
            raise NetworkValidationError(
                f"branch {self.from_bus}-{self.to_bus}: zero diagonal impedance"
            )
        if np.isscalar(self.i_max) or np.ndim(self.i_max) == 0:
            self.i_max = np.full(p, float(self.i_max))
        else:
            self.i_max = np.asarray(self.i_max, dtype=float)
            if self.i_max.shape != (p,):
                raise NetworkValidationError(
                    f"branch {self.from_bus}-{self.to_bus}: i_max must have one entry per phase"
                )
        if np.any(self.i_max <= 0):
            raise NetworkValidationError(
                f"branch {self.from_bus}-{self.to_bus}: i_max must be positive"
            )

    def admittance_block(self) -> np.ndarray:
        """Inverse of the impedance block; raises on singular z."""
        try:
            y = np.linalg.inv(self.z)
        except np.linalg.LinAlgError as exc:
            raise NetworkValidationError(
                f"branch {self.from_bus}-{self.to_bus}: singular impedance block"
            ) from exc
        if not np.all(np.isfinite(y)):
            raise NetworkValidationError(
                f"branch {self.from_bus}-{self.to_bus}: singular impedance block"
            )
        return y

    def series_resistance(self) -> np.ndarray:
        """Per-phase series resistance Re(z_phi_phi), used by the loss objective."""
        return np.real(np.diag(self.z)).copy()


class ThreePhaseNetwork:
    """Validated bus/branch collection with a fixed node-phase indexing.

    Node-phases are ordered bus-by-bus (in construction order), phase a<b<c
    within a bus. Exactly one slack bus is required; meshes are allowed.
    """

    def __init__(
        self,
        buses: list[Bus],
        branches: list[Branch],
        s_base: float = 1e6,
        v_base: float = 2400.0,
    ) -> None:
        if s_base <= 0 or v_base <= 0:
            raise NetworkValidationError("s_base and v_base must be positive")
        self.buses = list(buses)
        self.branches = list(branches)
        self.s_base = float(s_base)
        self.v_base = float(v_base)

        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkValidationError("bus ids must be unique")
        self.bus_by_id = {b.id: b for b in self.buses}

        slacks = [b for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise NetworkValidationError(
                f"exactly one slack bus required, found {len(slacks)}"
            )
        self.slack_id = slacks[0].id

        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in self.bus_by_id:
                    raise NetworkValidationError(
                        f"branch {br.from_bus}-{br.to_bus}: unknown bus {end!r}"
                    )
            if br.from_bus == br.to_bus:
                raise NetworkValidationError(
                    f"branch {br.from_bus}-{br.to_bus}: self loop"
                )
            for p in br.phases:
                if p not in self.bus_by_id[br.from_bus].phases or p not in self.bus_by_id[br.to_bus].phases:
                    raise NetworkValidationError(
                        f"branch {br.from_bus}-{br.to_bus}: phase {p!r} missing at an endpoint"
                    )

        self._check_connected()

        self.node_phases: list[tuple[str, str]] = [
            (b.id, p) for b in self.buses for p in b.phases
        ]
        self.index: dict[tuple[str, str], int] = {
            np_: k for k, np_ in enumerate(self.node_phases)
        }
        self.n = len(self.node_phases)
        self.slack_indices = np.array(
            [self.index[(self.slack_id, p)] for p in self.bus_by_id[self.slack_id].phases]
        )

    def _check_connected(self) -> None:
        if not self.buses:
            raise NetworkValidationError("network has no buses")
        adj: dict[str, set[str]] = {b.id: set() for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        seen = {self.buses[0].id}
        stack = [self.buses[0].id]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if len(seen) != len(self.buses):
            missing = sorted(set(adj) - seen)
            raise NetworkValidationError(f"network not connected; unreachable buses {missing}")

    def phase_index(self, bus_id: str, phase: str) -> int:
        return self.index[(bus_id, phase)]

    def bus_indices(self, bus_id: str) -> np.ndarray:
        bus = self.bus_by_id[bus_id]
        return np.array([self.index[(bus_id, p)] for p in bus.phases])

    def nominal_voltages(self) -> np.ndarray:
        """Nominal complex voltage per node-phase."""
        v = np.empty(self.n, dtype=complex)
        for b in self.buses:
            v[self.bus_indices(b.id)] = b.v_nominal
        return v

    @property
    def s_base_kw(self) -> float:
        return self.s_base / 1e3


def build_admittance(net: ThreePhaseNetwork) -> np.ndarray:
    """Assemble the node-phase bus admittance matrix Y (dense complex).

    Each branch block y = z^-1 stamps +y on (from,from)/(to,to) and -y on the
    off-diagonal blocks. Shunt-free by construction, so per-phase row sums over
    a branch's stamp are zero and Y is symmetric.
    """
    y_bus = np.zeros((net.n, net.n), dtype=complex)
    for br in net.branches:
        y = br.admittance_block()
        fi = np.array([net.index[(br.from_bus, p)] for p in br.phases])
        ti = np.array([net.index[(br.to_bus, p)] for p in br.phases])
        y_bus[np.ix_(fi, fi)] += y
        y_bus[np.ix_(ti, ti)] += y
        y_bus[np.ix_(fi, ti)] -= y
        y_bus[np.ix_(ti, fi)] -= y
    return y_bus


def build_incidence(net: ThreePhaseNetwork) -> tuple[np.ndarray, list[tuple[int, str]]]:
    """Signed branch-phase x node-phase incidence matrix A (+1 at from, -1 at to).

    Returns (A, rows) with rows listing (branch_index, phase) per row, so that
    nodal currents satisfy I_nodal = A.T @ I_branch for any branch-current
    assignment.
    """
    rows: list[tuple[int, str]] = []
    for bi, br in enumerate(net.branches):
        for p in br.phases:
            rows.append((bi, p))
    a = np.zeros((len(rows), net.n))
    for r, (bi, p) in enumerate(rows):
        br = net.branches[bi]
        a[r, net.index[(br.from_bus, p)]] = 1.0
        a[r, net.index[(br.to_bus, p)]] = -1.0
    return a, rows


@dataclass
class PowerFlowResult:
    """Newton power-flow outcome. `converged` must be checked before use."""

    v: np.ndarray  # complex voltage per node-phase
    i: np.ndarray  # complex nodal current injection per node-phase
    converged: bool
    iterations: int
    max_mismatch: float

    def injections(self) -> np.ndarray:
        """Complex power S = V * conj(I) per node-phase."""
        return self.v * np.conj(self.i)


def _as_injection_array(net: ThreePhaseNetwork, injections) -> np.ndarray:
    if isinstance(injections, dict):
        s = np.zeros(net.n, dtype=complex)
        for key, val in injections.items():
            s[net.index[key]] = val
        return s
    s = np.asarray(injections, dtype=complex)
    if s.shape != (net.n,):
        raise ValueError(f"injections must have length {net.n}")
    return s.copy()


def power_flow_oracle(
    net: ThreePhaseNetwork,
    injections,
    y_bus: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> PowerFlowResult:
    """Full Newton-Raphson power flow in rectangular coordinates.

    Slack node-phase voltages are fixed at nominal; `injections` gives the
    complex power S (p.u., generation positive) at the remaining node-phases
    (slack entries ignored). Non-convergence is reported via the result flag,
    never silently.

    The mismatch is M = S_spec - diag(V) conj(Y V) over non-slack node-phases;
    iteration stops when ||M||_inf < tol.
    """
    if y_bus is None:
        y_bus = build_admittance(net)
    s_spec = _as_injection_array(net, injections)

    v = net.nominal_voltages().copy()
    free = np.array([k for k in range(net.n) if k not in set(net.slack_indices.tolist())])
    m = len(free)
    if m == 0:
        i = y_bus @ v
        return PowerFlowResult(v=v, i=i, converged=True, iterations=0, max_mismatch=0.0)

    yf = y_bus[np.ix_(free, free)]
    iterations = 0
    mismatch_norm = math.inf
    for iterations in range(max_iter + 1):
        i_nodal = y_bus @ v
        s_calc = v * np.conj(i_nodal)
        mis = s_spec[free] - s_calc[free]
        mismatch_norm = float(np.max(np.abs(mis))) if m else 0.0
        if mismatch_norm < tol:
            return PowerFlowResult(
                v=v, i=i_nodal, converged=True, iterations=iterations,
                max_mismatch=mismatch_norm,
            )
        if iterations == max_iter:
            break
        # dS_k/dVR_m = delta_km conj(I_k) + V_k conj(Y_km)
        # dS_k/dVI_m = j delta_km conj(I_k) - j V_k conj(Y_km)
        vk = v[free]
        ik = i_nodal[free]
        vy = vk[:, None] * np.conj(yf)
        d_vr = np.diag(np.conj(ik)) + vy
        d_vi = 1j * np.diag(np.conj(ik)) - 1j * vy
        jac = np.block(
            [
                [np.real(d_vr), np.real(d_vi)],
                [np.imag(d_vr), np.imag(d_vi)],
            ]
        )
        rhs = np.concatenate([np.real(mis), np.imag(mis)])
        try:
            step = np.linalg.solve(jac, rhs)
        except np.linalg.LinAlgError:
            return PowerFlowResult(
                v=v, i=i_nodal, converged=False, iterations=iterations,
                max_mismatch=mismatch_norm,
            )
        if not np.all(np.isfinite(step)):
            return PowerFlowResult(
                v=v, i=i_nodal, converged=False, iterations=iterations,
                max_mismatch=mismatch_norm,
            )
        v[free] += step[:m] + 1j * step[m:]
        if np.max(np.abs(v)) > 1e3:
            return PowerFlowResult(
                v=v, i=y_bus @ v, converged=False, iterations=iterations,
                max_mismatch=mismatch_norm,
            )

    return PowerFlowResult(
        v=v, i=y_bus @ v, converged=False, iterations=iterations,
        max_mismatch=mismatch_norm,
    )


def branch_currents(net: ThreePhaseNetwork, v: np.ndarray) -> tuple[np.ndarray, list[tuple[int, str]]]:
    """Branch currents I_br = z^-1 (V_from - V_to), one row per (branch, phase)."""
    rows: list[tuple[int, str]] = []
    vals: list[complex] = []
    for bi, br in enumerate(net.branches):
        fi = np.array([net.index[(br.from_bus, p)] for p in br.phases])
        ti = np.array([net.index[(br.to_bus, p)] for p in br.phases])
        i_br = br.admittance_block() @ (v[fi] - v[ti])
        for k, p in enumerate(br.phases):
            rows.append((bi, p))
            vals.append(i_br[k])
    return np.array(vals, dtype=complex), rows


def total_losses(net: ThreePhaseNetwork, v: np.ndarray) -> float:
    """Sum over branch-phases of R_phi |I_br_phi|^2 (the loss objective's formula)."""
    i_br, rows = branch_currents(net, v)
    loss = 0.0
    for (bi, p), cur in zip(rows, i_br):
        br = net.branches[bi]
        r = br.series_resistance()[br.phases.index(p)]
        loss += r * float(np.abs(cur)) ** 2
    return loss
