"""Three-sequence transmission power flow.

The positive-sequence network is solved with full Newton-Raphson; the
negative- and zero-sequence networks are direct linear solves. Unbalanced
demand at the feeder coupling points (PCCs) enters as sequence current
injections recomputed from the latest voltage estimate, and the three
solves are swept until the positive-sequence voltages settle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import backends
from .errors import ConvergenceError, ModelError, PowerFlowError
from .seqframes import TRANSFORM, ComplexTriple, Frame

log = logging.getLogger(__name__)

NR_TOL = 1e-8
NR_MAX_ITER = 25
SWEEP_TOL = 1e-8
MAX_SWEEPS = 10

THREE_SEQUENCE = "threeseq"
POSITIVE_ONLY = "posseq"


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str  # "slack" | "pv" | "pq"
    v_set: float = 1.0
    p_sched: float = 0.0  # net injection pu (generation positive, load negative)
    q_sched: float = 0.0
    z2_source: complex | None = None  # generator negative-sequence impedance
    z0_ground: complex | None = None  # generator zero-sequence grounding path

    def __post_init__(self):
        if self.kind not in ("slack", "pv", "pq"):
            raise ModelError(f"bus {self.id}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    z1: complex
    z0: complex
    z2: complex | None = None  # defaults to z1 (static branches)
    b_shunt: float = 0.0  # total charging susceptance, half at each end


@dataclass(frozen=True)
class TransmissionModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float
    pcc_buses: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate bus ids")
        slacks = [b for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise ModelError(f"need exactly one slack bus, got {len(slacks)}")
        index = {b.id: i for i, b in enumerate(self.buses)}
        for br in self.branches:
            if br.from_bus not in index or br.to_bus not in index:
                raise ModelError(f"branch {br.from_bus}-{br.to_bus}: unknown bus")
            if br.z1 == 0:
                raise ModelError(
                    f"branch {br.from_bus}-{br.to_bus}: zero positive-sequence impedance"
                )
        for pcc in self.pcc_buses:
            if pcc not in index:
                raise ModelError(f"pcc bus {pcc} not in model")
        # connectivity in the positive-sequence graph
        adj = {b.id: set() for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        seen = {self.buses[0].id}
        stack = [self.buses[0].id]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if len(seen) != len(self.buses):
            raise ModelError("transmission network is not connected")

    def bus_index(self, bus_id: str) -> int:
        for i, b in enumerate(self.buses):
            if b.id == bus_id:
                return i
        raise ModelError(f"unknown bus {bus_id}")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def pcc_indices(self) -> list[int]:
        return [self.bus_index(p) for p in self.pcc_buses]

    def replace_pcc(self, pcc_buses: tuple[str, ...]) -> "TransmissionModel":
        """New model with the given PCC set; their scheduled load is cleared."""
        buses = tuple(
            Bus(b.id, b.kind, b.v_set, 0.0, 0.0, b.z2_source, b.z0_ground)
            if b.id in pcc_buses
            else b
            for b in self.buses
        )
        return TransmissionModel(buses, self.branches, self.base_mva, pcc_buses)


@dataclass(frozen=True)
class SequenceYbus:
    y0: np.ndarray
    y1: np.ndarray
    y2: np.ndarray


@dataclass(frozen=True)
class TxSolution:
    v0: np.ndarray  # per-bus zero-sequence voltage
    v1: np.ndarray
    v2: np.ndarray
    v_t: tuple[ComplexTriple, ...]  # per-PCC (V0, V1, V2)
    i_abc: tuple[ComplexTriple, ...]  # per-PCC interface phase currents
    converged: bool
    iterations: int  # outer sequence sweeps
    nr_iterations: int = 0
    y0_singular: bool = False


def assemble_sequence_ybus(model: TransmissionModel) -> SequenceYbus:
    """Dense per-sequence bus admittance matrices from branch and source data."""
    n = model.n_bus
    y0 = np.zeros((n, n), dtype=complex)
    y1 = np.zeros((n, n), dtype=complex)
    y2 = np.zeros((n, n), dtype=complex)
    idx = {b.id: i for i, b in enumerate(model.buses)}
    for br in model.branches:
        i, j = idx[br.from_bus], idx[br.to_bus]
        z2 = br.z2 if br.z2 is not None else br.z1
        for y, z in ((y1, br.z1), (y2, z2), (y0, br.z0)):
            if z == 0:
                raise ModelError(
                    f"branch {br.from_bus}-{br.to_bus}: zero sequence impedance"
                )
            w = 1.0 / z
            y[i, i] += w
            y[j, j] += w
            y[i, j] -= w
            y[j, i] -= w
        for y in (y0, y1, y2):
            y[i, i] += 1j * br.b_shunt / 2.0
            y[j, j] += 1j * br.b_shunt / 2.0
    for b in model.buses:
        i = idx[b.id]
        if b.z2_source is not None:
            y2[i, i] += 1.0 / b.z2_source
        if b.z0_ground is not None:
            y0[i, i] += 1.0 / b.z0_ground
    return SequenceYbus(y0=y0, y1=y1, y2=y2)


def solve_positive_nr(
    ybus: SequenceYbus,
    model: TransmissionModel,
    injections: np.ndarray,
    v_init: np.ndarray | None = None,
    tol: float = NR_TOL,
    max_iter: int = NR_MAX_ITER,
) -> tuple[np.ndarray, int]:
    """Newton-Raphson solve of the positive-sequence network.

    ``injections`` is the net complex power injection per bus (PV buses use
    only the real part). Flat start unless ``v_init`` is given; slack and PV
    magnitudes are re-pinned to their setpoints either way.
    """
    n = model.n_bus
    kind = np.empty(n, dtype=np.int64)
    v0 = np.ones(n, dtype=np.complex128)
    for i, b in enumerate(model.buses):
        if b.kind == "slack":
            kind[i] = backends.KIND_SLACK
        elif b.kind == "pv":
            kind[i] = backends.KIND_PV
        else:
            kind[i] = backends.KIND_PQ
    if v_init is not None:
        v0[:] = v_init
    for i, b in enumerate(model.buses):
        if b.kind == "slack":
            v0[i] = b.v_set
        elif b.kind == "pv":
            ang = np.angle(v0[i])
            v0[i] = b.v_set * np.exp(1j * ang)

    inj = np.asarray(injections, dtype=np.complex128)
    try:
        v, it, status = backends.nr_solve(
            ybus.y1.astype(np.complex128), inj.real.copy(), inj.imag.copy(),
            kind, v0, tol, max_iter,
        )
    except np.linalg.LinAlgError as exc:
        raise PowerFlowError(f"positive-sequence Jacobian singular: {exc}") from exc
    if status != backends.NR_OK:
        raise PowerFlowError(
            f"positive-sequence NR did not converge in {max_iter} iterations"
        )
    return v, it


def solve_neg_zero(
    ybus: SequenceYbus, i0_inj: np.ndarray, i2_inj: np.ndarray
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Direct linear solves of the zero- and negative-sequence networks.

    Returns (V0, V2, y0_singular). A zero-sequence matrix with no path to
    ground yields V0 = 0 and a logged warning instead of an error.
    """
    n = ybus.y0.shape[0]
    v2 = np.linalg.solve(ybus.y2, np.asarray(i2_inj, dtype=complex))
    y0_singular = False
    try:
        if np.linalg.cond(ybus.y0) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        v0 = np.linalg.solve(ybus.y0, np.asarray(i0_inj, dtype=complex))
    except np.linalg.LinAlgError:
        log.warning("zero-sequence network singular (no ground path); V0 set to 0")
        v0 = np.zeros(n, dtype=complex)
        y0_singular = True
    return v0, v2, y0_singular


def _pcc_phase_voltages(v0, v1, v2, pcc_idx) -> np.ndarray:
    """Phase voltages at each PCC, reconstructed from sequence values."""
    out = np.empty((len(pcc_idx), 3), dtype=complex)
    for k, i in enumerate(pcc_idx):
        out[k] = TRANSFORM.A @ np.array([v0[i], v1[i], v2[i]])
    return out


def _pcc_phase_currents(s_t: np.ndarray, v_abc: np.ndarray) -> np.ndarray:
    """Load phase currents drawn at each PCC: I = conj(S / V) per phase."""
    n_pcc = s_t.shape[0]
    i_abc = np.zeros((n_pcc, 3), dtype=complex)
    for k in range(n_pcc):
        for ph in range(3):
            s = s_t[k, ph]
            if s == 0:
                continue
            v = v_abc[k, ph]
            if abs(v) < 1e-6:
                raise PowerFlowError(
                    f"collapsed phase voltage at PCC {k} while demand is nonzero"
                )
            i_abc[k, ph] = np.conj(s / v)
    return i_abc


def solve_f1(
    model: TransmissionModel,
    s_t,
    mode: str = THREE_SEQUENCE,
    v1_init: np.ndarray | None = None,
    ybus: SequenceYbus | None = None,
) -> TxSolution:
    """Transmission response V_T = f1(S_T) for per-PCC phase demand S_T.

    Alternates the positive-sequence NR with the negative/zero linear solves,
    converting PCC phase demand to sequence injections at the present voltage
    estimate, until successive positive-sequence voltages change less than
    SWEEP_TOL. Also returns the interface phase currents the demand draws.
    """
    if mode not in (THREE_SEQUENCE, POSITIVE_ONLY):
        raise ValueError(f"unknown transmission mode {mode!r}")
    pcc_idx = model.pcc_indices()
    if len(s_t) != len(pcc_idx):
        raise ValueError(f"expected {len(pcc_idx)} PCC demand triples, got {len(s_t)}")
    s_arr = np.zeros((len(pcc_idx), 3), dtype=complex)
    for k, trip in enumerate(s_t):
        if trip.frame is not Frame.PHASE:
            raise ValueError("PCC demand must be a phase-frame triple")
        s_arr[k] = trip.as_array()
    if not np.all(np.isfinite(s_arr)):
        raise ValueError("non-finite PCC demand")

    if ybus is None:
        ybus = assemble_sequence_ybus(model)
    n = model.n_bus
    base_inj = np.array(
        [b.p_sched + 1j * b.q_sched for b in model.buses], dtype=complex
    )

    v0 = np.zeros(n, dtype=complex)
    v2 = np.zeros(n, dtype=complex)
    v1 = np.ones(n, dtype=complex) if v1_init is None else v1_init.astype(complex)
    nr_total = 0
    y0_singular = False
    sweeps = 0
    converged = False
    for sweeps in range(1, MAX_SWEEPS + 1):
        v_abc = _pcc_phase_voltages(v0, v1, v2, pcc_idx)
        i_abc = _pcc_phase_currents(s_arr, v_abc)

        inj = base_inj.copy()
        i_seq = np.einsum("ij,kj->ki", TRANSFORM.T, i_abc)
        for k, i in enumerate(pcc_idx):
            inj[i] -= v1[i] * np.conj(i_seq[k, 1])

        v1_new, nr_it = solve_positive_nr(ybus, model, inj, v_init=v1)
        nr_total += nr_it

        if mode == THREE_SEQUENCE:
            i0_inj = np.zeros(n, dtype=complex)
            i2_inj = np.zeros(n, dtype=complex)
            for k, i in enumerate(pcc_idx):
                i0_inj[i] -= i_seq[k, 0]
                i2_inj[i] -= i_seq[k, 2]
            v0, v2, y0_singular = solve_neg_zero(ybus, i0_inj, i2_inj)

        dv = np.max(np.abs(v1_new - v1))
        v1 = v1_new
        if dv < SWEEP_TOL:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"sequence sweep did not settle in {MAX_SWEEPS} iterations"
        )

    v_abc = _pcc_phase_voltages(v0, v1, v2, pcc_idx)
    i_abc = _pcc_phase_currents(s_arr, v_abc)
    v_t = tuple(
        ComplexTriple(complex(v0[i]), complex(v1[i]), complex(v2[i]), Frame.SEQUENCE)
        for i in pcc_idx
    )
    currents = tuple(
        ComplexTriple.from_array(i_abc[k], Frame.PHASE) for k in range(len(pcc_idx))
    )
    return TxSolution(
        v0=v0, v1=v1, v2=v2, v_t=v_t, i_abc=currents,
        converged=True, iterations=sweeps, nr_iterations=nr_total,
        y0_singular=y0_singular,
    )
