"""Monolithic combined three-phase T&D power flow used as ground truth.

Deliberately a different algorithm from both subsystem solvers: a
current-injection fixed point on the unified phase-frame admittance matrix,
with generator EMFs adjusted to meet slack/PV constraints. Desk-scale
referee only (dense matrices).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dxsolver import PHASES
from .errors import BaseMismatchError, ConvergenceError, ModelError
from .seqframes import TRANSFORM, ComplexTriple, Frame
from .txsolver import TransmissionModel
from . import backends

log = logging.getLogger(__name__)

# iterate beyond the 1e-10 contract so re-injection residuals clear it too
MONO_TOL = 1e-12
MONO_MAX_ITER = 500


@dataclass(frozen=True)
class _Gen:
    slot: int
    kind: str  # "slack" | "pv"
    v_set: float
    p_set: float
    yg: complex  # positive/negative-sequence source admittance


@dataclass
class CombinedModel:
    y: np.ndarray  # (3N, 3N) unified admittance
    labels: list[str]  # one label per collapsed node (N entries)
    gens: list[_Gen]
    tx_loads: list[tuple[int, complex]]  # (slot, net S injection), positive-sequence
    feeder_loads: list[tuple[int, complex]]  # (phase node index, S drawn)
    pcc: list[dict]  # per feeder: slot, edges [(Y 3x3, other slot)], head loads

    @property
    def n_phase_nodes(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class MonolithicSolution:
    v: np.ndarray  # (3N,) phase node voltages
    labels: tuple[str, ...]
    pcc_v: tuple[ComplexTriple, ...]
    pcc_s: tuple[ComplexTriple, ...]
    e_gens: tuple[complex, ...]
    converged: bool
    iterations: int


def _seq_matrix(d0: complex, d1: complex, d2: complex) -> np.ndarray:
    """Phase-frame image of a diagonal sequence-domain matrix."""
    return TRANSFORM.A @ np.diag([d0, d1, d2]).astype(complex) @ TRANSFORM.T


def assemble_combined(tx: TransmissionModel, feeders) -> CombinedModel:
    """Phase-expand the transmission network and graft the feeders onto it."""
    if len(feeders) != len(tx.pcc_buses):
        raise ModelError(
            f"{len(tx.pcc_buses)} PCC buses but {len(feeders)} feeders"
        )
    for f in feeders:
        if f.base_mva != tx.base_mva:
            raise BaseMismatchError(
                f"feeder {f.name} is on a {f.base_mva} MVA base but the "
                f"transmission model uses {tx.base_mva} MVA"
            )

    labels = [f"bus:{b.id}" for b in tx.buses]
    slot_of_bus = {b.id: i for i, b in enumerate(tx.buses)}
    stamps = []  # (i, j, Y 3x3) series elements
    shunts = []  # (i, Y 3x3)
    for br in tx.branches:
        i, j = slot_of_bus[br.from_bus], slot_of_bus[br.to_bus]
        yser = _seq_matrix(1.0 / br.z0, 1.0 / br.z1, 1.0 / br.z1)
        stamps.append((i, j, yser))
        if br.b_shunt:
            half = np.eye(3, dtype=complex) * (1j * br.b_shunt / 2.0)
            shunts.append((i, half))
            shunts.append((j, half))

    gens = []
    for b in tx.buses:
        if b.kind in ("slack", "pv"):
            if b.z2_source is None:
                raise ModelError(
                    f"bus {b.id}: generator sequence impedance required for the "
                    "combined model"
                )
            yg = 1.0 / b.z2_source
            y0 = 0.0 if b.z0_ground is None else 1.0 / b.z0_ground
            shunts.append((slot_of_bus[b.id], _seq_matrix(y0, yg, yg)))
            gens.append(_Gen(
                slot=slot_of_bus[b.id], kind=b.kind, v_set=b.v_set,
                p_set=b.p_sched, yg=yg,
            ))

    tx_loads = []
    for b in tx.buses:
        if b.kind == "pq" and (b.p_sched != 0 or b.q_sched != 0):
            tx_loads.append((slot_of_bus[b.id], b.p_sched + 1j * b.q_sched))

    feeder_loads = []
    pcc_info = []
    for k, feeder in enumerate(feeders):
        pcc_slot = slot_of_bus[tx.pcc_buses[k]]
        ordered = feeder.ordered_lines()
        node_ids = [feeder.head]
        for parent, child, *_ in ordered:
            node_ids.append(child)
        # contract zero-impedance series edges
        rep = {nid: nid for nid in node_ids}

        def find(x):
            while rep[x] != x:
                rep[x] = rep[rep[x]]
                x = rep[x]
            return x

        for parent, child, kind, z, _ysh in ordered:
            if kind == backends.LINE_SERIES and not np.any(z):
                rep[find(child)] = find(parent)

        slot_of_node = {}
        for nid in node_ids:
            root = find(nid)
            if root == feeder.head:
                slot_of_node[nid] = pcc_slot
            elif root in slot_of_node:
                slot_of_node[nid] = slot_of_node[root]
            else:
                slot_of_node[root] = len(labels)
                slot_of_node[nid] = slot_of_node[root]
                labels.append(f"feeder{k}:{root}")

        edges_at_pcc = []
        for parent, child, kind, z, ysh in ordered:
            i, j = slot_of_node[parent], slot_of_node[child]
            if kind == backends.LINE_SERIES:
                if not np.any(z):
                    continue
                yser = np.linalg.inv(z)
            elif kind == backends.LINE_XFMR_DY:
                yt = 1.0 / z[0, 0]
                yser = _seq_matrix(0.0, yt, yt)
                shunts.append((j, _seq_matrix(yt, 0.0, 0.0)))
            else:
                yser = np.eye(3, dtype=complex) / z[0, 0]
            stamps.append((i, j, yser))
            if i == pcc_slot:
                edges_at_pcc.append((yser, j))
            if ysh is not None:
                half = np.asarray(ysh, dtype=complex) / 2.0
                shunts.append((i, half))
                shunts.append((j, half))

        head_loads = []
        for ld in feeder.loads:
            s = (ld.p + 1j * ld.q) * ld.alloc
            if s == 0:
                continue
            slot = slot_of_node[ld.node]
            ph = PHASES.index(ld.phase)
            if slot == pcc_slot:
                head_loads.append((ph, s))
            feeder_loads.append((3 * slot + ph, s))
        pcc_info.append({
            "slot": pcc_slot, "edges": edges_at_pcc, "head_loads": head_loads,
        })

    n = len(labels)
    y = np.zeros((3 * n, 3 * n), dtype=complex)
    for i, j, yser in stamps:
        bi = slice(3 * i, 3 * i + 3)
        bj = slice(3 * j, 3 * j + 3)
        y[bi, bi] += yser
        y[bj, bj] += yser
        y[bi, bj] -= yser
        y[bj, bi] -= yser
    for i, ysh in shunts:
        bi = slice(3 * i, 3 * i + 3)
        y[bi, bi] += ysh

    # island check on the stamped graph
    adj = {i: set() for i in range(n)}
    for i, j, _ in stamps:
        adj[i].add(j)
        adj[j].add(i)
    seen = {0}
    stack = [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != n:
        raise ModelError("combined model has islands")

    return CombinedModel(
        y=y, labels=labels, gens=gens, tx_loads=tx_loads,
        feeder_loads=feeder_loads, pcc=pcc_info,
    )


def _balanced(e: complex) -> np.ndarray:
    return TRANSFORM.A @ np.array([0.0, e, 0.0], dtype=complex)


def _pos_seq(v_block: np.ndarray) -> complex:
    return complex((TRANSFORM.T @ v_block)[1])


def injected_currents(m: CombinedModel, v: np.ndarray, e_gens) -> np.ndarray:
    """Nodal current injections for the present voltage estimate."""
    i = np.zeros_like(v)
    for g, e in zip(m.gens, e_gens):
        blk = slice(3 * g.slot, 3 * g.slot + 3)
        i[blk] += g.yg * _balanced(e)
    for slot, s_inj in m.tx_loads:
        blk = slice(3 * slot, 3 * slot + 3)
        v1 = _pos_seq(v[blk])
        i1 = np.conj(s_inj / v1)
        i[blk] += _balanced(i1)
    for node, s in m.feeder_loads:
        i[node] -= np.conj(s / v[node])
    return i


def solve_monolithic(m: CombinedModel, tol: float = MONO_TOL,
                     max_iter: int = MONO_MAX_ITER) -> MonolithicSolution:
    """Current-injection fixed point with EMF adjustment for slack/PV buses."""
    n3 = m.y.shape[0]
    v = np.tile(_balanced(1.0), n3 // 3)
    e_gens = [complex(g.v_set) for g in m.gens]

    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        i_inj = injected_currents(m, v, e_gens)
        v_new = np.linalg.solve(m.y, i_inj)
        dv = float(np.max(np.abs(v_new - v)))
        v = v_new
        if not np.isfinite(dv):
            raise ConvergenceError("monolithic solve produced non-finite voltages")

        cerr = 0.0
        for gi, g in enumerate(m.gens):
            blk = slice(3 * g.slot, 3 * g.slot + 3)
            v1 = _pos_seq(v[blk])
            if g.kind == "slack":
                err = g.v_set - v1
                e_gens[gi] += err
                cerr = max(cerr, abs(err))
            else:
                i1 = g.yg * (e_gens[gi] - v1)
                p1 = (v1 * np.conj(i1)).real
                xg = (1.0 / g.yg).imag
                mag_err = g.v_set - abs(v1)
                ang_step = (g.p_set - p1) * xg / (abs(e_gens[gi]) * abs(v1))
                e_gens[gi] *= (1.0 + mag_err / abs(v1)) * np.exp(1j * ang_step)
                cerr = max(cerr, abs(mag_err), abs(g.p_set - p1))

        if dv <= tol and cerr <= tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"monolithic fixed point did not converge in {max_iter} iterations"
        )

    pcc_v = []
    pcc_s = []
    for info in m.pcc:
        blk = slice(3 * info["slot"], 3 * info["slot"] + 3)
        v_pcc = v[blk]
        i_into = np.zeros(3, dtype=complex)
        for y_e, other in info["edges"]:
            i_into += y_e @ (v_pcc - v[3 * other:3 * other + 3])
        for ph, s in info["head_loads"]:
            i_into[ph] += np.conj(s / v_pcc[ph])
        pcc_v.append(ComplexTriple.from_array(v_pcc, Frame.PHASE))
        pcc_s.append(ComplexTriple.from_array(v_pcc * np.conj(i_into), Frame.PHASE))

    return MonolithicSolution(
        v=v, labels=tuple(m.labels), pcc_v=tuple(pcc_v), pcc_s=tuple(pcc_s),
        e_gens=tuple(e_gens), converged=True, iterations=it,
    )


def self_consistency(m: CombinedModel, sol: MonolithicSolution) -> float:
    """Max nodal current mismatch when re-injecting the solved voltages."""
    i_inj = injected_currents(m, sol.v, sol.e_gens)
    return float(np.max(np.abs(m.y @ sol.v - i_inj)))


def power_balance(m: CombinedModel, sol: MonolithicSolution) -> complex:
    """Total source injection minus loads and network losses (should be ~0).

    Source power is measured at the internal EMFs; every admittance stamp in
    the unified matrix (including the generator series elements) counts as
    network consumption.
    """
    v = sol.v
    s_network = complex(np.sum(v * np.conj(m.y @ v)))
    s_sources = 0j
    for g, e in zip(m.gens, sol.e_gens):
        blk = slice(3 * g.slot, 3 * g.slot + 3)
        s_sources += complex(np.sum(v[blk] * np.conj(g.yg * _balanced(e))))
    s_loads = 0j
    for slot, s_inj in m.tx_loads:
        blk = slice(3 * slot, 3 * slot + 3)
        v1 = _pos_seq(v[blk])
        i1 = np.conj(s_inj / v1)
        s_loads -= complex(np.sum(v[blk] * np.conj(_balanced(i1))))
    for node, s in m.feeder_loads:
        s_loads += complex(v[node] * np.conj(np.conj(s / v[node])))
    return s_sources - s_loads - s_network
