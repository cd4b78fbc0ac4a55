"""Three-phase unbalanced distribution power flow (radial sweep) and the
feeder Thevenin equivalent seen from the coupling point.

All in-memory feeder quantities are per-unit on the shared system base;
the file loaders own every ohm/kW conversion (see modelio).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import backends
from .errors import ConvergenceError, ModelError, SingularTheveninError
from .seqframes import TRANSFORM, ComplexTriple, Frame

log = logging.getLogger(__name__)

SWEEP_TOL = 1e-8
SWEEP_MAX_ITER = 100

PHASES = "abc"

WYE_WYE = "wye-g/wye-g"
DELTA_WYE = "delta/wye-g"


@dataclass(frozen=True)
class FeederNode:
    id: str
    phases: str = "abc"

    def __post_init__(self):
        if not self.phases or any(p not in PHASES for p in self.phases):
            raise ModelError(f"node {self.id}: bad phase set {self.phases!r}")


@dataclass(frozen=True)
class FeederLine:
    from_node: str
    to_node: str
    z: np.ndarray  # 3x3 complex series impedance, pu
    y_shunt: np.ndarray | None = None  # 3x3 total shunt admittance, pu


@dataclass(frozen=True)
class FeederLoad:
    node: str
    phase: str  # "a" | "b" | "c"
    p: float  # pu
    q: float  # pu
    alloc: float = 1.0


@dataclass(frozen=True)
class Transformer:
    z: complex  # series impedance pu on the system base
    connection: str = WYE_WYE
    lv_node: str = ""  # feeder-side node the transformer feeds

    def __post_init__(self):
        if self.connection not in (WYE_WYE, DELTA_WYE):
            raise ModelError(f"unknown transformer connection {self.connection!r}")


@dataclass(frozen=True)
class FeederModel:
    name: str
    nodes: tuple[FeederNode, ...]
    lines: tuple[FeederLine, ...]
    loads: tuple[FeederLoad, ...]
    head: str  # PCC node id (transmission side)
    transformer: Transformer | None = None
    base_mva: float = 100.0
    kv_ll: float = 0.0

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ModelError(f"feeder {self.name}: duplicate node ids")
        if self.head not in ids:
            raise ModelError(f"feeder {self.name}: head node {self.head} missing")
        phase_map = {n.id: n.phases for n in self.nodes}
        for ld in self.loads:
            if ld.node not in phase_map:
                raise ModelError(f"feeder {self.name}: load on unknown node {ld.node}")
            if ld.phase not in phase_map[ld.node]:
                raise ModelError(
                    f"feeder {self.name}: load on node {ld.node} phase {ld.phase} "
                    f"but node has phases {phase_map[ld.node]!r}"
                )
        self.ordered_lines()  # radial check

    def ordered_lines(self):
        """Edges in head-down topological order: (parent, child, kind, z, ysh).

        kind is a backends.LINE_* code; the substation transformer, when
        present, is the first edge. Raises ModelError on loops, parallel
        edges, or unreachable nodes.
        """
        edges = []
        if self.transformer is not None:
            t = self.transformer
            if not t.lv_node:
                raise ModelError(f"feeder {self.name}: transformer needs lv_node")
            kind = (
                backends.LINE_XFMR_DY
                if t.connection == DELTA_WYE
                else backends.LINE_XFMR_YY
            )
            edges.append((self.head, t.lv_node, kind, np.eye(3, dtype=complex) * t.z, None))
        for ln in self.lines:
            z = np.asarray(ln.z, dtype=complex)
            if z.shape != (3, 3):
                raise ModelError(
                    f"feeder {self.name}: line {ln.from_node}-{ln.to_node} "
                    "impedance must be 3x3"
                )
            edges.append((ln.from_node, ln.to_node, backends.LINE_SERIES, z, ln.y_shunt))

        adj: dict[str, list[int]] = {n.id: [] for n in self.nodes}
        for k, (a, b, *_rest) in enumerate(edges):
            for end in (a, b):
                if end not in adj:
                    raise ModelError(f"feeder {self.name}: edge uses unknown node {end}")
            adj[a].append(k)
            adj[b].append(k)

        ordered = []
        visited = {self.head}
        frontier = [self.head]
        used = set()
        while frontier:
            node = frontier.pop(0)
            for k in adj[node]:
                if k in used:
                    continue
                a, b, kind, z, ysh = edges[k]
                child = b if a == node else a
                used.add(k)
                if child in visited:
                    raise ModelError(
                        f"feeder {self.name}: non-radial, loop closed by edge {a}-{b}"
                    )
                visited.add(child)
                ordered.append((node, child, kind, z, ysh))
                frontier.append(child)
        if len(visited) != len(self.nodes):
            missing = sorted(set(n.id for n in self.nodes) - visited)
            raise ModelError(
                f"feeder {self.name}: nodes unreachable from head: {missing}"
            )
        if len(ordered) != len(edges):
            raise ModelError(f"feeder {self.name}: non-radial (parallel edges)")
        return ordered

    def with_loading(self, multiplier: float = 1.0,
                     phase_factors=(1.0, 1.0, 1.0)) -> "FeederModel":
        """Scaled copy: each load's power times multiplier and its phase factor."""
        if multiplier <= 0:
            raise ValueError("load multiplier must be positive")
        factors = {ph: float(f) for ph, f in zip(PHASES, phase_factors)}
        loads = tuple(
            replace(ld, p=ld.p * multiplier * factors[ld.phase],
                    q=ld.q * multiplier * factors[ld.phase])
            for ld in self.loads
        )
        return replace(self, loads=loads)

    def nominal_demand(self) -> ComplexTriple:
        """Aggregate connected load per phase (allocation applied, no losses)."""
        s = np.zeros(3, dtype=complex)
        for ld in self.loads:
            s[PHASES.index(ld.phase)] += (ld.p + 1j * ld.q) * ld.alloc
        return ComplexTriple.from_array(s, Frame.PHASE)


@dataclass(frozen=True)
class DxSolution:
    node_ids: tuple[str, ...]
    v: np.ndarray  # (n, 3) complex node voltages
    s_d: ComplexTriple  # per-phase power drawn at the PCC, pu
    i_head: np.ndarray  # (3,) current entering at the PCC
    converged: bool
    iterations: int


@dataclass(frozen=True)
class TheveninEquivalent:
    z_d: np.ndarray  # 3x3 complex driving-point impedance at the PCC
    y_d: np.ndarray  # its inverse


def _sweep_arrays(feeder: FeederModel):
    ordered = feeder.ordered_lines()
    node_ids = [feeder.head]
    pos = {feeder.head: 0}
    for parent, child, *_ in ordered:
        pos[child] = len(node_ids)
        node_ids.append(child)
    m = len(ordered)
    n = len(node_ids)
    line_parent = np.empty(m, dtype=np.int64)
    line_child = np.empty(m, dtype=np.int64)
    line_kind = np.empty(m, dtype=np.int64)
    line_z = np.zeros((m, 3, 3), dtype=np.complex128)
    node_shunt = np.zeros((n, 3, 3), dtype=np.complex128)
    for k, (parent, child, kind, z, ysh) in enumerate(ordered):
        line_parent[k] = pos[parent]
        line_child[k] = pos[child]
        line_kind[k] = kind
        line_z[k] = z
        if ysh is not None:
            half = np.asarray(ysh, dtype=complex) / 2.0
            node_shunt[pos[parent]] += half
            node_shunt[pos[child]] += half
    s_load = np.zeros((n, 3), dtype=np.complex128)
    for ld in feeder.loads:
        s_load[pos[ld.node], PHASES.index(ld.phase)] += (ld.p + 1j * ld.q) * ld.alloc
    return node_ids, line_parent, line_child, line_kind, line_z, node_shunt, s_load


def solve_f2(feeder: FeederModel, v_d: ComplexTriple,
             tol: float = SWEEP_TOL, max_iter: int = SWEEP_MAX_ITER) -> DxSolution:
    """Feeder response S_D = f2(V_D) with the head held at the given voltage."""
    if v_d.frame is not Frame.PHASE:
        raise ValueError("head voltage must be a phase-frame triple")
    v_head = v_d.as_array()
    mags = np.abs(v_head)
    if np.any(mags <= 0.5) or np.any(mags >= 1.5):
        raise ValueError(
            f"implausible head voltage magnitudes {mags}; expected within (0.5, 1.5) pu"
        )

    node_ids, parent, child, kind, z, shunt, s_load = _sweep_arrays(feeder)
    v0 = np.tile(v_head, (len(node_ids), 1)).astype(np.complex128)
    v, i_head, it, status = backends.bfs_sweep(
        v_head.astype(np.complex128), parent, child, z, kind,
        shunt, s_load, v0, tol, max_iter,
    )
    if status != backends.SWEEP_OK:
        raise ConvergenceError(
            f"feeder {feeder.name}: sweep did not converge in {max_iter} iterations "
            "(voltage collapse or infeasible head voltage)"
        )
    s_d = ComplexTriple.from_array(v_head * np.conj(i_head), Frame.PHASE)
    return DxSolution(
        node_ids=tuple(node_ids), v=v, s_d=s_d, i_head=i_head,
        converged=True, iterations=it,
    )


def _phase_admittance(feeder: FeederModel, last: DxSolution):
    """Full phase-frame nodal admittance with loads as constant admittance.

    Zero-impedance series lines are contracted onto their parent node.
    Returns (Y, representative index per node position, head representative).
    """
    node_ids, parent, child, kind, z, shunt, s_load = _sweep_arrays(feeder)
    n = len(node_ids)
    rep = list(range(n))

    def find(i):
        while rep[i] != i:
            rep[i] = rep[rep[i]]
            i = rep[i]
        return i

    for k in range(len(parent)):
        if kind[k] == backends.LINE_SERIES and not np.any(z[k]):
            rep[find(int(child[k]))] = find(int(parent[k]))

    groups = sorted({find(i) for i in range(n)})
    gidx = {g: i for i, g in enumerate(groups)}
    slot = [gidx[find(i)] for i in range(n)]
    ng = len(groups)
    y = np.zeros((3 * ng, 3 * ng), dtype=complex)

    def block(i, j):
        return np.s_[3 * i:3 * i + 3], np.s_[3 * j:3 * j + 3]

    def stamp(i, j, m):
        ri, ci = block(i, i)
        rj, cj = block(j, j)
        y[ri, ci] += m
        y[rj, cj] += m
        ri_j = block(i, j)
        y[ri_j[0], ri_j[1]] -= m
        rj_i = block(j, i)
        y[rj_i[0], rj_i[1]] -= m

    t_mat, a_mat = TRANSFORM.T, TRANSFORM.A
    for k in range(len(parent)):
        p, c = slot[int(parent[k])], slot[int(child[k])]
        if kind[k] == backends.LINE_SERIES:
            if not np.any(z[k]):
                continue
            try:
                yser = np.linalg.inv(z[k])
            except np.linalg.LinAlgError as exc:
                raise ModelError(
                    f"feeder {feeder.name}: singular line impedance matrix"
                ) from exc
            stamp(p, c, yser)
        else:
            yt = 1.0 / z[k][0, 0]
            if kind[k] == backends.LINE_XFMR_DY:
                stamp(p, c, a_mat @ np.diag([0, yt, yt]) @ t_mat)
                rc, cc = block(c, c)
                y[rc, cc] += a_mat @ np.diag([yt, 0, 0]) @ t_mat
            else:
                stamp(p, c, np.eye(3, dtype=complex) * yt)

    for i in range(n):
        si = slot[i]
        ri, ci = block(si, si)
        y[ri, ci] += shunt[i]
        for ph in range(3):
            s = s_load[i, ph]
            if s != 0:
                vm2 = abs(last.v[i, ph]) ** 2
                y[3 * si + ph, 3 * si + ph] += np.conj(s) / vm2
    return y, slot, slot[0]


def thevenin_at_pcc(feeder: FeederModel, last: DxSolution) -> TheveninEquivalent:
    """Driving-point impedance at the PCC with loads linearized at ``last``.

    Loads become their constant-admittance equivalent at the latest converged
    voltages, interior nodes are eliminated by Schur complement, and the
    reduced matrix is inverted. Includes the substation transformer, so Z_D
    is the Thevenin seen from the transmission side of the PCC.
    """
    if not last.converged:
        raise ValueError("thevenin_at_pcc needs a converged feeder solution")
    y, slot, head_slot = _phase_admittance(feeder, last)
    ng = y.shape[0] // 3
    head = [3 * head_slot + ph for ph in range(3)]
    interior = [i for i in range(3 * ng) if i not in head]
    y_pp = y[np.ix_(head, head)]
    if interior:
        y_pi = y[np.ix_(head, interior)]
        y_ip = y[np.ix_(interior, head)]
        y_ii = y[np.ix_(interior, interior)]
        try:
            y_red = y_pp - y_pi @ np.linalg.solve(y_ii, y_ip)
        except np.linalg.LinAlgError as exc:
            raise SingularTheveninError(
                f"feeder {feeder.name}: interior admittance singular "
                "(no shunt path anywhere)"
            ) from exc
    else:
        y_red = y_pp
    if not np.all(np.isfinite(y_red)) or np.linalg.cond(y_red) > 1e12:
        raise SingularTheveninError(
            f"feeder {feeder.name}: reduced admittance singular; the feeder has "
            "no shunt path so no driving-point impedance exists"
        )
    z_d = np.linalg.inv(y_red)
    return TheveninEquivalent(z_d=z_d, y_d=y_red)
