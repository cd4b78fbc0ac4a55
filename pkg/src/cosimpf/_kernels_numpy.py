"""Pure-numpy twins of the numba kernels.

Selected by backends.py when COSIMPF_NO_NUMBA is set or numba is
unavailable. The Newton-Raphson twin builds its Jacobian from the complex
dS/dV matrices instead of entrywise trig, so the two backends also
cross-check each other's assembly.
"""

import cmath

import numpy as np

_A3 = cmath.exp(2j * cmath.pi / 3)
SEQ_T = np.array(
    [[1, 1, 1], [1, _A3, _A3 * _A3], [1, _A3 * _A3, _A3]], dtype=np.complex128
) / 3.0
SEQ_A = np.array(
    [[1, 1, 1], [1, _A3 * _A3, _A3], [1, _A3, _A3 * _A3]], dtype=np.complex128
)

NR_OK = 0
NR_MAX_ITER = 1
SWEEP_OK = 0
SWEEP_MAX_ITER = 1

KIND_SLACK = 0
KIND_PV = 1
KIND_PQ = 2

LINE_SERIES = 0
LINE_XFMR_YY = 1
LINE_XFMR_DY = 2


def nr_solve(ybus, p_sched, q_sched, kind, v0, tol, max_iter):
    """Polar Newton-Raphson, Jacobian via vectorized dS/dV matrices."""
    n = ybus.shape[0]
    pvpq = np.flatnonzero(kind != KIND_SLACK)
    pq = np.flatnonzero(kind == KIND_PQ)
    nunk = len(pvpq) + len(pq)

    v = v0.astype(np.complex128, copy=True)
    it = 0
    status = NR_MAX_ITER
    for it in range(max_iter + 1):
        s_calc = v * np.conj(ybus @ v)
        f = np.concatenate(
            [p_sched[pvpq] - s_calc.real[pvpq], q_sched[pq] - s_calc.imag[pq]]
        )
        if nunk == 0 or np.max(np.abs(f)) <= tol:
            status = NR_OK
            break
        if it == max_iter:
            break

        ibus = ybus @ v
        diag_v = np.diag(v)
        diag_i = np.diag(ibus)
        diag_vnorm = np.diag(v / np.abs(v))
        ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
        ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)

        j11 = ds_dva[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dva[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])

        dx = np.linalg.solve(jac, f)
        if not np.all(np.isfinite(dx)):
            break
        va = np.angle(v)
        vm = np.abs(v)
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        v = vm * np.exp(1j * va)

    return v, it, status


def bfs_sweep(v_head, line_parent, line_child, line_z, line_kind,
              node_shunt, s_load, v0, tol, max_iter):
    """Backward/forward sweep; see the numba twin for the line conventions."""
    n = v0.shape[0]
    m = line_parent.shape[0]
    v = v0.astype(np.complex128, copy=True)
    i_br = np.zeros((m, 3), dtype=np.complex128)
    has_load = s_load != 0

    it = 0
    status = SWEEP_MAX_ITER
    for it in range(1, max_iter + 1):
        demand = np.zeros((n, 3), dtype=np.complex128)
        np.divide(s_load, v, out=demand, where=has_load)
        demand = np.conj(demand)
        demand += np.einsum("nij,nj->ni", node_shunt, v)

        for kk in range(m - 1, -1, -1):
            c = line_child[kk]
            i_br[kk] = demand[c]
            if line_kind[kk] == LINE_XFMR_DY:
                iseq = SEQ_T @ i_br[kk]
                iseq[0] = 0.0
                demand[line_parent[kk]] += SEQ_A @ iseq
            else:
                demand[line_parent[kk]] += i_br[kk]

        dv_max = 0.0
        v[0] = v_head
        for kk in range(m):
            pnode = line_parent[kk]
            c = line_child[kk]
            if line_kind[kk] == LINE_XFMR_DY:
                zt = line_z[kk, 0, 0]
                iseq = SEQ_T @ i_br[kk]
                useq = SEQ_T @ v[pnode]
                vnew = SEQ_A @ np.array(
                    [-zt * iseq[0], useq[1] - zt * iseq[1], useq[2] - zt * iseq[2]]
                )
            else:
                vnew = v[pnode] - line_z[kk] @ i_br[kk]
            dv_max = max(dv_max, float(np.max(np.abs(vnew - v[c]))))
            v[c] = vnew

        if not np.isfinite(dv_max):
            break
        if dv_max <= tol:
            status = SWEEP_OK
            break

    return v, demand[0].copy(), it, status
