"""Hot numeric kernels, numba-compiled.

Loop-style implementations of the polar Newton-Raphson bus solve and the
radial backward/forward sweep. The numpy twins live in _kernels_numpy.py;
backends.py picks one pair at import time.
"""

import cmath

import numpy as np
from numba import njit

# Sequence decomposition/composition matrices, captured as compile constants.
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


@njit(cache=True, nogil=True)
def nr_solve(ybus, p_sched, q_sched, kind, v0, tol, max_iter):
    """Full Newton-Raphson in polar form on a dense complex admittance matrix.

    kind: 0 slack (V fixed at v0), 1 PV (|V| fixed, P scheduled),
    2 PQ (P and Q scheduled). Returns (V, iterations, status).
    """
    n = ybus.shape[0]
    g = ybus.real.copy()
    b = ybus.imag.copy()

    npvpq = 0
    npq = 0
    for i in range(n):
        if kind[i] != KIND_SLACK:
            npvpq += 1
        if kind[i] == KIND_PQ:
            npq += 1

    ang_pos = np.full(n, -1, dtype=np.int64)
    vm_pos = np.full(n, -1, dtype=np.int64)
    pvpq = np.empty(npvpq, dtype=np.int64)
    pq = np.empty(npq, dtype=np.int64)
    k1 = 0
    k2 = 0
    for i in range(n):
        if kind[i] != KIND_SLACK:
            pvpq[k1] = i
            ang_pos[i] = k1
            k1 += 1
        if kind[i] == KIND_PQ:
            pq[k2] = i
            vm_pos[i] = npvpq + k2
            k2 += 1

    vm = np.abs(v0)
    va = np.empty(n, dtype=np.float64)
    for i in range(n):
        va[i] = np.arctan2(v0[i].imag, v0[i].real)

    nunk = npvpq + npq
    it = 0
    status = NR_MAX_ITER
    p = np.zeros(n, dtype=np.float64)
    q = np.zeros(n, dtype=np.float64)

    for it in range(max_iter + 1):
        # injected power at every bus for the present voltage estimate
        for i in range(n):
            pi = 0.0
            qi = 0.0
            for j in range(n):
                th = va[i] - va[j]
                c = np.cos(th)
                s = np.sin(th)
                pi += vm[i] * vm[j] * (g[i, j] * c + b[i, j] * s)
                qi += vm[i] * vm[j] * (g[i, j] * s - b[i, j] * c)
            p[i] = pi
            q[i] = qi

        f = np.zeros(nunk, dtype=np.float64)
        mis = 0.0
        for i in range(n):
            if kind[i] != KIND_SLACK:
                f[ang_pos[i]] = p_sched[i] - p[i]
                if abs(f[ang_pos[i]]) > mis:
                    mis = abs(f[ang_pos[i]])
            if kind[i] == KIND_PQ:
                f[vm_pos[i]] = q_sched[i] - q[i]
                if abs(f[vm_pos[i]]) > mis:
                    mis = abs(f[vm_pos[i]])

        if mis <= tol:
            status = NR_OK
            break
        if it == max_iter or nunk == 0:
            break

        jac = np.zeros((nunk, nunk), dtype=np.float64)
        for ii in range(npvpq):
            i = pvpq[ii]
            for jj in range(npvpq):
                j = pvpq[jj]
                if i == j:
                    jac[ii, jj] = -q[i] - b[i, i] * vm[i] * vm[i]
                else:
                    th = va[i] - va[j]
                    jac[ii, jj] = vm[i] * vm[j] * (
                        g[i, j] * np.sin(th) - b[i, j] * np.cos(th)
                    )
            for jj in range(npq):
                j = pq[jj]
                col = npvpq + jj
                if i == j:
                    jac[ii, col] = p[i] / vm[i] + g[i, i] * vm[i]
                else:
                    th = va[i] - va[j]
                    jac[ii, col] = vm[i] * (
                        g[i, j] * np.cos(th) + b[i, j] * np.sin(th)
                    )
        for ii in range(npq):
            i = pq[ii]
            row = npvpq + ii
            for jj in range(npvpq):
                j = pvpq[jj]
                if i == j:
                    jac[row, jj] = p[i] - g[i, i] * vm[i] * vm[i]
                else:
                    th = va[i] - va[j]
                    jac[row, jj] = -vm[i] * vm[j] * (
                        g[i, j] * np.cos(th) + b[i, j] * np.sin(th)
                    )
            for jj in range(npq):
                j = pq[jj]
                col = npvpq + jj
                if i == j:
                    jac[row, col] = q[i] / vm[i] - b[i, i] * vm[i]
                else:
                    th = va[i] - va[j]
                    jac[row, col] = vm[i] * (
                        g[i, j] * np.sin(th) - b[i, j] * np.cos(th)
                    )

        dx = np.linalg.solve(jac, f)
        ok = True
        for k in range(nunk):
            if not np.isfinite(dx[k]):
                ok = False
        if not ok:
            break

        for i in range(n):
            if ang_pos[i] >= 0:
                va[i] += dx[ang_pos[i]]
            if vm_pos[i] >= 0:
                vm[i] += dx[vm_pos[i]]

    v = np.empty(n, dtype=np.complex128)
    for i in range(n):
        v[i] = vm[i] * (np.cos(va[i]) + 1j * np.sin(va[i]))
    return v, it, status


@njit(cache=True, nogil=True)
def _mat3vec(m, x, out):
    for i in range(3):
        acc = 0.0 + 0.0j
        for j in range(3):
            acc += m[i, j] * x[j]
        out[i] = acc


@njit(cache=True, nogil=True)
def bfs_sweep(v_head, line_parent, line_child, line_z, line_kind,
              node_shunt, s_load, v0, tol, max_iter):
    """Backward/forward sweep on a radial three-phase network.

    Lines are listed head-down in topological order. line_kind 2 marks a
    delta/wye-g transformer: zero-sequence current is diverted to its
    grounding path instead of passing upstream. Returns
    (V, head current triple, iterations, status).
    """
    n = v0.shape[0]
    m = line_parent.shape[0]
    v = v0.copy()
    demand = np.zeros((n, 3), dtype=np.complex128)
    i_br = np.zeros((m, 3), dtype=np.complex128)
    tmp = np.zeros(3, dtype=np.complex128)
    seq = np.zeros(3, dtype=np.complex128)

    it = 0
    status = SWEEP_MAX_ITER
    for it in range(1, max_iter + 1):
        # backward: node demand currents, then accumulate toward the head
        for k in range(n):
            for ph in range(3):
                s = s_load[k, ph]
                if s != 0:
                    demand[k, ph] = np.conj(s / v[k, ph])
                else:
                    demand[k, ph] = 0.0 + 0.0j
            _mat3vec(node_shunt[k], v[k], tmp)
            for ph in range(3):
                demand[k, ph] += tmp[ph]

        for kk in range(m - 1, -1, -1):
            c = line_child[kk]
            pnode = line_parent[kk]
            for ph in range(3):
                i_br[kk, ph] = demand[c, ph]
            if line_kind[kk] == LINE_XFMR_DY:
                _mat3vec(SEQ_T, i_br[kk], seq)
                seq[0] = 0.0 + 0.0j
                _mat3vec(SEQ_A, seq, tmp)
                for ph in range(3):
                    demand[pnode, ph] += tmp[ph]
            else:
                for ph in range(3):
                    demand[pnode, ph] += i_br[kk, ph]

        # forward: propagate voltages from the head
        dv_max = 0.0
        for ph in range(3):
            v[0, ph] = v_head[ph]
        for kk in range(m):
            pnode = line_parent[kk]
            c = line_child[kk]
            if line_kind[kk] == LINE_XFMR_DY:
                zt = line_z[kk, 0, 0]
                iseq = np.zeros(3, dtype=np.complex128)
                _mat3vec(SEQ_T, i_br[kk], iseq)
                _mat3vec(SEQ_T, v[pnode], tmp)
                # zero sequence returns through the wye-g grounding; the
                # delta side passes positive/negative only
                seq[0] = -zt * iseq[0]
                seq[1] = tmp[1] - zt * iseq[1]
                seq[2] = tmp[2] - zt * iseq[2]
                _mat3vec(SEQ_A, seq, tmp)
                for ph in range(3):
                    dv = abs(tmp[ph] - v[c, ph])
                    if dv > dv_max:
                        dv_max = dv
                    v[c, ph] = tmp[ph]
            else:
                _mat3vec(line_z[kk], i_br[kk], tmp)
                for ph in range(3):
                    newv = v[pnode, ph] - tmp[ph]
                    dv = abs(newv - v[c, ph])
                    if dv > dv_max:
                        dv_max = dv
                    v[c, ph] = newv

        if not np.isfinite(dv_max):
            break
        if dv_max <= tol:
            status = SWEEP_OK
            break

    i_head = np.zeros(3, dtype=np.complex128)
    for ph in range(3):
        i_head[ph] = demand[0, ph]
    return v, i_head, it, status
