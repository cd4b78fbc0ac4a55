"""Numba and numpy kernel twins must agree; the env flag picks the fallback."""

import os
import subprocess
import sys

import numpy as np
import pytest

from cosimpf import _kernels_numpy
from cosimpf import backends
from cosimpf.modelio import fixture_path, load_models
from cosimpf.txsolver import assemble_sequence_ybus
from cosimpf.dxsolver import _sweep_arrays

numba_kernels = pytest.importorskip("cosimpf._kernels_numba")


def nr_inputs():
    tx, _ = load_models(fixture_path("ts1.json"))
    yb = assemble_sequence_ybus(tx)
    kind = np.array(
        [{"slack": 0, "pv": 1, "pq": 2}[b.kind] for b in tx.buses], dtype=np.int64
    )
    inj = np.array([b.p_sched + 1j * b.q_sched for b in tx.buses])
    v0 = np.ones(tx.n_bus, dtype=np.complex128)
    for i, b in enumerate(tx.buses):
        if b.kind in ("slack", "pv"):
            v0[i] = b.v_set
    return yb.y1.astype(np.complex128), inj.real.copy(), inj.imag.copy(), kind, v0


def sweep_inputs():
    _, feeders = load_models(fixture_path("ts1.json"))
    _, parent, child, kind, z, shunt, s_load = _sweep_arrays(feeders[0])
    v_head = 1.05 * np.exp(1j * np.array([0, -2 * np.pi / 3, 2 * np.pi / 3]))
    v0 = np.tile(v_head, (len(shunt), 1)).astype(np.complex128)
    return v_head.astype(np.complex128), parent, child, z, kind, shunt, s_load, v0


def test_nr_twins_agree():
    y, p, q, kind, v0 = nr_inputs()
    v_a, it_a, st_a = numba_kernels.nr_solve(y, p, q, kind, v0, 1e-8, 25)
    v_b, it_b, st_b = _kernels_numpy.nr_solve(y, p, q, kind, v0, 1e-8, 25)
    assert st_a == st_b == 0
    assert np.max(np.abs(v_a - v_b)) < 1e-9


def test_sweep_twins_agree():
    vh, parent, child, z, kind, shunt, s_load, v0 = sweep_inputs()
    va, ia, ita, sta = numba_kernels.bfs_sweep(
        vh, parent, child, z, kind, shunt, s_load, v0.copy(), 1e-8, 100)
    vb, ib, itb, stb = _kernels_numpy.bfs_sweep(
        vh, parent, child, z, kind, shunt, s_load, v0.copy(), 1e-8, 100)
    assert sta == stb == 0
    assert ita == itb
    assert np.max(np.abs(va - vb)) < 1e-12
    assert np.max(np.abs(ia - ib)) < 1e-12


def test_env_flag_selects_numpy_backend():
    code = "import cosimpf.backends as b; print(b.backend_name())"
    env = dict(os.environ, COSIMPF_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_default_backend_reports_something():
    assert backends.backend_name() in ("numba", "numpy")
