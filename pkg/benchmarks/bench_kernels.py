"""Benchmark the numba kernels against the pure-numpy fallback.

Times repeated solves of the two hot kernels on the bundled fixtures:
the positive-sequence Newton-Raphson on the 9-bus network and the
backward/forward sweep on the 4-node feeder. First call per backend is
excluded (JIT compile / cache load).

Usage: python benchmarks/bench_kernels.py [repeats]
"""

import sys
import time

import numpy as np

from cosimpf import _kernels_numpy
from cosimpf.dxsolver import _sweep_arrays
from cosimpf.modelio import fixture_path, load_models
from cosimpf.txsolver import assemble_sequence_ybus

try:
    from cosimpf import _kernels_numba
    BACKENDS = [("numba", _kernels_numba), ("numpy", _kernels_numpy)]
except ImportError:
    print("numba not importable; timing the numpy path only")
    BACKENDS = [("numpy", _kernels_numpy)]


def nr_case():
    tx, _ = load_models(fixture_path("ts1.json"))
    yb = assemble_sequence_ybus(tx)
    kind = np.array(
        [{"slack": 0, "pv": 1, "pq": 2}[b.kind] for b in tx.buses],
        dtype=np.int64,
    )
    inj = np.array([b.p_sched + 1j * b.q_sched for b in tx.buses])
    v0 = np.ones(tx.n_bus, dtype=np.complex128)
    for i, b in enumerate(tx.buses):
        if b.kind in ("slack", "pv"):
            v0[i] = b.v_set
    return (yb.y1.astype(np.complex128), inj.real.copy(), inj.imag.copy(),
            kind, v0, 1e-8, 25)


def sweep_case():
    _, feeders = load_models(fixture_path("ts1.json"))
    _, parent, child, kind, z, shunt, s_load = _sweep_arrays(feeders[0])
    v_head = 1.05 * np.exp(1j * np.array([0, -2 * np.pi / 3, 2 * np.pi / 3]))
    v0 = np.tile(v_head, (len(shunt), 1)).astype(np.complex128)
    return (v_head.astype(np.complex128), parent, child, z, kind, shunt,
            s_load, v0, 1e-8, 100)


def bench(fn, args, repeats):
    fn(*args)  # warm up (JIT compile on the numba path)
    tic = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - tic) / repeats


def main():
    repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    nr_args = nr_case()
    sweep_args = sweep_case()
    results = {}
    for name, mod in BACKENDS:
        results[name] = (
            bench(mod.nr_solve, nr_args, repeats),
            bench(mod.bfs_sweep, sweep_args, repeats),
        )
    print(f"{repeats} solves per measurement")
    print(f"{'kernel':22s}" + "".join(f"{n:>12s}" for n, _ in BACKENDS)
          + ("   speedup" if len(BACKENDS) == 2 else ""))
    for row, label in ((0, "nr_solve (9-bus)"), (1, "bfs_sweep (4-node)")):
        line = f"{label:22s}"
        for name, _ in BACKENDS:
            line += f"{results[name][row] * 1e6:10.1f}us"
        if len(BACKENDS) == 2:
            line += f"  {results['numpy'][row] / results['numba'][row]:7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
