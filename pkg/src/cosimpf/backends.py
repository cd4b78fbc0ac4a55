"""Kernel backend selection.

The hot inner loops (Newton-Raphson bus solve, radial sweep) ship in two
equivalent implementations: numba-jitted loops and pure numpy. numba is the
default; set COSIMPF_NO_NUMBA=1 to force the numpy path (or it is chosen
automatically when numba cannot be imported). benchmarks/bench_kernels.py
compares the two.
"""

import logging
import os

log = logging.getLogger(__name__)

ENV_FLAG = "COSIMPF_NO_NUMBA"


def _pick():
    if os.environ.get(ENV_FLAG, "").strip() not in ("", "0"):
        from . import _kernels_numpy as mod
        return mod, "numpy"
    try:
        from . import _kernels_numba as mod
        return mod, "numba"
    except ImportError as exc:  # pragma: no cover - depends on environment
        log.warning("numba unavailable (%s); falling back to numpy kernels", exc)
        from . import _kernels_numpy as mod
        return mod, "numpy"


_MOD, BACKEND = _pick()

nr_solve = _MOD.nr_solve
bfs_sweep = _MOD.bfs_sweep

NR_OK = _MOD.NR_OK
NR_MAX_ITER = _MOD.NR_MAX_ITER
SWEEP_OK = _MOD.SWEEP_OK
SWEEP_MAX_ITER = _MOD.SWEEP_MAX_ITER
KIND_SLACK = _MOD.KIND_SLACK
KIND_PV = _MOD.KIND_PV
KIND_PQ = _MOD.KIND_PQ
LINE_SERIES = _MOD.LINE_SERIES
LINE_XFMR_YY = _MOD.LINE_XFMR_YY
LINE_XFMR_DY = _MOD.LINE_XFMR_DY


def backend_name() -> str:
    return BACKEND


def warmup():
    """Trigger JIT compilation on toy inputs so timed paths run hot."""
    import numpy as np

    y = np.array([[-10j, 10j], [10j, -10j]], dtype=np.complex128)
    kind = np.array([KIND_SLACK, KIND_PQ], dtype=np.int64)
    v0 = np.ones(2, dtype=np.complex128)
    nr_solve(y, np.array([0.0, -0.1]), np.array([0.0, -0.05]), kind, v0, 1e-8, 25)

    vh = np.ones(3, dtype=np.complex128)
    parent = np.array([0], dtype=np.int64)
    child = np.array([1], dtype=np.int64)
    z = np.zeros((1, 3, 3), dtype=np.complex128)
    z[0] = np.eye(3) * (0.01 + 0.02j)
    kinds = np.array([LINE_SERIES], dtype=np.int64)
    shunt = np.zeros((2, 3, 3), dtype=np.complex128)
    load = np.zeros((2, 3), dtype=np.complex128)
    load[1] = 0.1 + 0.05j
    v0n = np.ones((2, 3), dtype=np.complex128)
    bfs_sweep(vh, parent, child, z, kinds, shunt, load, v0n, 1e-8, 100)
