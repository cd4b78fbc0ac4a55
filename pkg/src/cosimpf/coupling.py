"""Interface residuals, boundary update rules, and the co-iteration loop.

Both subsystem solvers are evaluated from the same iterate (Jacobi
exchange), the interface residual is checked, and on non-convergence the
boundary variables are updated either by relaxed fixed-point iteration or
by the Newton scheme. The Newton blocks are rebuilt every co-iteration:
the feeder power block from the feeder's own response around the operating
point (or the Thevenin closed form via config) and the grid voltage block
from the interface currents.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dxsolver import FeederModel, TheveninEquivalent, solve_f2, thevenin_at_pcc
from .errors import ConvergenceError, PowerFlowError
from .seqframes import (
    ALPHA,
    TRANSFORM,
    ComplexTriple,
    Frame,
    phase_to_sequence,
    sequence_to_phase,
)
from .txsolver import POSITIVE_ONLY, THREE_SEQUENCE, TransmissionModel, solve_f1

log = logging.getLogger(__name__)

FPI = "fpi"
NEWTON = "newton"
LOOSE = "loose"

PHASES = "abc"


@dataclass(frozen=True)
class CoSimConfig:
    eps: float = 1e-4
    alpha: float = -1.0
    max_coiter: int = 50
    inner_newton_iters: int = 1
    method: str = FPI
    tx_mode: str = THREE_SEQUENCE
    # test hooks / numerical guards
    newton_signed_dv: bool = True
    refresh_jacobian: bool = True
    seq_frame_residual: bool = False
    min_interface_current: float = 1e-6
    divergence_patience: int = 5
    # feeder power block: True differentiates the constant-power response of
    # f2 directly; False uses the constant-impedance Thevenin closed form,
    # whose derivative class cannot contract the co-iteration (see README).
    newton_fd_feeder_block: bool = True
    newton_max_step_v: float = 0.15  # per-iteration cap on |delta V_D|

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.max_coiter < 1:
            raise ValueError("max_coiter must be >= 1")
        if self.inner_newton_iters < 1:
            raise ValueError("inner_newton_iters must be >= 1")
        if self.method not in (FPI, NEWTON, LOOSE):
            raise ValueError(f"unknown method {self.method!r}")
        if self.tx_mode not in (THREE_SEQUENCE, POSITIVE_ONLY):
            raise ValueError(f"unknown tx_mode {self.tx_mode!r}")


@dataclass(frozen=True)
class BoundaryState:
    """Per-PCC boundary variables at one co-iteration.

    s_t/v_d are the subsystem inputs; v_t/s_d/i_abc hold the latest
    subsystem outputs (None before the first solve).
    """

    s_t: tuple[ComplexTriple, ...]  # phase-frame demand given to transmission
    v_d: tuple[ComplexTriple, ...]  # phase-frame head voltage given to feeders
    v_t: tuple[ComplexTriple, ...] | None = None  # sequence-frame PCC voltages
    s_d: tuple[ComplexTriple, ...] | None = None  # phase-frame feeder demand
    i_abc: tuple[ComplexTriple, ...] | None = None  # interface phase currents
    n: int = 0
    t: int = 0


@dataclass(frozen=True)
class InterfaceResidual:
    r_t: tuple[ComplexTriple, ...]  # power mismatch per PCC
    r_d: tuple[ComplexTriple, ...]  # voltage mismatch per PCC
    norm: float  # inf-norm over real/imag parts of every component


@dataclass(frozen=True)
class JacobianBlocks:
    """Interface Jacobian blocks for one PCC."""

    ds_dv: np.ndarray  # real 6x6, (P_a..Q_c) against phase |V|
    dv_ds: np.ndarray  # complex 3x3, sequence voltages against phase powers


@dataclass(frozen=True)
class TraceRecord:
    t: int
    n: int
    s_t: tuple[ComplexTriple, ...]
    v_d: tuple[ComplexTriple, ...]
    v_t: tuple[ComplexTriple, ...]
    s_d: tuple[ComplexTriple, ...]
    norm: float
    elapsed_ms: float


@dataclass
class ConvergenceTrace:
    t: int
    method: str
    records: list[TraceRecord] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def final_norm(self) -> float:
        return self.records[-1].norm if self.records else float("nan")


def residual(state: BoundaryState, seq_frame: bool = False) -> InterfaceResidual:
    """Interface residual: R_T = S_T - S_D and the voltage mismatch.

    The voltage mismatch defaults to the phase frame, V_D minus the phase
    image of V_T; with seq_frame=True it is checked in the sequence frame
    instead. The norm is the inf-norm over real and imaginary parts.
    """
    if state.v_t is None or state.s_d is None:
        raise ValueError("residual needs fresh subsystem outputs on the state")
    r_t = []
    r_d = []
    worst = 0.0
    for k in range(len(state.s_t)):
        rt = state.s_t[k] - state.s_d[k]
        if seq_frame:
            rd = phase_to_sequence(state.v_d[k]) - state.v_t[k]
        else:
            rd = state.v_d[k] - sequence_to_phase(state.v_t[k])
        r_t.append(rt)
        r_d.append(rd)
        for trip in (rt, rd):
            arr = trip.as_array()
            worst = max(
                worst,
                float(np.max(np.abs(arr.real))),
                float(np.max(np.abs(arr.imag))),
            )
    return InterfaceResidual(r_t=tuple(r_t), r_d=tuple(r_d), norm=worst)


def fpi_update(state: BoundaryState, alpha: float):
    """Relaxed fixed-point update of the subsystem inputs.

    For alpha = -1 this reduces exactly to exchanging the subsystem outputs,
    which is implemented as a structural identity (no arithmetic).
    """
    if state.v_t is None or state.s_d is None:
        raise ValueError("fpi_update needs fresh subsystem outputs on the state")
    v_t_phase = tuple(sequence_to_phase(v) for v in state.v_t)
    if alpha == -1.0:
        return tuple(state.s_d), v_t_phase
    s_t = tuple(
        state.s_t[k] + alpha * (state.s_t[k] - state.s_d[k])
        for k in range(len(state.s_t))
    )
    v_d = tuple(
        state.v_d[k] + alpha * (state.v_d[k] - v_t_phase[k])
        for k in range(len(state.v_d))
    )
    return s_t, v_d


def jacobian_df2_dv(thev: TheveninEquivalent, v_d: ComplexTriple) -> np.ndarray:
    """Real 6x6 sensitivity of feeder phase powers to phase voltage magnitudes.

    Evaluates the closed-form partials of the Thevenin-linearized power
    S = V o (Y_D V)* and splits them into the P-rows/Q-rows block pattern.
    """
    if v_d.frame is not Frame.PHASE:
        raise ValueError("jacobian_df2_dv expects a phase-frame voltage")
    v = v_d.as_array()
    vm = np.abs(v)
    if np.any(vm == 0):
        raise ValueError("zero phase-voltage magnitude at the PCC")
    yc = np.conj(thev.y_d)
    m = np.empty((3, 3), dtype=complex)
    for i in range(3):
        for j in range(3):
            if i == j:
                acc = 2.0 * yc[i, i] * vm[i]
                for k in range(3):
                    if k != i:
                        acc += v[i] * yc[i, k] * np.conj(v[k]) / vm[i]
                m[i, i] = acc
            else:
                m[i, j] = v[i] * yc[i, j] * np.conj(v[j]) / vm[j]
    out = np.zeros((6, 6), dtype=float)
    out[:3, :3] = m.real
    out[3:, 3:] = m.imag
    return out


def jacobian_df1_ds(i_abc: ComplexTriple, min_current: float = 1e-6) -> np.ndarray:
    """Complex 3x3 sensitivity of PCC sequence voltages to phase powers.

    Column structure per interface phase current; entries are 1/(rot * I*)
    with the rotation fixed by the sequence composition. Currents below
    ``min_current`` are clamped in magnitude (with a warning) because the
    expressions are singular at zero interface current.
    """
    if i_abc.frame is not Frame.PHASE:
        raise ValueError("jacobian_df1_ds expects phase-frame currents")
    i = i_abc.as_array().copy()
    for ph in range(3):
        mag = abs(i[ph])
        if mag < min_current:
            log.warning(
                "interface current on phase %s is %.3g pu; clamping to %.1g",
                PHASES[ph], mag, min_current,
            )
            i[ph] = min_current if mag == 0 else i[ph] * (min_current / mag)
    ic = np.conj(i)
    a = ALPHA
    a2 = a * a
    out = np.empty((3, 3), dtype=complex)
    out[:, 0] = [1 / ic[0], 1 / ic[0], 1 / ic[0]]
    out[:, 1] = [1 / ic[1], 1 / (a2 * ic[1]), 1 / (a * ic[1])]
    out[:, 2] = [1 / ic[2], 1 / (a * ic[2]), 1 / (a2 * ic[2])]
    return out


def _signed_magnitudes(dv: np.ndarray, signed: bool, v_ref) -> np.ndarray:
    """Magnitude-change image of a complex voltage delta.

    Signed form projects each component onto its present voltage direction,
    so it is the change in |V| that the dS/d|V| block pairs with; without a
    reference the sign falls back to the real part's direction (the two
    agree for phase-a-aligned or real quantities). Unsigned keeps plain
    magnitudes.
    """
    if not signed:
        return np.abs(dv)
    if v_ref is None:
        return np.where(dv.real < 0, -1.0, 1.0) * np.abs(dv)
    unit = v_ref / np.abs(v_ref)
    return (np.conj(unit) * dv).real


def newton_delta(res: InterfaceResidual, blocks, inner_iters: int,
                 signed_dv: bool = True, v_ref=None):
    """Boundary deltas from the block Jacobian, without inverting it.

    Starting from a zero power delta, alternates the voltage-delta equation
    with the power-delta equation exactly ``inner_iters`` times per PCC.
    ``blocks`` is one JacobianBlocks per PCC (block-diagonal across PCCs).
    ``v_ref`` (per-PCC phase voltages) anchors the signed magnitude
    projection. Returns (delta_S_T, delta_V_D) tuples of phase-frame triples.
    """
    n_pcc = len(res.r_t)
    if len(blocks) != n_pcc:
        raise ValueError("need one Jacobian block set per PCC")
    d_s = []
    d_v = []
    # Each dv_ds entry carries the full phase-frame sensitivity of one
    # sequence component; recomposing through A therefore needs the 1/3 of
    # the decomposition matrix or every component is counted three times.
    compose = TRANSFORM.A / 3.0
    for k in range(n_pcc):
        r_t = res.r_t[k].as_array()
        r_d = res.r_d[k].as_array()
        ref = v_ref[k].as_array() if v_ref is not None else None
        base = np.concatenate([r_t.real, r_t.imag])
        ds = np.zeros(3, dtype=complex)
        dv = np.zeros(3, dtype=complex)
        for _ in range(inner_iters):
            dv = r_d + compose @ (blocks[k].dv_ds @ ds)
            mags = _signed_magnitudes(dv, signed_dv, ref)
            dpq = base + blocks[k].ds_dv @ np.concatenate([mags, mags])
            ds = dpq[:3] + 1j * dpq[3:]
        if not (np.all(np.isfinite(ds)) and np.all(np.isfinite(dv))):
            raise PowerFlowError("non-finite Newton delta (degenerate blocks)")
        d_s.append(ComplexTriple.from_array(ds, Frame.PHASE))
        d_v.append(ComplexTriple.from_array(dv, Frame.PHASE))
    return tuple(d_s), tuple(d_v)


def fd_df2_dv(feeder: FeederModel, v_d: ComplexTriple, h: float = 1e-5) -> np.ndarray:
    """Feeder power sensitivity to phase voltage magnitudes, by re-solving f2.

    Central differences of the constant-power feeder response around the
    operating point; same 6x6 block pattern as jacobian_df2_dv. This is the
    derivative the Newton co-iteration needs: the constant-impedance Thevenin
    closed form linearizes the loads themselves and systematically
    mispredicts a constant-power feeder.
    """
    v = v_d.as_array()
    m = np.empty((3, 3), dtype=complex)
    for ph in range(3):
        unit = v[ph] / abs(v[ph])
        vp = v.copy()
        vp[ph] += h * unit
        vm = v.copy()
        vm[ph] -= h * unit
        s_p = solve_f2(feeder, ComplexTriple.from_array(vp, Frame.PHASE)).s_d
        s_m = solve_f2(feeder, ComplexTriple.from_array(vm, Frame.PHASE)).s_d
        m[:, ph] = (s_p.as_array() - s_m.as_array()) / (2.0 * h)
    out = np.zeros((6, 6), dtype=float)
    out[:3, :3] = m.real
    out[3:, 3:] = m.imag
    return out


def _cap_step(delta: ComplexTriple, limit: float) -> ComplexTriple:
    """Scale a voltage step down to the trust-region limit, keeping direction."""
    worst = float(np.max(np.abs(delta.as_array())))
    if worst <= limit:
        return delta
    return delta * (limit / worst)


def _solve_feeders(feeders, v_d):
    if len(feeders) == 1:
        return [solve_f2(feeders[0], v_d[0])]
    with ThreadPoolExecutor(max_workers=len(feeders)) as pool:
        return list(pool.map(solve_f2, feeders, v_d))


def initial_boundary(feeders, v0: complex = 1.05, t: int = 1) -> BoundaryState:
    """Cold-start boundary: nominal aggregate demand, balanced head voltage."""
    s_t = tuple(f.nominal_demand() for f in feeders)
    v_d = tuple(ComplexTriple.balanced(v0) for _ in feeders)
    return BoundaryState(s_t=s_t, v_d=v_d, t=t)


def co_iterate(tx: TransmissionModel, feeders, cfg: CoSimConfig,
               init: BoundaryState):
    """Algorithm-1 inner loop for one time step.

    Returns (converged BoundaryState, ConvergenceTrace). Raises
    ConvergenceError (with the partial trace attached) when max_coiter is
    exhausted or the fixed-point iteration keeps diverging.
    """
    if len(feeders) != len(tx.pcc_buses):
        raise ValueError("one feeder per PCC bus is required")
    trace = ConvergenceTrace(t=init.t, method=cfg.method)
    s_t = tuple(init.s_t)
    v_d = tuple(init.v_d)
    v1_warm = None
    blocks = None
    prev_norm = float("inf")
    grow = 0

    for n in range(1, cfg.max_coiter + 1):
        tic = time.perf_counter()
        txsol = solve_f1(tx, s_t, mode=cfg.tx_mode, v1_init=v1_warm)
        dxsols = _solve_feeders(feeders, v_d)
        v1_warm = txsol.v1

        state = BoundaryState(
            s_t=s_t, v_d=v_d, v_t=txsol.v_t,
            s_d=tuple(d.s_d for d in dxsols),
            i_abc=txsol.i_abc, n=n, t=init.t,
        )
        res = residual(state, seq_frame=cfg.seq_frame_residual)
        trace.records.append(TraceRecord(
            t=init.t, n=n, s_t=s_t, v_d=v_d, v_t=txsol.v_t,
            s_d=state.s_d, norm=res.norm,
            elapsed_ms=(time.perf_counter() - tic) * 1e3,
        ))

        if res.norm <= cfg.eps:
            trace.converged = True
            return state, trace

        if res.norm > prev_norm:
            grow += 1
            if cfg.method == FPI and grow >= cfg.divergence_patience:
                raise ConvergenceError(
                    f"fixed-point iteration diverging: residual grew for {grow} "
                    f"consecutive iterations (last norm {res.norm:.3e})",
                    trace=trace,
                )
        else:
            grow = 0
        prev_norm = res.norm

        if cfg.method == NEWTON:
            if cfg.refresh_jacobian or blocks is None:
                blocks = []
                for k in range(len(feeders)):
                    if cfg.newton_fd_feeder_block:
                        ds_dv = fd_df2_dv(feeders[k], v_d[k])
                    else:
                        thev = thevenin_at_pcc(feeders[k], dxsols[k])
                        ds_dv = jacobian_df2_dv(thev, v_d[k])
                    blocks.append(JacobianBlocks(
                        ds_dv=ds_dv,
                        dv_ds=jacobian_df1_ds(
                            txsol.i_abc[k], cfg.min_interface_current
                        ),
                    ))
            d_s, d_v = newton_delta(
                res, blocks, cfg.inner_newton_iters, cfg.newton_signed_dv,
                v_ref=v_d,
            )
            d_v = tuple(_cap_step(dv, cfg.newton_max_step_v) for dv in d_v)
            s_t = tuple(s_t[k] - d_s[k] for k in range(len(s_t)))
            v_d = tuple(v_d[k] - d_v[k] for k in range(len(v_d)))
        else:
            s_t, v_d = fpi_update(state, cfg.alpha)

    raise ConvergenceError(
        f"boundary did not converge in {cfg.max_coiter} co-iterations "
        f"(final norm {trace.final_norm:.3e})",
        trace=trace,
    )


def _feeders_at_step(feeders, step):
    factors = step.alloc_factors or [(1.0, 1.0, 1.0)] * len(feeders)
    if len(factors) != len(feeders):
        raise ValueError(
            f"scenario step {step.label!r}: {len(factors)} allocation factor "
            f"sets for {len(feeders)} feeders"
        )
    return [
        f.with_loading(step.multiplier, factors[k]) for k, f in enumerate(feeders)
    ]


def run_timeseries(tx: TransmissionModel, feeders, scenario, cfg: CoSimConfig):
    """Quasi-static time series: converge the boundary at every step.

    The boundary is warm-started from the previous step's converged values;
    no step advances until the current one has converged.
    """
    traces = []
    boundary = None
    for t, step in enumerate(scenario.steps, start=1):
        feeders_t = _feeders_at_step(feeders, step)
        if boundary is None:
            boundary = initial_boundary(feeders_t, t=t)
        else:
            boundary = BoundaryState(
                s_t=boundary.s_t, v_d=boundary.v_d, t=t
            )
        try:
            final, trace = co_iterate(tx, feeders_t, cfg, boundary)
        except ConvergenceError as exc:
            raise ConvergenceError(
                f"time step {t} ({step.label!r}): {exc}", trace=exc.trace
            ) from exc
        traces.append(trace)
        boundary = final
    return traces


def run_loose(tx: TransmissionModel, feeders, scenario, cfg: CoSimConfig | None = None):
    """Loosely coupled baseline: one exchange per step, no co-iteration.

    Each step solves both subsystems once from the carried-over boundary,
    records the residual actually left unconverged, exchanges the outputs,
    and advances.
    """
    cfg = cfg or CoSimConfig(method=LOOSE)
    traces = []
    boundary = None
    for t, step in enumerate(scenario.steps, start=1):
        feeders_t = _feeders_at_step(feeders, step)
        if boundary is None:
            boundary = initial_boundary(feeders_t, t=t)
        tic = time.perf_counter()
        txsol = solve_f1(tx, boundary.s_t, mode=cfg.tx_mode)
        dxsols = _solve_feeders(feeders_t, boundary.v_d)
        state = BoundaryState(
            s_t=boundary.s_t, v_d=boundary.v_d, v_t=txsol.v_t,
            s_d=tuple(d.s_d for d in dxsols), i_abc=txsol.i_abc, n=1, t=t,
        )
        res = residual(state, seq_frame=cfg.seq_frame_residual)
        trace = ConvergenceTrace(t=t, method=LOOSE)
        trace.records.append(TraceRecord(
            t=t, n=1, s_t=state.s_t, v_d=state.v_d, v_t=state.v_t,
            s_d=state.s_d, norm=res.norm,
            elapsed_ms=(time.perf_counter() - tic) * 1e3,
        ))
        trace.converged = res.norm <= cfg.eps
        traces.append(trace)
        s_t, v_d = fpi_update(state, -1.0)
        boundary = BoundaryState(s_t=s_t, v_d=v_d, t=t + 1)
    return traces


# --- trace CSV interface ---------------------------------------------------

_QUANTITIES = ("s_t", "v_d", "s_d", "v_t_phase")


def trace_columns(n_pcc: int) -> list[str]:
    cols = ["t", "n"]
    for k in range(n_pcc):
        for quant in _QUANTITIES:
            for ph in PHASES:
                cols.append(f"pcc{k}_{quant}_{ph}_re")
                cols.append(f"pcc{k}_{quant}_{ph}_im")
    cols += ["residual_norm", "elapsed_ms"]
    return cols


def write_trace_csv(traces, path):
    """One row per (t, n) with 17-significant-digit fields."""
    traces = list(traces)
    if not traces or not traces[0].records:
        raise ValueError("nothing to write")
    n_pcc = len(traces[0].records[0].s_t)

    def fmt(x: float) -> str:
        return format(x, ".17g")

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trace_columns(n_pcc))
        for trace in traces:
            for rec in trace.records:
                row = [str(rec.t), str(rec.n)]
                quants = (
                    rec.s_t, rec.v_d, rec.s_d,
                    tuple(sequence_to_phase(v) for v in rec.v_t),
                )
                for k in range(n_pcc):
                    for quant in quants:
                        arr = quant[k].as_array()
                        for ph in range(3):
                            row.append(fmt(arr[ph].real))
                            row.append(fmt(arr[ph].imag))
                row.append(fmt(rec.norm))
                row.append(fmt(rec.elapsed_ms))
                writer.writerow(row)


def read_trace_csv(path) -> list[dict]:
    """Parse a trace CSV back into one dict of floats per row."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {key: (int(val) if key in ("t", "n") else float(val))
                   for key, val in raw.items()}
            rows.append(row)
    return rows
