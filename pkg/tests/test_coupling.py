import dataclasses

import numpy as np
import pytest

from cosimpf.coupling import (
    BoundaryState,
    CoSimConfig,
    JacobianBlocks,
    co_iterate,
    fd_df2_dv,
    fpi_update,
    initial_boundary,
    jacobian_df1_ds,
    jacobian_df2_dv,
    newton_delta,
    read_trace_csv,
    residual,
    run_loose,
    run_timeseries,
    write_trace_csv,
)
from cosimpf.dxsolver import TheveninEquivalent
from cosimpf.errors import ConvergenceError
from cosimpf.modelio import Scenario
from cosimpf.seqframes import (
    ALPHA,
    TRANSFORM,
    ComplexTriple,
    Frame,
    phase_to_sequence,
    sequence_to_phase,
)

RNG = np.random.default_rng(42)


def rand_triple(frame=Frame.PHASE, scale=1.0):
    z = RNG.normal(size=3) * scale + 1j * RNG.normal(size=3) * scale
    return ComplexTriple.from_array(z, frame)


def fabricated_state(n_pcc=1):
    s_t = tuple(rand_triple() for _ in range(n_pcc))
    v_d = tuple(rand_triple() for _ in range(n_pcc))
    v_t = tuple(rand_triple(Frame.SEQUENCE) for _ in range(n_pcc))
    s_d = tuple(rand_triple() for _ in range(n_pcc))
    return BoundaryState(s_t=s_t, v_d=v_d, v_t=v_t, s_d=s_d, n=1, t=1)


class TestResidual:
    def test_consistent_state_has_zero_residual(self):
        s = rand_triple()
        v_t = rand_triple(Frame.SEQUENCE)
        state = BoundaryState(
            s_t=(s,), v_d=(sequence_to_phase(v_t),), v_t=(v_t,), s_d=(s,),
        )
        res = residual(state)
        assert res.norm == 0.0

    def test_linearity_in_power(self):
        state = fabricated_state()
        res = residual(state)
        delta = ComplexTriple(0.25, 0, 0, Frame.PHASE)
        shifted = dataclasses.replace(state, s_t=(state.s_t[0] + delta,))
        res2 = residual(shifted)
        assert np.allclose(
            res2.r_t[0].as_array() - res.r_t[0].as_array(), delta.as_array()
        )
        assert np.array_equal(res2.r_d[0].as_array(), res.r_d[0].as_array())

    def test_sequence_frame_flag(self):
        state = fabricated_state()
        res = residual(state, seq_frame=True)
        expected = phase_to_sequence(state.v_d[0]) - state.v_t[0]
        assert np.array_equal(res.r_d[0].as_array(), expected.as_array())

    def test_requires_outputs(self):
        state = BoundaryState(s_t=(rand_triple(),), v_d=(rand_triple(),))
        with pytest.raises(ValueError):
            residual(state)


class TestFpiUpdate:
    def test_alpha_minus_one_is_exact_exchange(self):
        state = fabricated_state()
        s_t, v_d = fpi_update(state, -1.0)
        assert s_t[0] is state.s_d[0]  # structural identity, no arithmetic
        expected_v = sequence_to_phase(state.v_t[0])
        assert np.array_equal(v_d[0].as_array(), expected_v.as_array())

    def test_alpha_zero_keeps_inputs(self):
        state = fabricated_state()
        s_t, v_d = fpi_update(state, 0.0)
        assert np.array_equal(s_t[0].as_array(), state.s_t[0].as_array())
        assert np.array_equal(v_d[0].as_array(), state.v_d[0].as_array())

    def test_alpha_half_relaxation_arithmetic(self):
        one = ComplexTriple(1, 1, 1, Frame.PHASE)
        s_d = ComplexTriple(0.8, 0.8, 0.8, Frame.PHASE)
        v_t = phase_to_sequence(one)
        state = BoundaryState(s_t=(one,), v_d=(one,), v_t=(v_t,), s_d=(s_d,))
        s_t, v_d = fpi_update(state, -0.5)
        assert np.allclose(s_t[0].as_array(), 0.9)
        assert np.allclose(v_d[0].as_array(), one.as_array())


class TestFeederPowerBlock:
    def test_diagonal_admittance_balanced_voltage(self):
        y = np.diag([0.5 - 0.2j, 0.5 - 0.2j, 0.5 - 0.2j])
        thev = TheveninEquivalent(z_d=np.linalg.inv(y), y_d=y)
        v = ComplexTriple.balanced(1.02)
        out = jacobian_df2_dv(thev, v)
        m_aa = 2 * np.conj(y[0, 0]) * 1.02
        assert out[0, 0] == pytest.approx(m_aa.real)
        assert out[3, 3] == pytest.approx(m_aa.imag)
        assert out[0, 1] == 0 and out[1, 0] == 0

    def test_identity_admittance_unit_voltages(self):
        thev = TheveninEquivalent(z_d=np.eye(3, dtype=complex),
                                  y_d=np.eye(3, dtype=complex))
        v = ComplexTriple(1, 1, 1, Frame.PHASE)
        out = jacobian_df2_dv(thev, v)
        assert out[0, 0] == pytest.approx(2.0)
        assert out[3, 3] == pytest.approx(0.0)

    def test_matches_finite_differences_on_random_instances(self):
        h = 1e-6
        for _ in range(50):
            y = RNG.normal(size=(3, 3)) + 1j * RNG.normal(size=(3, 3))
            y = (y + y.T) / 2 + np.eye(3) * 2.0  # symmetric, well conditioned
            thev = TheveninEquivalent(z_d=np.linalg.inv(y), y_d=y)
            v = (RNG.uniform(0.9, 1.1, 3)
                 * np.exp(1j * RNG.uniform(-np.pi, np.pi, 3)))
            out = jacobian_df2_dv(thev, ComplexTriple.from_array(v, Frame.PHASE))

            def s_of(vv):
                return vv * np.conj(y @ vv)

            m_fd = np.empty((3, 3), dtype=complex)
            for ph in range(3):
                unit = v[ph] / abs(v[ph])
                vp, vm = v.copy(), v.copy()
                vp[ph] += h * unit
                vm[ph] -= h * unit
                m_fd[:, ph] = (s_of(vp) - s_of(vm)) / (2 * h)
            ref = np.zeros((6, 6))
            ref[:3, :3] = m_fd.real
            ref[3:, 3:] = m_fd.imag
            scale = max(np.max(np.abs(ref)), 1.0)
            assert np.max(np.abs(out - ref)) / scale < 1e-5

    def test_zero_voltage_rejected(self):
        thev = TheveninEquivalent(z_d=np.eye(3, dtype=complex),
                                  y_d=np.eye(3, dtype=complex))
        with pytest.raises(ValueError):
            jacobian_df2_dv(thev, ComplexTriple(0, 1, 1, Frame.PHASE))

    def test_fd_block_matches_closed_form_on_linear_feeder(self, ts1):
        # on an actual feeder the FD block is the constant-power response;
        # sanity: same block pattern and finite values
        _, feeders = ts1
        v = ComplexTriple.balanced(1.05)
        out = fd_df2_dv(feeders[0], v)
        assert out.shape == (6, 6)
        assert np.all(out[:3, 3:] == 0) and np.all(out[3:, :3] == 0)
        assert np.all(np.isfinite(out))


class TestGridVoltageBlock:
    def test_unit_current_column(self):
        i = ComplexTriple(1, 1, 1, Frame.PHASE)
        j = jacobian_df1_ds(i)
        assert j[0, 0] == pytest.approx(1.0)
        assert j[1, 0] == pytest.approx(1.0)
        assert j[2, 0] == pytest.approx(1.0)

    def test_rotation_identity_on_phase_b(self):
        i = ComplexTriple(1, 1, 1, Frame.PHASE)
        j = jacobian_df1_ds(i)
        # 1/a^2 = a because a^3 = 1
        assert j[1, 1] == pytest.approx(ALPHA)
        assert j[2, 1] == pytest.approx(ALPHA**2)

    def test_closed_form_columns(self):
        i = rand_triple()
        j = jacobian_df1_ds(i)
        ic = np.conj(i.as_array())
        a = ALPHA
        expected = np.column_stack([
            [1 / ic[0], 1 / ic[0], 1 / ic[0]],
            [1 / ic[1], 1 / (a * a * ic[1]), 1 / (a * ic[1])],
            [1 / ic[2], 1 / (a * ic[2]), 1 / (a * a * ic[2])],
        ])
        assert np.array_equal(j, expected)

    def test_doubling_currents_halves_entries(self):
        i = rand_triple()
        assert np.array_equal(jacobian_df1_ds(2.0 * i), jacobian_df1_ds(i) / 2.0)

    def test_zero_current_clamped_with_warning(self, caplog):
        import logging

        with caplog.at_level(logging.WARNING):
            j = jacobian_df1_ds(ComplexTriple(0, 1, 1, Frame.PHASE))
        assert "clamping" in caplog.text
        assert np.all(np.isfinite(j))
        assert abs(j[0, 0]) == pytest.approx(1e6)


def contracting_instance(rng=RNG):
    def triple(scale=1.0):
        z = rng.normal(size=3) * scale + 1j * rng.normal(size=3) * scale
        return ComplexTriple.from_array(z, Frame.PHASE)

    r_t = triple(0.1)
    r_d = triple(0.1)
    ds_dv = np.zeros((6, 6))
    ds_dv[:3, :3] = rng.uniform(-0.003, 0.003, (3, 3))
    ds_dv[3:, 3:] = rng.uniform(-0.003, 0.003, (3, 3))
    dv_ds = (rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))) * 0.05
    state = BoundaryState(
        s_t=(triple(),), v_d=(triple(),),
        v_t=(phase_to_sequence(triple()),), s_d=(triple(),),
    )
    res = dataclasses.replace(
        residual(state), r_t=(r_t,), r_d=(r_d,),
    )
    return res, JacobianBlocks(ds_dv=ds_dv, dv_ds=dv_ds)


class TestNewtonDelta:
    def test_zero_residual_gives_zero_deltas(self):
        zero = ComplexTriple(0, 0, 0, Frame.PHASE)
        from cosimpf.coupling import InterfaceResidual

        res = InterfaceResidual(r_t=(zero,), r_d=(zero,), norm=0.0)
        _, blocks = contracting_instance()
        d_s, d_v = newton_delta(res, [blocks], 2)
        assert np.all(d_s[0].as_array() == 0)
        assert np.all(d_v[0].as_array() == 0)

    def test_single_pass_voltage_delta_is_residual_image(self):
        res, blocks = contracting_instance()
        d_s, d_v = newton_delta(res, [blocks], 1)
        assert np.array_equal(d_v[0].as_array(), res.r_d[0].as_array())

    def test_two_passes_match_dense_root_solve_when_contracting(self):
        from scipy.optimize import root

        compose = TRANSFORM.A / 3.0
        rng = np.random.default_rng(7)
        for _ in range(20):
            res, blocks = contracting_instance(rng)
            d_s, d_v = newton_delta(res, [blocks], 2)

            r_t = res.r_t[0].as_array()
            r_d = res.r_d[0].as_array()
            base = np.concatenate([r_t.real, r_t.imag])

            def equations(x):
                ds = x[:3] + 1j * x[3:]
                dv = r_d + compose @ (blocks.dv_ds @ ds)
                mags = np.where(dv.real < 0, -1.0, 1.0) * np.abs(dv)
                dpq = base + blocks.ds_dv @ np.concatenate([mags, mags])
                out = dpq[:3] + 1j * dpq[3:] - ds
                return np.concatenate([out.real, out.imag])

            sol = root(equations, np.zeros(6), tol=1e-14)
            assert sol.success
            ds_ref = sol.x[:3] + 1j * sol.x[3:]
            assert np.max(np.abs(d_s[0].as_array() - ds_ref)) < 1e-6

    def test_block_count_mismatch_rejected(self):
        res, blocks = contracting_instance()
        with pytest.raises(ValueError):
            newton_delta(res, [blocks, blocks], 2)


class TestCoIterate:
    def test_converged_init_returns_after_one_iteration(self, ts1):
        tx, feeders = ts1
        cfg = CoSimConfig(method="fpi")
        state, _ = co_iterate(tx, feeders, cfg, initial_boundary(feeders))
        again, trace = co_iterate(
            tx, feeders, cfg,
            BoundaryState(s_t=state.s_t, v_d=state.v_d, t=1),
        )
        assert trace.iterations == 1
        assert trace.converged

    def test_base_case_counts(self, ts1):
        tx, feeders = ts1
        counts = {}
        for method in ("fpi", "newton"):
            _, trace = co_iterate(tx, feeders, CoSimConfig(method=method),
                                  initial_boundary(feeders))
            counts[method] = trace.iterations
            assert trace.converged
            assert trace.final_norm <= 1e-4
        assert 3 <= counts["fpi"] <= 10
        assert counts["newton"] <= counts["fpi"]

    def test_trace_iterations_strictly_increase(self, ts1):
        tx, feeders = ts1
        _, trace = co_iterate(tx, feeders, CoSimConfig(method="fpi"),
                              initial_boundary(feeders))
        ns = [r.n for r in trace.records]
        assert ns == sorted(set(ns))

    def test_divergence_guard_raises_diagnostic(self, ts1):
        tx, feeders = ts1
        cfg = CoSimConfig(method="fpi", alpha=0.1, max_coiter=50)
        with pytest.raises(ConvergenceError, match="diverging"):
            co_iterate(tx, feeders, cfg, initial_boundary(feeders))

    def test_max_coiter_attaches_trace(self, ts1):
        tx, feeders = ts1
        cfg = CoSimConfig(method="fpi", max_coiter=2)
        with pytest.raises(ConvergenceError) as err:
            co_iterate(tx, feeders, cfg, initial_boundary(feeders))
        assert err.value.trace is not None
        assert err.value.trace.iterations == 2

    def test_jacobian_freshness_matters_under_stress(self, ts1):
        tx, feeders = ts1
        for mult, f_a in ((2.0, 0.31), (2.5, 0.31)):
            fs = [feeders[0].with_loading(mult, (f_a, 1.0, 1.0))]
            fresh_n = stale_n = None
            _, tr = co_iterate(tx, fs, CoSimConfig(method="newton"),
                               initial_boundary(fs))
            fresh_n = tr.iterations
            try:
                _, tr = co_iterate(
                    tx, fs, CoSimConfig(method="newton", refresh_jacobian=False),
                    initial_boundary(fs))
                stale_n = tr.iterations
            except ConvergenceError:
                stale_n = None  # diverged: acceptable per the property
            assert stale_n is None or stale_n > fresh_n


class TestTimeSeries:
    def test_single_step_equals_co_iterate(self, ts1):
        tx, feeders = ts1
        cfg = CoSimConfig(method="fpi")
        state, trace = co_iterate(tx, feeders, cfg, initial_boundary(feeders))
        traces = run_timeseries(tx, feeders, Scenario.constant(1), cfg)
        assert len(traces) == 1
        assert traces[0].iterations == trace.iterations
        last = traces[0].records[-1]
        assert np.array_equal(last.s_t[0].as_array(), state.s_t[0].as_array())

    def test_warm_start_speeds_constant_scenario(self, ts1):
        tx, feeders = ts1
        traces = run_timeseries(tx, feeders, Scenario.constant(3),
                                CoSimConfig(method="fpi"))
        assert all(t.converged for t in traces)
        first = traces[0].iterations
        assert traces[1].iterations < first
        assert traces[2].iterations < first

    def test_every_step_converges_on_variable_scenario(self, ts1):
        from cosimpf.modelio import ScenarioStep

        tx, feeders = ts1
        steps = tuple(
            ScenarioStep(label=f"t{i}", multiplier=1.0 + 0.05 * (i % 5))
            for i in range(12)
        )
        traces = run_timeseries(tx, feeders, Scenario(steps=steps),
                                CoSimConfig(method="newton"))
        assert len(traces) == 12
        assert all(t.converged and t.final_norm <= 1e-4 for t in traces)

    def test_failure_reports_step_index(self, ts1):
        tx, feeders = ts1
        from cosimpf.modelio import ScenarioStep

        steps = (ScenarioStep(label="ok", multiplier=1.0),
                 ScenarioStep(label="boom", multiplier=40.0))
        with pytest.raises(ConvergenceError, match="step 2"):
            run_timeseries(tx, feeders, Scenario(steps=steps),
                           CoSimConfig(method="fpi"))


class TestLoose:
    def test_settles_on_constant_load(self, ts1):
        tx, feeders = ts1
        traces = run_loose(tx, feeders, Scenario.constant(6))
        assert not traces[0].converged  # first exchange cannot be converged
        assert traces[-1].converged  # settled after transient steps

    def test_loose_agrees_with_iterative_after_settling(self, ts1):
        tx, feeders = ts1
        loose = run_loose(tx, feeders, Scenario.constant(8))
        state, _ = co_iterate(tx, feeders, CoSimConfig(method="fpi"),
                              initial_boundary(feeders))
        last = loose[-1].records[-1]
        dev = np.max(np.abs(last.s_t[0].as_array() - state.s_t[0].as_array()))
        assert dev < 2e-4

    def test_step_change_leaves_residual(self, ts1):
        from cosimpf.modelio import ScenarioStep

        tx, feeders = ts1
        steps = tuple(
            ScenarioStep(label=f"t{i}", multiplier=1.0 if i <= 5 else 1.5)
            for i in range(1, 11)
        )
        scenario = Scenario(steps=steps)
        loose = run_loose(tx, feeders, scenario)
        assert loose[5].records[-1].norm > 1e-4  # the change step (t=6)
        iterative = run_timeseries(tx, feeders, scenario, CoSimConfig(method="fpi"))
        assert all(t.final_norm <= 1e-4 for t in iterative)

    def test_zero_load_system_identical_modes(self, ts1):
        tx, _ = ts1
        from cosimpf.dxsolver import FeederLine, FeederModel, FeederNode

        empty = FeederModel(
            name="empty",
            nodes=(FeederNode("pcc"), FeederNode("n1")),
            lines=(FeederLine("pcc", "n1",
                              z=np.eye(3, dtype=complex) * (0.01 + 0.02j)),),
            loads=(), head="pcc", base_mva=100.0,
        )
        loose = run_loose(tx, [empty], Scenario.constant(4))
        state, _ = co_iterate(tx, [empty], CoSimConfig(method="fpi"),
                              initial_boundary([empty]))
        last = loose[-1].records[-1]
        assert np.max(np.abs(last.v_d[0].as_array()
                             - state.v_d[0].as_array())) < 1e-8


class TestTraceCsv:
    def test_round_trip_preserves_floats(self, ts1, tmp_path):
        tx, feeders = ts1
        _, trace = co_iterate(tx, feeders, CoSimConfig(method="fpi"),
                              initial_boundary(feeders))
        path = tmp_path / "trace.csv"
        write_trace_csv([trace], path)
        rows = read_trace_csv(path)
        assert len(rows) == trace.iterations
        for rec, row in zip(trace.records, rows):
            assert row["t"] == rec.t and row["n"] == rec.n
            assert row["residual_norm"] == rec.norm  # 17 digits round-trips
            arr = rec.s_t[0].as_array()
            assert row["pcc0_s_t_a_re"] == arr[0].real
            assert row["pcc0_s_t_b_im"] == arr[1].imag
            v_img = sequence_to_phase(rec.v_t[0]).as_array()
            assert row["pcc0_v_t_phase_c_re"] == v_img[2].real
