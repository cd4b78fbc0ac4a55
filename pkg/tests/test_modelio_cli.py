import json
import shutil

import numpy as np
import pytest

from cosimpf.cli import main
from cosimpf.errors import ModelError
from cosimpf.modelio import (
    FIXTURE_ENV,
    Scenario,
    fixture_path,
    load_feeder,
    load_models,
    load_scenario,
    load_transmission,
)


class TestLoaders:
    def test_ts1_counts(self, ts1):
        tx, feeders = ts1
        assert tx.n_bus == 9
        assert tx.pcc_buses == ("6",)
        assert len(feeders) == 1
        assert len(feeders[0].nodes) == 4
        # the PCC bus's static load was replaced by the feeder
        assert tx.buses[tx.bus_index("6")].p_sched == 0.0

    def test_ts2_counts(self, ts2):
        tx, feeders = ts2
        assert tx.pcc_buses == ("5", "6", "8")
        assert len(feeders) == 3

    def test_physical_units_converted(self):
        feeder = load_feeder(fixture_path("feeder4.json"))
        z_base = 34.5**2 / 100.0
        raw = json.loads(fixture_path("feeder4.json").read_text())
        z00 = complex(*raw["lines"][0]["z_ohm"][0][0])
        assert feeder.lines[0].z[0, 0] == pytest.approx(z00 / z_base)
        kw = raw["loads"][0]["kw"]
        assert feeder.loads[0].p == pytest.approx(kw / (100e3 / 3))

    def test_empty_file_is_schema_error(self, tmp_path):
        bad = tmp_path / "empty.json"
        bad.write_text("")
        with pytest.raises(ModelError, match="empty"):
            load_transmission(bad)

    def test_invalid_json_reports_line(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{\n "kind": "feeder",\n broken\n}')
        with pytest.raises(ModelError, match="bad.json:3"):
            load_feeder(bad)

    def test_loop_edge_reported_with_name(self, tmp_path):
        raw = json.loads(fixture_path("feeder4.json").read_text())
        raw["lines"].append({"from": "n3", "to": "pcc",
                             "z_ohm": raw["lines"][0]["z_ohm"]})
        bad = tmp_path / "loopy.json"
        bad.write_text(json.dumps(raw))
        with pytest.raises(ModelError, match="non-radial"):
            load_feeder(bad)

    def test_missing_file(self):
        with pytest.raises(ModelError, match="no such file"):
            load_models("nonexistent-case.json")

    def test_fixture_env_override(self, tmp_path, monkeypatch):
        alt = tmp_path / "alt"
        alt.mkdir()
        shutil.copy(fixture_path("feeder4.json"), alt / "feeder4.json")
        raw = json.loads((alt / "feeder4.json").read_text())
        raw["name"] = "overridden"
        (alt / "feeder4.json").write_text(json.dumps(raw))
        monkeypatch.setenv(FIXTURE_ENV, str(alt))
        assert load_feeder(fixture_path("feeder4.json")).name == "overridden"

    def test_scenario_loading(self):
        scenario = load_scenario(fixture_path("scenario_step.json"))
        assert len(scenario.steps) == 10
        assert scenario.steps[0].multiplier == 1.0
        assert scenario.steps[6].multiplier == 1.5

    def test_scenario_constant_builder(self):
        s = Scenario.constant(3, multiplier=1.2)
        assert len(s.steps) == 3
        assert all(st.multiplier == 1.2 for st in s.steps)


class TestCli:
    def test_run_base_case(self, tmp_path):
        rc = main(["run", "--case", "ts1.json", "--method", "fpi",
                   "--out", str(tmp_path)])
        assert rc == 0
        report = (tmp_path / "report.csv").read_text().splitlines()
        header, row = report[0].split(","), report[1].split(",")
        rec = dict(zip(header, row))
        assert rec["converged"] == "true"
        assert 3 <= int(rec["n_iterations"]) <= 10
        assert float(rec["wall_s"]) > 0

    def test_run_network_feeders_flags(self, tmp_path):
        rc = main(["run", "--network", "ieee9.json",
                   "--feeders", "6=feeder4.json", "--method", "newton",
                   "--out", str(tmp_path)])
        assert rc == 0

    def test_eps_monotonicity(self, tmp_path):
        ns = []
        for eps in ("1e-2", "1e-4", "1e-6"):
            out = tmp_path / eps
            rc = main(["run", "--case", "ts1.json", "--eps", eps,
                       "--out", str(out)])
            assert rc == 0
            row = (out / "report.csv").read_text().splitlines()[1].split(",")
            ns.append(int(row[2]))
        assert ns == sorted(ns)

    def test_loose_on_step_change_flags_unconverged(self, tmp_path):
        rc = main(["run", "--case", "ts1.json", "--method", "loose",
                   "--scenario", "scenario_step.json", "--out", str(tmp_path)])
        assert rc == 1
        lines = (tmp_path / "report.csv").read_text().splitlines()
        by_case = {}
        header = lines[0].split(",")
        for line in lines[1:]:
            rec = dict(zip(header, line.split(",")))
            by_case[rec["case"]] = rec["converged"]
        assert by_case["t6"] == "false"  # the 50% step change

    def test_trace_reparses_with_bundled_reader(self, tmp_path):
        from cosimpf.coupling import read_trace_csv

        rc = main(["run", "--case", "ts1.json", "--out", str(tmp_path)])
        assert rc == 0
        rows = read_trace_csv(tmp_path / "trace.csv")
        assert rows and all(np.isfinite(r["residual_norm"]) for r in rows)

    def test_oracle_check_passes_on_bundled_fixture(self, tmp_path, capsys):
        rc = main(["oracle-check", "--case", "ts1.json", "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.count("PASS") == 2
        assert "loose (informational)" in out

    def test_oracle_check_detects_base_mismatch(self, tmp_path, capsys):
        raw = json.loads(fixture_path("feeder4.json").read_text())
        raw["base_mva"] = 50.0
        for ld in raw["loads"]:
            ld["kw"] /= 2.0
            ld["kvar"] /= 2.0
        bad = tmp_path / "feeder_badbase.json"
        bad.write_text(json.dumps(raw))
        rc = main(["oracle-check", "--network", "ieee9.json",
                   "--feeders", f"6={bad}", "--out", str(tmp_path)])
        assert rc == 2
        assert "base mismatch" in capsys.readouterr().err

    def test_compare_txmode_row_count(self, tmp_path):
        rc = main(["compare-txmode", "--case", "ts1.json",
                   "--unbalance", "20,40", "--out", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "txmode.csv").read_text().splitlines()
        assert len(lines) == 1 + 2

    def test_sweep_small_grid(self, tmp_path):
        rc = main(["sweep", "--case", "ts1.json", "--multipliers", "1,1.5",
                   "--unbalance", "0,40", "--methods", "fpi,newton",
                   "--out", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert len(lines) == 1 + 4
        header = lines[0].split(",")
        i_n_fpi = header.index("fpi_n")
        i_n_new = header.index("newton_n")
        for line in lines[1:]:
            cells = line.split(",")
            assert int(cells[i_n_new]) <= int(cells[i_n_fpi])

    def test_unreachable_unbalance_reported(self, tmp_path, caplog):
        rc = main(["sweep", "--case", "ts1.json", "--multipliers", "1",
                   "--unbalance", "99.9", "--methods", "fpi",
                   "--out", str(tmp_path)])
        assert rc == 1
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert "unreachable" in lines[1]

    def test_model_error_exit_code(self, tmp_path):
        rc = main(["run", "--case", "missing.json", "--out", str(tmp_path)])
        assert rc == 1
