"""Model, scenario, and report file handling.

File fields carry their units in the name (z_ohm, kw, z1_pu, ...); this
module owns every conversion to per-unit on the shared system base, so the
in-memory models are always pu. Fixtures bundled with the package can be
redirected with the COSIMPF_FIXTURES environment variable.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dxsolver import FeederLine, FeederLoad, FeederModel, FeederNode, Transformer
from .errors import ModelError
from .txsolver import Branch, Bus, TransmissionModel

FIXTURE_ENV = "COSIMPF_FIXTURES"


def fixture_path(name: str) -> Path:
    override = os.environ.get(FIXTURE_ENV)
    if override:
        p = Path(override) / name
        if p.exists():
            return p
    return Path(__file__).parent / "fixtures" / name


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"{path}: no such file")
    text = path.read_text()
    if not text.strip():
        raise ModelError(f"{path}: empty file")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ModelError(f"{path}: top level must be an object")
    return data


def _complex(value, where: str) -> complex:
    if isinstance(value, (int, float)):
        return complex(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    raise ModelError(f"{where}: expected number or [re, im], got {value!r}")


def _matrix3(value, where: str) -> np.ndarray:
    try:
        rows = [[_complex(value[i][j], where) for j in range(3)] for i in range(3)]
    except (TypeError, IndexError, KeyError) as exc:
        raise ModelError(f"{where}: expected a 3x3 matrix of [re, im]") from exc
    return np.array(rows, dtype=complex)


def load_transmission(path) -> TransmissionModel:
    data = _read_json(path)
    where = str(path)
    if data.get("kind") != "transmission":
        raise ModelError(f"{where}: kind must be 'transmission'")
    try:
        base_mva = float(data["base_mva"])
    except KeyError:
        raise ModelError(f"{where}: base_mva is required") from None
    buses = []
    for i, raw in enumerate(data.get("buses", [])):
        loc = f"{where}: buses[{i}]"
        try:
            buses.append(Bus(
                id=str(raw["id"]),
                kind=str(raw["type"]),
                v_set=float(raw.get("v_set_pu", 1.0)),
                p_sched=float(raw.get("p_sched_pu", 0.0)),
                q_sched=float(raw.get("q_sched_pu", 0.0)),
                z2_source=(
                    _complex(raw["z2_source_pu"], loc)
                    if "z2_source_pu" in raw else None
                ),
                z0_ground=(
                    _complex(raw["z0_ground_pu"], loc)
                    if "z0_ground_pu" in raw else None
                ),
            ))
        except KeyError as exc:
            raise ModelError(f"{loc}: missing field {exc}") from None
    branches = []
    for i, raw in enumerate(data.get("branches", [])):
        loc = f"{where}: branches[{i}]"
        try:
            z1 = _complex(raw["z1_pu"], loc)
            z0 = _complex(raw["z0_pu"], loc) if "z0_pu" in raw else z1
            branches.append(Branch(
                from_bus=str(raw["from"]), to_bus=str(raw["to"]),
                z1=z1, z0=z0,
                z2=_complex(raw["z2_pu"], loc) if "z2_pu" in raw else None,
                b_shunt=float(raw.get("b_shunt_pu", 0.0)),
            ))
        except KeyError as exc:
            raise ModelError(f"{loc}: missing field {exc}") from None
    try:
        return TransmissionModel(
            buses=tuple(buses), branches=tuple(branches), base_mva=base_mva
        )
    except ModelError as exc:
        raise ModelError(f"{where}: {exc}") from exc


def load_feeder(path) -> FeederModel:
    data = _read_json(path)
    where = str(path)
    if data.get("kind") != "feeder":
        raise ModelError(f"{where}: kind must be 'feeder'")
    try:
        base_mva = float(data["base_mva"])
        kv_ll = float(data["kv_ll"])
        head = str(data["head_node"])
    except KeyError as exc:
        raise ModelError(f"{where}: missing field {exc}") from None
    z_base = kv_ll * kv_ll / base_mva  # ohm
    s_phase_base_kw = base_mva * 1000.0 / 3.0

    nodes = []
    for i, raw in enumerate(data.get("nodes", [])):
        nodes.append(FeederNode(id=str(raw["id"]), phases=str(raw.get("phases", "abc"))))

    lines = []
    for i, raw in enumerate(data.get("lines", [])):
        loc = f"{where}: lines[{i}]"
        if "z_ohm" in raw:
            z = _matrix3(raw["z_ohm"], loc) / z_base
        elif "z_pu" in raw:
            z = _matrix3(raw["z_pu"], loc)
        else:
            raise ModelError(f"{loc}: needs z_ohm or z_pu")
        ysh = None
        if "y_shunt_s" in raw:
            ysh = _matrix3(raw["y_shunt_s"], loc) * z_base
        elif "y_shunt_pu" in raw:
            ysh = _matrix3(raw["y_shunt_pu"], loc)
        lines.append(FeederLine(
            from_node=str(raw["from"]), to_node=str(raw["to"]), z=z, y_shunt=ysh,
        ))

    loads = []
    for i, raw in enumerate(data.get("loads", [])):
        loc = f"{where}: loads[{i}]"
        if "kw" in raw:
            p = float(raw["kw"]) / s_phase_base_kw
            q = float(raw.get("kvar", 0.0)) / s_phase_base_kw
        elif "p_pu" in raw:
            p = float(raw["p_pu"])
            q = float(raw.get("q_pu", 0.0))
        else:
            raise ModelError(f"{loc}: needs kw or p_pu")
        loads.append(FeederLoad(
            node=str(raw["node"]), phase=str(raw["phase"]),
            p=p, q=q, alloc=float(raw.get("alloc", 1.0)),
        ))

    transformer = None
    if "transformer" in data:
        raw = data["transformer"]
        loc = f"{where}: transformer"
        try:
            z_rating = _complex(raw["z_pu_on_rating"], loc)
            rated = float(raw["rated_mva"])
        except KeyError as exc:
            raise ModelError(f"{loc}: missing field {exc}") from None
        transformer = Transformer(
            z=z_rating * (base_mva / rated),
            connection=str(raw.get("connection", "wye-g/wye-g")),
            lv_node=str(raw["lv_node"]),
        )

    try:
        return FeederModel(
            name=str(data.get("name", Path(where).stem)),
            nodes=tuple(nodes), lines=tuple(lines), loads=tuple(loads),
            head=head, transformer=transformer, base_mva=base_mva, kv_ll=kv_ll,
        )
    except ModelError as exc:
        raise ModelError(f"{where}: {exc}") from exc


def load_models(path):
    """Load a case file: transmission network plus one feeder per PCC.

    The case maps PCC bus ids to feeder files (paths relative to the case
    file); the named buses have their static load replaced by the feeders.
    Returns (TransmissionModel, [FeederModel, ...]).
    """
    data = _read_json(path)
    where = str(path)
    if data.get("kind") != "case":
        raise ModelError(f"{where}: kind must be 'case'")
    base = Path(path).parent
    try:
        tx = load_transmission(base / data["network"])
        pcc_map = data["feeders"]
    except KeyError as exc:
        raise ModelError(f"{where}: missing field {exc}") from None
    if not isinstance(pcc_map, dict) or not pcc_map:
        raise ModelError(f"{where}: feeders must map PCC bus ids to feeder files")
    feeders = []
    pcc_buses = []
    for bus_id, feeder_file in pcc_map.items():
        pcc_buses.append(str(bus_id))
        feeders.append(load_feeder(base / feeder_file))
    tx = tx.replace_pcc(tuple(pcc_buses))
    for f in feeders:
        if f.base_mva != tx.base_mva:
            raise ModelError(
                f"{where}: feeder {f.name} base {f.base_mva} MVA does not match "
                f"network base {tx.base_mva} MVA"
            )
    return tx, feeders


# --- scenarios ---------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioStep:
    label: str
    multiplier: float = 1.0
    alloc_factors: tuple | None = None  # per feeder: (fa, fb, fc)

    def __post_init__(self):
        if self.multiplier <= 0:
            raise ModelError(f"step {self.label!r}: multiplier must be positive")
        if self.alloc_factors is not None:
            for fac in self.alloc_factors:
                if any(f < 0 for f in fac):
                    raise ModelError(
                        f"step {self.label!r}: allocation factors must be >= 0"
                    )


@dataclass(frozen=True)
class Scenario:
    steps: tuple[ScenarioStep, ...]
    unbalance_targets: tuple[float, ...] = ()

    @classmethod
    def constant(cls, n_steps: int = 1, multiplier: float = 1.0,
                 alloc_factors=None) -> "Scenario":
        steps = tuple(
            ScenarioStep(label=f"t{i}", multiplier=multiplier,
                         alloc_factors=alloc_factors)
            for i in range(1, n_steps + 1)
        )
        return cls(steps=steps)


def load_scenario(path) -> Scenario:
    data = _read_json(path)
    where = str(path)
    if data.get("kind") != "scenario":
        raise ModelError(f"{where}: kind must be 'scenario'")
    steps = []
    for i, raw in enumerate(data.get("steps", [])):
        alloc = raw.get("alloc_factors")
        if alloc is not None:
            alloc = tuple(tuple(float(x) for x in fac) for fac in alloc)
        steps.append(ScenarioStep(
            label=str(raw.get("label", f"t{i + 1}")),
            multiplier=float(raw.get("multiplier", 1.0)),
            alloc_factors=alloc,
        ))
    if not steps:
        raise ModelError(f"{where}: scenario has no steps")
    targets = tuple(float(x) for x in data.get("unbalance_targets", []))
    return Scenario(steps=tuple(steps), unbalance_targets=targets)


# --- run reports -------------------------------------------------------------


@dataclass
class ReportRow:
    case: str
    method: str
    n_iterations: int
    wall_s: float
    converged: bool
    unbalance_current_pct: float = float("nan")
    unbalance_voltage_pct: float = float("nan")
    boundary: dict = field(default_factory=dict)  # column -> float


@dataclass
class RunReport:
    rows: list[ReportRow] = field(default_factory=list)

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.rows)


def write_report_csv(report: RunReport, path):
    fixed = ["case", "method", "n_iterations", "wall_s", "converged",
             "unbalance_current_pct", "unbalance_voltage_pct"]
    extra = []
    for row in report.rows:
        for key in row.boundary:
            if key not in extra:
                extra.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fixed + extra)
        for row in report.rows:
            rec = [row.case, row.method, str(row.n_iterations),
                   format(row.wall_s, ".17g"), str(row.converged).lower(),
                   format(row.unbalance_current_pct, ".17g"),
                   format(row.unbalance_voltage_pct, ".17g")]
            rec += [format(row.boundary.get(k, float("nan")), ".17g") for k in extra]
            writer.writerow(rec)


def boundary_columns(state) -> dict:
    """Flatten a BoundaryState's per-PCC triples into report columns."""
    out = {}
    quants = {"s_t": state.s_t, "v_d": state.v_d, "s_d": state.s_d}
    for name, triples in quants.items():
        if triples is None:
            continue
        for k, trip in enumerate(triples):
            arr = trip.as_array()
            for ph, label in enumerate("abc"):
                out[f"pcc{k}_{name}_{label}_re"] = float(arr[ph].real)
                out[f"pcc{k}_{name}_{label}_im"] = float(arr[ph].imag)
    return out
