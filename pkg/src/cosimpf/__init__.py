"""Quasi-static transmission/distribution co-simulation power flow.

Two dedicated subsystem solvers (three-sequence transmission, three-phase
radial distribution) coupled per time step by fixed-point or Newton
co-iteration of the boundary variables, validated against a monolithic
combined-network solve.
"""

from .backends import backend_name
from .coupling import (
    BoundaryState,
    ConvergenceTrace,
    CoSimConfig,
    InterfaceResidual,
    JacobianBlocks,
    co_iterate,
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
from .dxsolver import (
    DxSolution,
    FeederLine,
    FeederLoad,
    FeederModel,
    FeederNode,
    TheveninEquivalent,
    Transformer,
    solve_f2,
    thevenin_at_pcc,
)
from .errors import (
    BaseMismatchError,
    ConvergenceError,
    CosimError,
    FrameError,
    ModelError,
    PowerFlowError,
    SingularTheveninError,
)
from .modelio import (
    Scenario,
    ScenarioStep,
    fixture_path,
    load_feeder,
    load_models,
    load_scenario,
    load_transmission,
)
from .oracle import CombinedModel, assemble_combined, solve_monolithic
from .seqframes import (
    ComplexTriple,
    Frame,
    SequenceTransform,
    TRANSFORM,
    phase_to_sequence,
    sequence_to_phase,
    unbalance_percent,
)
from .txsolver import (
    Branch,
    Bus,
    SequenceYbus,
    TransmissionModel,
    TxSolution,
    assemble_sequence_ybus,
    solve_f1,
    solve_neg_zero,
    solve_positive_nr,
)

__version__ = "0.1.0"
