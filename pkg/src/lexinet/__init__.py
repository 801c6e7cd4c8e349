"""Distributed lexicographic model-predictive control of urban traffic networks."""

from .network import (
    Junction,
    MissingJunction,
    Network,
    Partition,
    Phase,
    RoadLink,
    ValidationReport,
    build_partition,
    validate_network,
)
from .dynamics import (
    ControlInput,
    DimensionMismatch,
    ExogenousForecast,
    TrafficState,
    Violation,
    check_feasibility,
    predict_trajectory,
    step_plant,
)
from .problem_builder import (
    ControlParams,
    InfeasibleDetected,
    LocalProblem,
    NotConverged,
    VariableLayout,
    build_pc_problem,
    build_weighted_problem,
    extract_first_step_controls,
    layout_variables,
    lift_tsc_problem,
)
from .admm_solver import (
    AgentIterate,
    ConvergenceReport,
    MissingMessage,
    SingularKKT,
    SolverConfig,
    SynchronousBus,
    TransportFailure,
    dist_sol,
    min_consensus_terminate,
    proximal_x_update,
    slack_dual_update,
)
from .reference_solver import (
    GlobalProblem,
    Infeasible,
    MaxIterations,
    Unbounded,
    assemble_global,
    solve_centralized,
    solve_lexicographic_centralized,
)
from .scenario import ParseError, Scenario, ValidationError, load_scenario
from .harness import (
    RunLog,
    UnsupportedStrategy,
    emit_metrics,
    run_closed_loop,
    solve_step,
)

__version__ = "0.1.0"
