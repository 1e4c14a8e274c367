"""Hover control for a flapping-wing vehicle.

Lie-group plant model on R^3 x SO(3), structure-preserving integrators, a
predictive-control expert around a periodic hovering orbit, and imitation
learning (behavior cloning, on-policy aggregation, noise injection, and
expert-free constrained iteration) with closed-loop evaluation.
"""

__version__ = "0.1.0"

from .liegroup import (
    attitude_error,
    attitude_error_inverse,
    exp_so3,
    hat,
    log_so3,
    orthogonality_error,
    vee,
)
from .wingkin import (
    DELTA_MAX,
    N_KNOTS,
    U_LAYOUT_VERSION,
    ControlSchedule,
    WingParams,
    apply_delta,
    reference_wing_params,
)
from .dynamics import FreeState, Morphology, eom_rhs
from .integrate import (
    CG3_TABLEAU,
    CG4_TABLEAU,
    LIE_EULER_TABLEAU,
    Trajectory,
    order_test,
    simulate,
)
from .expert import (
    DEFAULT_W_X,
    CostWeights,
    MPCOptions,
    MPCResult,
    ReferenceOrbit,
    StateError,
    find_periodic_orbit,
    mpc_controller,
    mpc_solve,
    mpc_solve_info,
    perturb_state,
    weighted_error,
)
from .datagen import (
    Dataset,
    closed_loop_errors,
    generate_dataset,
    load_dataset,
    make_expert,
    make_simulator,
    sample_initial_error,
    save_dataset,
)
from .policy import (
    NetArch,
    NeuralPolicy,
    TrainOptions,
    forward,
    grad_theta,
    init_policy,
    load_policy,
    mse,
    param_count,
    save_policy,
    train,
    train_history,
)
from .imitation import (
    FisherMatrix,
    ILConfig,
    IterRecord,
    behavior_cloning,
    coil,
    constrained_project,
    constraint_norm,
    dagger,
    dart,
    fim_estimate,
    kl_gaussian,
    write_metrics,
)
from .evalharness import (
    AlgoSummary,
    BoundednessMetrics,
    NoiseSweepResult,
    SweepResult,
    boundedness_fit,
    compare_report,
    measure_policy_latency,
    noise_sweep,
    sweep,
)

__all__ = [
    "__version__",
    "attitude_error", "attitude_error_inverse", "exp_so3", "hat", "log_so3",
    "orthogonality_error", "vee",
    "DELTA_MAX", "N_KNOTS", "U_LAYOUT_VERSION", "ControlSchedule",
    "WingParams", "apply_delta", "reference_wing_params",
    "FreeState", "Morphology", "eom_rhs",
    "CG3_TABLEAU", "CG4_TABLEAU", "LIE_EULER_TABLEAU", "Trajectory",
    "order_test", "simulate",
    "DEFAULT_W_X", "CostWeights", "MPCOptions", "MPCResult",
    "ReferenceOrbit", "StateError", "find_periodic_orbit", "mpc_controller",
    "mpc_solve", "mpc_solve_info", "perturb_state", "weighted_error",
    "Dataset", "closed_loop_errors", "generate_dataset", "load_dataset",
    "make_expert", "make_simulator", "sample_initial_error", "save_dataset",
    "NetArch", "NeuralPolicy", "TrainOptions", "forward", "grad_theta",
    "init_policy", "load_policy", "mse", "param_count", "save_policy",
    "train", "train_history",
    "FisherMatrix", "ILConfig", "IterRecord", "behavior_cloning", "coil",
    "constrained_project", "constraint_norm", "dagger", "dart",
    "fim_estimate", "kl_gaussian", "write_metrics",
    "AlgoSummary", "BoundednessMetrics", "NoiseSweepResult", "SweepResult",
    "boundedness_fit", "compare_report", "measure_policy_latency",
    "noise_sweep", "sweep",
]
