"""Feedback stabilization of finite-dimensional spin systems under
continuous measurement: an Ito SDE simulator for the conditional state, the
switching control law with a hysteresis band, the averaged-dynamics ODE
integrator, and a Monte Carlo harness for convergence and exit-time
statistics.
"""

from .controller import ControllerState, Mode, feedback_gain, mh_control, new_controller
from .dynamics import (
    EPS_CONV,
    OdeTrajectory,
    SdeStepConfig,
    TrajectoryRecord,
    em_step,
    ensemble_rhs,
    general_diffusion,
    general_drift,
    integrate_ensemble,
    simulate_batch,
    simulate_trajectory,
    sme_diffusion,
    sme_drift,
)
from .montecarlo import (
    EnsembleStats,
    ExitTimeReport,
    compare_mean_vs_ode,
    estimate_exit_time,
    run_ensemble,
)
from .quantum import (
    DEFAULT_TOL,
    GeneralModel,
    NumericalFailureError,
    QuantumState,
    SpinOperators,
    ToleranceConfig,
    distance_V,
    eigenstate,
    lyapunov_Q,
    make_spin_operators,
    maximally_mixed,
    measurement_probabilities,
    project_to_state_space,
    random_density,
)

__version__ = "0.1.0"

__all__ = [
    "ControllerState",
    "DEFAULT_TOL",
    "EPS_CONV",
    "EnsembleStats",
    "ExitTimeReport",
    "GeneralModel",
    "Mode",
    "NumericalFailureError",
    "OdeTrajectory",
    "QuantumState",
    "SdeStepConfig",
    "SpinOperators",
    "ToleranceConfig",
    "TrajectoryRecord",
    "compare_mean_vs_ode",
    "distance_V",
    "eigenstate",
    "em_step",
    "ensemble_rhs",
    "estimate_exit_time",
    "feedback_gain",
    "general_diffusion",
    "general_drift",
    "integrate_ensemble",
    "lyapunov_Q",
    "make_spin_operators",
    "maximally_mixed",
    "measurement_probabilities",
    "mh_control",
    "new_controller",
    "project_to_state_space",
    "random_density",
    "run_ensemble",
    "simulate_batch",
    "simulate_trajectory",
    "sme_diffusion",
    "sme_drift",
]
