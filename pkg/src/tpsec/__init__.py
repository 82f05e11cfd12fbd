"""Security toolkit for DC traction power sections.

Models the electrical section and its train-borne controls, synthesises
sensor-spoofing attacks against them, and detects such attacks with a
layered monitor (state estimation, bad-data test, position cross-checks, a
fake-state discreteness check, and windowed fusion).
"""

from .model import (
    ControlThresholds,
    ElectricalParams,
    Role,
    SystemState,
    TpsTopology,
    TrainPowerState,
    build_conductance_matrix,
    control_power,
    substation_residual,
)
from .powerflow import (
    FeedbackOverride,
    PowerflowConfig,
    solve_steady_state,
    solve_under_false_feedback,
)
from .attacks import (
    AttackBounds,
    AttackKind,
    AttackVector,
    craft_measurements_for_power,
    efficiency_attack,
    safety_attack,
    stealthy_attack,
    suboptimal_additive_attack,
)
from .detection import (
    DetectorConfig,
    DetectorVerdict,
    MeasurementSet,
    StealthSolutionSet,
    bdd_evaluate,
    bdd_threshold_for_fp_rate,
    enumerate_stealthy_states,
    estimate_state,
    gad_decide,
    gadw_decide,
    mitigation_plan,
    piv_verify,
    sad_evaluate,
)
from .harness import (
    AttackSpec,
    MetricsReport,
    RunningProfile,
    Scenario,
    StaticInstant,
    kinematics_at,
    monte_carlo_rates,
    power_envelope_at,
    roc_sweep,
    run_timeline,
)
from .kernels import BACKEND as KERNEL_BACKEND

__all__ = [
    "AttackBounds",
    "AttackKind",
    "AttackSpec",
    "AttackVector",
    "ControlThresholds",
    "DetectorConfig",
    "DetectorVerdict",
    "ElectricalParams",
    "FeedbackOverride",
    "KERNEL_BACKEND",
    "MeasurementSet",
    "MetricsReport",
    "PowerflowConfig",
    "Role",
    "RunningProfile",
    "Scenario",
    "StaticInstant",
    "StealthSolutionSet",
    "SystemState",
    "TpsTopology",
    "TrainPowerState",
    "bdd_evaluate",
    "bdd_threshold_for_fp_rate",
    "build_conductance_matrix",
    "control_power",
    "craft_measurements_for_power",
    "efficiency_attack",
    "enumerate_stealthy_states",
    "estimate_state",
    "gad_decide",
    "gadw_decide",
    "kinematics_at",
    "mitigation_plan",
    "monte_carlo_rates",
    "piv_verify",
    "power_envelope_at",
    "roc_sweep",
    "run_timeline",
    "sad_evaluate",
    "safety_attack",
    "solve_steady_state",
    "solve_under_false_feedback",
    "stealthy_attack",
    "suboptimal_additive_attack",
    "substation_residual",
]
