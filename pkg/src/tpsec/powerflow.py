"""Steady-state solver for the coupled network / substation / train system.

The nodal equations, substation Thevenin models and train control laws are
solved together by damped Newton iterations on the nodal voltages. The same
solver also computes the operating point under spoofed control feedback,
where a train regulates its power against a voltage it does not actually
have.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .model import (
    WATTS_PER_MW,
    ControlThresholds,
    ElectricalParams,
    Role,
    SystemState,
    TpsTopology,
    TrainPowerState,
    build_conductance_matrix,
    control_law_coefficients,
    control_power,
)


class PowerflowError(RuntimeError):
    """Base class for solver failures."""


class DivergedError(PowerflowError):
    """No convergence within the iteration budget; carries the last iterate."""

    def __init__(self, message: str, last_state: SystemState):
        super().__init__(message)
        self.last_state = last_state


class SingularSystemError(PowerflowError):
    """The linearised system is singular (degenerate topology or parameters)."""


class InfeasibleStateError(PowerflowError):
    """Demanded powers admit no real operating point."""

    def __init__(self, message: str, last_state: SystemState):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class PowerflowConfig:
    """Solver knobs: iteration budget, voltage tolerance (V), step damping."""

    max_iterations: int = 80
    tolerance: float = 1e-6
    damping: float = 1.0

    def __post_init__(self) -> None:
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (0 < self.damping <= 1):
            raise ValueError("damping must be in (0, 1]")


DEFAULT_CONFIG = PowerflowConfig()


@dataclass(frozen=True)
class FeedbackOverride:
    """Per-train spoofed controller feedback.

    perceived  node -> absolute voltage the controller sees (its power
               setpoint is then fixed at control_power of that voltage)
    additive   node -> offset added to the true voltage before the control
               law is applied (setpoint stays coupled to the true state)
    """

    perceived: Mapping[int, float] = field(default_factory=dict)
    additive: Mapping[int, float] = field(default_factory=dict)

    def validate(self, topology: TpsTopology) -> None:
        for node in (*self.perceived, *self.additive):
            if not topology.roles[node].is_train:
                raise ValueError(f"override on node {node}: not a train node")
        if set(self.perceived) & set(self.additive):
            raise ValueError("a node cannot have both absolute and additive overrides")

    @property
    def empty(self) -> bool:
        return not self.perceived and not self.additive


def normalize_power_states(
    topology: TpsTopology, power_states
) -> tuple[Optional[TrainPowerState], ...]:
    """Accept a node-aligned sequence or a {node: TrainPowerState} mapping."""
    n = topology.node_count
    if isinstance(power_states, Mapping):
        seq: list[Optional[TrainPowerState]] = [None] * n
        for node, ps in power_states.items():
            seq[node] = ps
    else:
        seq = list(power_states)
        if len(seq) != n:
            raise ValueError("power_states length must match node count")
    for node, role in enumerate(topology.roles):
        if role.is_train and seq[node] is None:
            seq[node] = TrainPowerState()
        if not role.is_train and seq[node] is not None:
            raise ValueError(f"power state given for substation node {node}")
    return tuple(seq)


def _assemble_rows(
    topology: TpsTopology,
    params: ElectricalParams,
    thresholds: ControlThresholds,
    power_states: Sequence[Optional[TrainPowerState]],
    override: Optional[FeedbackOverride] = None,
):
    """Per-node kernel row data: quadratic flag plus affine/clamp coefficients."""
    n = topology.node_count
    quad = np.zeros(n, dtype=bool)
    lin_g = np.zeros(n)
    lin_b = np.zeros(n)
    a = np.zeros(n)
    b = np.zeros(n)
    lo = np.zeros(n)
    hi = np.zeros(n)
    g_sub = 1.0 / params.r_substation
    for node, role in enumerate(topology.roles):
        if role is Role.SUBSTATION:
            lin_g[node] = g_sub
            lin_b[node] = params.v_noload * g_sub
            continue
        an, bn, lon, hin = control_law_coefficients(role, power_states[node], thresholds)
        if override is not None and node in override.perceived:
            p_fixed = control_power(role, override.perceived[node], power_states[node], thresholds)
            an, bn, lon, hin = p_fixed, 0.0, p_fixed, p_fixed
        elif override is not None and node in override.additive:
            an = an + bn * override.additive[node]
        if bn == 0.0 and lon == 0.0 and hin == 0.0 and an == 0.0:
            continue  # passive node: plain KCL row, better conditioned
        quad[node] = True
        a[node] = an * WATTS_PER_MW
        b[node] = bn * WATTS_PER_MW
        lo[node] = lon * WATTS_PER_MW
        hi[node] = hin * WATTS_PER_MW
    return quad, lin_g, lin_b, a, b, lo, hi


def _solve(topology, params, rows, config, initial_voltages, infeasible_hint: bool):
    y = build_conductance_matrix(topology, params)
    if initial_voltages is None:
        seed = np.full(topology.node_count, params.v_noload)
    else:
        seed = np.asarray(initial_voltages, dtype=float)
    roots, ok, iters = kernels.newton_power_states(
        y,
        *rows,
        seeds=seed[None, :],
        tol_v=config.tolerance,
        max_iter=config.max_iterations,
        step_limit=400.0 * config.damping,
    )
    state = SystemState.from_voltages(roots[0], y, iterations=int(iters[0]))
    if not ok[0]:
        if not np.isfinite(roots[0]).all():
            raise SingularSystemError("solver produced non-finite voltages")
        if infeasible_hint:
            raise InfeasibleStateError(
                "no real operating point for the demanded train powers", state
            )
        raise DivergedError(
            f"no convergence after {config.max_iterations} iterations", state
        )
    return state


def solve_steady_state(
    topology: TpsTopology,
    params: ElectricalParams,
    thresholds: ControlThresholds,
    power_states,
    config: PowerflowConfig = DEFAULT_CONFIG,
    initial_voltages=None,
) -> SystemState:
    """Honest operating point: every train's control sees its true voltage.

    Deterministic: started from a flat no-load voltage profile unless an
    initial iterate is supplied, which lands on the high-voltage (stable)
    solution branch.
    """
    states = normalize_power_states(topology, power_states)
    rows = _assemble_rows(topology, params, thresholds, states)
    return _solve(topology, params, rows, config, initial_voltages, infeasible_hint=False)


def solve_under_false_feedback(
    topology: TpsTopology,
    params: ElectricalParams,
    thresholds: ControlThresholds,
    power_states,
    override: FeedbackOverride,
    config: PowerflowConfig = DEFAULT_CONFIG,
    initial_voltages=None,
) -> SystemState:
    """Operating point when some controllers see spoofed voltages.

    Absolute overrides pin the train's setpoint at control_power of the
    spoofed value; additive overrides keep the control loop coupled but
    shift its input. The network physics always sees true voltages.
    """
    override.validate(topology)
    states = normalize_power_states(topology, power_states)
    rows = _assemble_rows(topology, params, thresholds, states, override)
    return _solve(topology, params, rows, config, initial_voltages, infeasible_hint=True)


def solve_with_pinned_trains(
    topology: TpsTopology,
    params: ElectricalParams,
    thresholds: ControlThresholds,
    power_states,
    pinned_mw: Mapping[int, float],
    config: PowerflowConfig = DEFAULT_CONFIG,
    initial_voltages=None,
) -> SystemState:
    """Operating point with some trains pinned to fixed setpoints (MW).

    Pinned trains inject exactly the given power regardless of voltage (a
    misled controller); the remaining trains follow their honest laws.
    """
    states = normalize_power_states(topology, power_states)
    rows = _assemble_rows(topology, params, thresholds, states)
    quad, lin_g, lin_b, a, b, lo, hi = (np.array(r, copy=True) for r in rows)
    for node, p in pinned_mw.items():
        if not topology.roles[node].is_train:
            raise ValueError(f"cannot pin substation node {node}")
        p_w = p * WATTS_PER_MW
        if p_w == 0.0:
            quad[node] = False
            lin_g[node] = 0.0
            lin_b[node] = 0.0
        else:
            quad[node] = True
            a[node] = p_w
            b[node] = 0.0
            lo[node] = p_w
            hi[node] = p_w
    rows = (quad, lin_g, lin_b, a, b, lo, hi)
    return _solve(topology, params, rows, config, initial_voltages, infeasible_hint=True)


def solve_fixed_train_powers(
    topology: TpsTopology,
    params: ElectricalParams,
    train_powers_mw: Mapping[int, float],
    config: PowerflowConfig = DEFAULT_CONFIG,
    initial_voltages=None,
) -> SystemState:
    """Operating point with train injections pinned (MW), controls bypassed."""
    n = topology.node_count
    quad = np.zeros(n, dtype=bool)
    lin_g = np.zeros(n)
    lin_b = np.zeros(n)
    a = np.zeros(n)
    g_sub = 1.0 / params.r_substation
    for node, role in enumerate(topology.roles):
        if role is Role.SUBSTATION:
            lin_g[node] = g_sub
            lin_b[node] = params.v_noload * g_sub
        else:
            p = train_powers_mw.get(node, 0.0)
            if p != 0.0:
                quad[node] = True
                a[node] = p * WATTS_PER_MW
    rows = (quad, lin_g, lin_b, a, np.zeros(n), a, a)
    return _solve(topology, params, rows, config, initial_voltages, infeasible_hint=True)
