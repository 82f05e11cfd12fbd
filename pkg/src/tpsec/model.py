"""Electrical model of a DC traction power section.

A section is a radial chain of nodes placed along the line: inverting
substations (Thevenin sources) and trains (controlled power injections).
Everything downstream of this module works in a fixed unit system:
volts, amperes, megawatts, kilometers, ohms.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# Trains closer than this are electrically indistinguishable; branch
# conductances blow up below it, so callers must coalesce or separate nodes.
MERGE_EPSILON_KM = 1e-3

WATTS_PER_MW = 1e6


class Role(str, Enum):
    SUBSTATION = "substation"
    TRACTIONING = "tractioning"
    REGENERATING = "regenerating"

    @property
    def is_train(self) -> bool:
        return self is not Role.SUBSTATION


class ModelError(ValueError):
    """Invalid electrical model input."""


class CoincidentNodesError(ModelError):
    """Adjacent nodes closer than the merge epsilon; caller must coalesce."""


@dataclass(frozen=True)
class ElectricalParams:
    """Substation and line constants.

    v_noload       no-load substation voltage (V)
    r_substation   substation internal resistance (ohm)
    gamma          lumped line resistivity (ohm per km of separation)
    """

    v_noload: float = 750.0
    r_substation: float = 0.02956
    gamma: float = 0.03

    def __post_init__(self) -> None:
        for name in ("v_noload", "r_substation", "gamma"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class ControlThresholds:
    """Voltage breakpoints of the two local train control laws.

    Tractioning trains curtail demand between v_min_trigger and v_min;
    regenerating trains curtail injection between v_max_trigger and v_max.
    """

    v_min: float = 400.0
    v_min_trigger: float = 500.0
    v_max_trigger: float = 850.0
    v_max: float = 900.0

    def __post_init__(self) -> None:
        if not (self.v_min < self.v_min_trigger < self.v_max_trigger < self.v_max):
            raise ModelError(
                "thresholds must satisfy v_min < v_min_trigger < v_max_trigger < v_max"
            )


@dataclass(frozen=True)
class TrainPowerState:
    """Power envelope of one train at one instant.

    demand          tractioning power demand, <= 0 MW (absorption is negative)
    regen_capacity  regenerative capacity, >= 0 MW (injection is positive)
    """

    demand: float = 0.0
    regen_capacity: float = 0.0

    def __post_init__(self) -> None:
        if self.demand > 0:
            raise ModelError("demand must be <= 0 (power drawn from the network)")
        if self.regen_capacity < 0:
            raise ModelError("regen_capacity must be >= 0")


@dataclass(frozen=True)
class TpsTopology:
    """Node layout of a section: roles, positions and the branch chain."""

    roles: tuple[Role, ...]
    positions: tuple[float, ...]
    branches: tuple[tuple[int, int], ...]

    @classmethod
    def chain(cls, roles, positions) -> "TpsTopology":
        """Build the radial chain connecting consecutive nodes."""
        roles = tuple(Role(r) for r in roles)
        positions = tuple(float(s) for s in positions)
        branches = tuple((i, i + 1) for i in range(len(positions) - 1))
        return cls(roles=roles, positions=positions, branches=branches)

    def __post_init__(self) -> None:
        n = len(self.roles)
        if n != len(self.positions):
            raise ModelError("roles and positions must have equal length")
        if n < 2:
            raise ModelError("a section needs at least two nodes")
        if self.positions[0] != 0.0:
            raise ModelError("first node anchors the coordinate origin (s_1 = 0)")
        if any(b - a < 0 for a, b in zip(self.positions, self.positions[1:])):
            raise ModelError("positions must be nondecreasing along the line")
        touched = set()
        for i, j in self.branches:
            if not (0 <= i < n and 0 <= j < n):
                raise ModelError(f"branch ({i},{j}) references a missing node")
            touched.update((i, j))
        if touched != set(range(n)):
            raise ModelError("every node must appear in at least one branch")
        if self.branches != tuple((i, i + 1) for i in range(n - 1)):
            raise ModelError("topology must be a connected radial chain")

    @property
    def node_count(self) -> int:
        return len(self.roles)

    @property
    def train_nodes(self) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.roles) if r.is_train)

    @property
    def substation_nodes(self) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.roles) if r is Role.SUBSTATION)

    def at_positions(self, positions) -> "TpsTopology":
        """Same roles and chain, different node positions."""
        return TpsTopology(
            roles=self.roles,
            positions=tuple(float(s) for s in positions),
            branches=self.branches,
        )


@dataclass(frozen=True)
class SystemState:
    """Electrical operating point: per-node voltage (V), current (A), power (MW).

    Sign convention: current and power injected into the network are positive,
    so absorbing substations carry negative entries.
    """

    v: np.ndarray
    i: np.ndarray
    p: np.ndarray
    iterations: int = 0

    def __post_init__(self) -> None:
        for name in ("v", "i", "p"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_voltages(cls, v, y_matrix, iterations: int = 0) -> "SystemState":
        v = np.asarray(v, dtype=float)
        i = y_matrix @ v
        return cls(v=v, i=i, p=v * i / WATTS_PER_MW, iterations=iterations)


def chain_conductance(positions, gamma: float) -> np.ndarray:
    """Conductance matrix of the chain linking consecutive entries of positions.

    Used both for true topologies and for reported (possibly tampered)
    position vectors, so only adjacent separation is validated.
    """
    s = np.asarray(positions, dtype=float)
    n = s.shape[0]
    y = np.zeros((n, n))
    for a in range(n - 1):
        b = a + 1
        gap = abs(s[b] - s[a])
        if gap < MERGE_EPSILON_KM:
            raise CoincidentNodesError(
                f"nodes {a} and {b} are {gap * 1e3:.1f} m apart "
                f"(< {MERGE_EPSILON_KM * 1e3:.0f} m); coalesce them first"
            )
        g = 1.0 / (gamma * gap)
        y[a, a] += g
        y[b, b] += g
        y[a, b] -= g
        y[b, a] -= g
    return y


def build_conductance_matrix(topology: TpsTopology, params: ElectricalParams) -> np.ndarray:
    """Nodal conductance matrix Y (siemens) from node positions.

    Branch resistance is gamma times the node separation; coincident adjacent
    nodes would make it singular and raise CoincidentNodesError instead.
    """
    return chain_conductance(topology.positions, params.gamma)


def control_law_coefficients(
    role: Role, power_state: TrainPowerState, thresholds: ControlThresholds
) -> tuple[float, float, float, float]:
    """Affine-with-saturation form of a train's control law.

    Returns (a, b, lo, hi) in MW such that P(V) = clip(a + b*V, lo, hi).
    Both local laws are exactly of this shape, which the power-flow kernel
    exploits.
    """
    if role is Role.TRACTIONING:
        span = thresholds.v_min_trigger - thresholds.v_min
        b = power_state.demand / span
        a = -power_state.demand * thresholds.v_min / span
        return a, b, power_state.demand, 0.0
    if role is Role.REGENERATING:
        span = thresholds.v_max - thresholds.v_max_trigger
        b = -power_state.regen_capacity / span
        a = power_state.regen_capacity * thresholds.v_max / span
        return a, b, 0.0, power_state.regen_capacity
    raise ModelError("substations have no power control law")


def control_power(
    role: Role,
    v_node: float,
    power_state: TrainPowerState,
    thresholds: ControlThresholds,
) -> float:
    """Power (MW) a train absorbs or injects at perceived voltage v_node.

    Tractioning trains ramp demand down toward zero as the voltage falls to
    v_min (overcurrent control); regenerating trains squeeze injection toward
    zero as the voltage rises to v_max (squeeze control). Total and continuous
    on all reals.
    """
    a, b, lo, hi = control_law_coefficients(role, power_state, thresholds)
    return float(np.clip(a + b * v_node, lo, hi))


def substation_residual(v_node: float, i_node: float, params: ElectricalParams) -> float:
    """V - (V_NL - R_s * I); zero exactly when the substation model holds."""
    return v_node - (params.v_noload - params.r_substation * i_node)


def branch_losses_mw(topology: TpsTopology, params: ElectricalParams, v) -> float:
    """Resistive power dissipated in the branches (MW) at voltages v."""
    v = np.asarray(v, dtype=float)
    s = topology.positions
    total = 0.0
    for a, b in topology.branches:
        g = 1.0 / (params.gamma * abs(s[b] - s[a]))
        total += g * (v[a] - v[b]) ** 2
    return total / WATTS_PER_MW
