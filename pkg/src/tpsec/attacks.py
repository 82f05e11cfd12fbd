"""Synthesis of sensor-spoofing attack vectors against train-borne meters.

Misleading a train's controller only takes a consistent pair of fake voltage
and current readings: the control laws are invertible, so the attacker picks
the setpoint and back-computes what the sensors must claim. Two goals are
supported: degrading the section's energy exchange with the substations
(efficiency) and pushing a true node voltage outside its safety band
(safety). Plain variants only respect per-sensor data-quality bounds taken
relative to the concurrent true state; stealthy variants additionally forge
a fully physics-consistent measurement frame (which requires shifting the
reported train positions) so the monitor's bad-data test stays silent.

The piecewise control laws make the attacker's problem non-smooth, so it is
split into one subproblem per combination of control-law branches of the
written trains, each solved by a penalty-based multistart local search, and
the best feasible candidate wins.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import Bounds, minimize

from .model import (
    MERGE_EPSILON_KM,
    WATTS_PER_MW,
    ControlThresholds,
    ElectricalParams,
    Role,
    SystemState,
    TpsTopology,
    TrainPowerState,
    control_power,
)
from .powerflow import (
    DEFAULT_CONFIG,
    PowerflowConfig,
    PowerflowError,
    normalize_power_states,
    solve_steady_state,
    solve_under_false_feedback,
    solve_with_pinned_trains,
    FeedbackOverride,
)

_PENALTY_WEIGHTS = (1e2, 1e4, 1e6)
_FEASIBILITY_TOL = 1e-4
_NOOP_MARGIN = 1e-9


class AttackError(ValueError):
    pass


class InfeasibleTargetError(AttackError):
    """Requested setpoint lies outside the train's feasible power interval."""


@dataclass(frozen=True)
class AttackBounds:
    """Per-node tampering budgets allowed by the data-quality checks.

    dv/di are absolute bounds (V, A) on the gap between a fake reading and
    the concurrent true value; ds (km) bounds reported position shifts.
    All entries are zero outside the writable set.
    """

    dv: np.ndarray
    di: np.ndarray
    ds: np.ndarray

    def __post_init__(self) -> None:
        for name in ("dv", "di", "ds"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if (arr < 0).any():
                raise AttackError(f"{name} must be nonnegative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def for_writable(
        cls,
        topology: TpsTopology,
        writable_set,
        dv: float = 50.0,
        di: float = 200.0,
        ds: float = 0.6,
        positions_writable: bool = False,
    ) -> "AttackBounds":
        n = topology.node_count
        writable = set(writable_set)
        dv_vec = np.zeros(n)
        di_vec = np.zeros(n)
        ds_vec = np.zeros(n)
        for node in writable:
            dv_vec[node] = dv
            di_vec[node] = di
            if positions_writable and topology.roles[node].is_train:
                ds_vec[node] = ds
        return cls(dv=dv_vec, di=di_vec, ds=ds_vec)


@dataclass(frozen=True)
class AttackKind:
    """What the attacker is after and under which detection regime."""

    goal: str  # "efficiency" | "safety" | "suboptimal-additive"
    stealthy: bool = False
    unsafe_set: frozenset = frozenset()
    additive_dv: float = 20.0

    def __post_init__(self) -> None:
        if self.goal not in ("efficiency", "safety", "suboptimal-additive"):
            raise AttackError(f"unknown goal {self.goal!r}")
        if (self.goal == "safety") != bool(self.unsafe_set):
            raise AttackError("unsafe_set must be nonempty exactly for the safety goal")


@dataclass(frozen=True)
class AttackVector:
    """A concrete attack: fake readings plus their predicted consequences.

    v_prime/i_prime are full composite measurement vectors (true values at
    unwritten nodes). induced_power holds the per-node train setpoints the
    attack produces; attacked_state is the predicted true operating point.
    """

    writable_set: frozenset
    v_prime: np.ndarray
    i_prime: np.ndarray
    s_prime: Optional[np.ndarray]
    induced_power: np.ndarray
    objective_value: float
    feasible: bool
    is_noop: bool
    attacked_state: Optional[SystemState]
    success: Optional[bool] = None

    def __post_init__(self) -> None:
        for name in ("v_prime", "i_prime", "induced_power"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.s_prime is not None:
            arr = np.asarray(self.s_prime, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, "s_prime", arr)


def invert_control(
    role: Role, target_p: float, power_state: TrainPowerState, thresholds: ControlThresholds
) -> float:
    """Voltage at which the control law commands exactly target_p (mid branch)."""
    if role is Role.TRACTIONING:
        span = thresholds.v_min_trigger - thresholds.v_min
        return thresholds.v_min + target_p * span / power_state.demand
    span = thresholds.v_max - thresholds.v_max_trigger
    return thresholds.v_max - target_p * span / power_state.regen_capacity


def craft_measurements_for_power(
    node: int,
    target_p: float,
    true_state: SystemState,
    thresholds: ControlThresholds,
    power_state: TrainPowerState,
    role: Role,
) -> tuple[float, float]:
    """Fake (voltage, current) pair that misleads the train into target_p.

    The fake voltage inverts the control law (boundary values on the
    saturated branches) and the fake current keeps the implied power
    consistent with the setpoint.
    """
    if role is Role.TRACTIONING:
        if not (power_state.demand <= target_p <= 0):
            raise InfeasibleTargetError(
                f"target {target_p} MW outside [{power_state.demand}, 0]"
            )
        if target_p == 0:
            v_prime = thresholds.v_min
        elif target_p == power_state.demand:
            v_prime = thresholds.v_min_trigger
        else:
            v_prime = invert_control(role, target_p, power_state, thresholds)
    elif role is Role.REGENERATING:
        if not (0 <= target_p <= power_state.regen_capacity):
            raise InfeasibleTargetError(
                f"target {target_p} MW outside [0, {power_state.regen_capacity}]"
            )
        if target_p == 0:
            v_prime = thresholds.v_max
        elif target_p == power_state.regen_capacity:
            v_prime = thresholds.v_max_trigger
        else:
            v_prime = invert_control(role, target_p, power_state, thresholds)
    else:
        raise AttackError("substations have no control law to mislead")
    i_prime = target_p * WATTS_PER_MW / v_prime
    return float(v_prime), float(i_prime)


# ---------------------------------------------------------------------------
# Subproblem machinery shared by the efficiency and safety goals.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Branch:
    """One piece of a written train's control law."""

    kind: str  # "zero" | "mid" | "full"
    p_lo: float
    p_hi: float

    @property
    def fixed(self) -> bool:
        return self.p_lo == self.p_hi


def _branches_for(role: Role, ps: TrainPowerState) -> list[_Branch]:
    if role is Role.REGENERATING:
        if ps.regen_capacity == 0:
            # Degenerate envelope: the law is identically zero, any fake
            # voltage works.
            return [_Branch("free", 0.0, 0.0)]
        return [
            _Branch("zero", 0.0, 0.0),
            _Branch("mid", 0.0, ps.regen_capacity),
            _Branch("full", ps.regen_capacity, ps.regen_capacity),
        ]
    if ps.demand == 0:
        return [_Branch("free", 0.0, 0.0)]
    return [
        _Branch("zero", 0.0, 0.0),
        _Branch("mid", ps.demand, 0.0),
        _Branch("full", ps.demand, ps.demand),
    ]


def _interval_gap(lo: float, hi: float) -> float:
    """Positive when the interval [lo, hi] is empty."""
    return max(0.0, lo - hi)


def _pick_in_interval(lo: float, hi: float, preferred: float) -> float:
    if lo > hi:
        return 0.5 * (lo + hi)
    return min(max(preferred, lo), hi)


def _fake_pair_for_branch(
    branch: _Branch,
    role: Role,
    p: float,
    ps: TrainPowerState,
    thresholds: ControlThresholds,
    v_true: float,
    i_true: float,
    dv: float,
    di: float,
):
    """Fake readings for one train plus their data-quality violations.

    Saturated branches leave the fake voltage free inside a half-interval;
    it is placed to satisfy both the voltage and the implied-current bound
    whenever possible, and the residual interval gaps are returned as
    violations for the penalty terms.
    """
    if branch.kind == "free":
        return v_true, 0.0, 0.0, max(0.0, abs(i_true) - di)
    if branch.kind == "mid":
        v_prime = invert_control(role, p, ps, thresholds)
        i_prime = p * WATTS_PER_MW / v_prime
        viol_v = max(0.0, abs(v_prime - v_true) - dv)
        viol_i = max(0.0, abs(i_prime - i_true) - di)
        return v_prime, i_prime, viol_v, viol_i

    if role is Role.REGENERATING:
        v_branch = (
            (thresholds.v_max, np.inf) if branch.kind == "zero" else (-np.inf, thresholds.v_max_trigger)
        )
    else:
        v_branch = (
            (-np.inf, thresholds.v_min) if branch.kind == "zero" else (thresholds.v_min_trigger, np.inf)
        )
    lo = max(v_branch[0], v_true - dv)
    hi = min(v_branch[1], v_true + dv)
    viol_v = _interval_gap(lo, hi)

    if p == 0.0:
        v_prime = _pick_in_interval(lo, hi, v_true)
        i_prime = 0.0
        viol_i = max(0.0, abs(i_true) - di)
        return v_prime, i_prime, viol_v, viol_i

    # Nonzero fixed power: i' = p/v' is monotone in v' (> 0), so the implied
    # current bound maps to a second voltage interval to intersect with.
    p_w = p * WATTS_PER_MW
    i_lo, i_hi = i_true - di, i_true + di
    if p_w > 0:
        v_lo_i = p_w / i_hi if i_hi > 0 else np.inf
        v_hi_i = p_w / i_lo if i_lo > 0 else np.inf
    else:
        v_lo_i = p_w / i_lo if i_lo < 0 else np.inf
        v_hi_i = p_w / i_hi if i_hi < 0 else np.inf
    lo2 = max(lo, v_lo_i)
    hi2 = min(hi, v_hi_i)
    if lo2 <= hi2:
        v_prime = _pick_in_interval(lo2, hi2, v_true)
        viol_i = 0.0
    else:
        v_prime = _pick_in_interval(lo, hi, v_true) if lo <= hi else 0.5 * (lo + hi)
        viol_i = max(0.0, abs(p_w / v_prime - i_true) - di) if v_prime != 0 else abs(i_true)
    i_prime = p_w / v_prime if v_prime != 0 else 0.0
    return v_prime, i_prime, viol_v, viol_i


def _honest_voltage_boxes(
    topology: TpsTopology,
    thresholds: ControlThresholds,
    true_state: SystemState,
    written: set,
) -> dict[int, tuple[float, float]]:
    """Voltage interval keeping each unwritten train on its pre-attack branch.

    The attacker can only predict responses of honest controllers while they
    stay on the control-law branch observed before the attack, so candidate
    states that push them across a breakpoint are rejected.
    """
    boxes: dict[int, tuple[float, float]] = {}
    for node, role in enumerate(topology.roles):
        if not role.is_train or node in written:
            continue
        v = float(true_state.v[node])
        if role is Role.REGENERATING:
            edges = (thresholds.v_max_trigger, thresholds.v_max)
        else:
            edges = (thresholds.v_min, thresholds.v_min_trigger)
        if v < edges[0]:
            boxes[node] = (-np.inf, edges[0])
        elif v <= edges[1]:
            boxes[node] = edges
        else:
            boxes[node] = (edges[1], np.inf)
    return boxes


@dataclass
class _Candidate:
    powers: dict[int, float]
    v_prime: dict[int, float]
    i_prime: dict[int, float]
    state: SystemState
    objective: float
    violation: float


class _AttackDriver:
    """Shared evaluation engine for the branch subproblems."""

    def __init__(
        self,
        true_state: SystemState,
        topology: TpsTopology,
        params: ElectricalParams,
        thresholds: ControlThresholds,
        power_states,
        writable_trains: Sequence[int],
        bounds: AttackBounds,
        objective: Callable[[SystemState], float],
        solver_config: PowerflowConfig,
        multistarts: int = 8,
        effort: str = "full",
        initial_powers: Optional[Mapping[int, float]] = None,
    ):
        self.true_state = true_state
        self.topology = topology
        self.params = params
        self.thresholds = thresholds
        self.power_states = normalize_power_states(topology, power_states)
        self.writable = list(writable_trains)
        self.bounds = bounds
        self.objective = objective
        self.config = solver_config
        self.multistarts = multistarts if effort == "full" else 2
        self.effort = effort
        self.initial_powers = dict(initial_powers or {})
        self.boxes = _honest_voltage_boxes(topology, thresholds, true_state, set(self.writable))
        self._warm = np.array(true_state.v)

    def _evaluate(self, branches: Sequence[_Branch], powers: np.ndarray) -> Optional[_Candidate]:
        pinned = {node: float(p) for node, p in zip(self.writable, powers)}
        try:
            state = solve_with_pinned_trains(
                self.topology,
                self.params,
                self.thresholds,
                self.power_states,
                pinned,
                self.config,
                initial_voltages=self._warm,
            )
        except PowerflowError:
            return None
        self._warm = np.array(state.v)

        violation = 0.0
        v_prime: dict[int, float] = {}
        i_prime: dict[int, float] = {}
        for node, branch, p in zip(self.writable, branches, powers):
            vp, ip, vv, vi = _fake_pair_for_branch(
                branch,
                self.topology.roles[node],
                float(p),
                self.power_states[node],
                self.thresholds,
                float(state.v[node]),
                float(state.i[node]),
                float(self.bounds.dv[node]),
                float(self.bounds.di[node]),
            )
            v_prime[node] = vp
            i_prime[node] = ip
            violation += vv * vv + (vi / 10.0) ** 2  # amp slack weighted below volt slack
        for node, (lo, hi) in self.boxes.items():
            v = float(state.v[node])
            out = max(0.0, lo - v, v - hi)
            violation += out * out
        return _Candidate(pinned, v_prime, i_prime, state, self.objective(state), violation)

    def _starts(self, branches: Sequence[_Branch], free: Sequence[int]) -> list[np.ndarray]:
        honest = np.array(
            [float(self.true_state.p[self.writable[k]]) for k in free]
        )
        lo = np.array([branches[k].p_lo for k in free])
        hi = np.array([branches[k].p_hi for k in free])
        honest = np.clip(honest, lo, hi)
        starts = []
        if self.initial_powers:
            warm = np.array(
                [self.initial_powers.get(self.writable[k], honest[j]) for j, k in enumerate(free)]
            )
            starts.append(np.clip(warm, lo, hi))
        starts += [honest, lo, hi, 0.5 * (lo + hi), 0.5 * (honest + lo), 0.5 * (honest + hi)]
        rng = np.random.default_rng(7)
        while len(starts) < self.multistarts:
            starts.append(lo + rng.random(len(free)) * (hi - lo))
        seen = set()
        unique = []
        for s in starts[: self.multistarts]:
            key = tuple(np.round(s, 9))
            if key not in seen:
                seen.add(key)
                unique.append(s)
        return unique

    def solve_subproblem(self, branches: Sequence[_Branch]) -> Optional[_Candidate]:
        free = [k for k, br in enumerate(branches) if not br.fixed]
        base = np.array([br.p_lo for br in branches])

        def assemble(x: np.ndarray) -> np.ndarray:
            powers = base.copy()
            for pos, k in enumerate(free):
                powers[k] = x[pos]
            return powers

        if not free:
            cand = self._evaluate(branches, base)
            if cand is None or cand.violation > _FEASIBILITY_TOL:
                return None
            return cand

        lo = np.array([branches[k].p_lo for k in free])
        hi = np.array([branches[k].p_hi for k in free])
        weights = _PENALTY_WEIGHTS if self.effort == "full" else (1e5,)
        maxiter = 40 if self.effort == "full" else 12

        best: Optional[_Candidate] = None
        for start in self._starts(branches, free):
            x = np.clip(start, lo, hi)
            for weight in weights:

                def penalised(xv: np.ndarray) -> float:
                    cand = self._evaluate(branches, assemble(np.clip(xv, lo, hi)))
                    if cand is None:
                        return 1e12
                    return -cand.objective + weight * cand.violation

                res = minimize(
                    penalised,
                    x,
                    method="Powell",
                    bounds=Bounds(lo, hi),
                    options={"xtol": 1e-7, "ftol": 1e-10, "maxiter": maxiter},
                )
                x = np.clip(res.x, lo, hi)
            cand = self._evaluate(branches, assemble(x))
            if cand is None or cand.violation > _FEASIBILITY_TOL:
                continue
            if best is None or cand.objective > best.objective + 1e-12:
                best = cand
        return best

    def _better(self, cand: Optional[_Candidate], best: Optional[_Candidate]):
        if cand is None:
            return best
        if best is None or cand.objective > best.objective + 1e-12:
            return cand
        if abs(cand.objective - best.objective) <= 1e-12:
            # Deterministic tie-break on the fake-measurement vector.
            if tuple(sorted(cand.v_prime.items())) < tuple(sorted(best.v_prime.items())):
                return cand
        return best

    def run(self) -> Optional[_Candidate]:
        all_branches = [
            _branches_for(self.topology.roles[node], self.power_states[node])
            for node in self.writable
        ]
        if self.effort == "full":
            best: Optional[_Candidate] = None
            for combo in itertools.product(*all_branches):
                best = self._better(self.solve_subproblem(combo), best)
            return best

        # Fast path for timeline sweeps: solve the all-mid subproblem, then
        # flip trains whose optimum sits on a power-box edge to the matching
        # saturated branch (where the fake voltage gains slack) one at a
        # time. Exhaustive branch products stay available via effort="full".
        def mid_or_only(options):
            for br in options:
                if br.kind == "mid":
                    return br
            return options[0]

        combo = [mid_or_only(options) for options in all_branches]
        best = self.solve_subproblem(combo)
        base = best
        for k, options in enumerate(all_branches):
            if len(options) == 1 or base is None:
                continue
            p_opt = base.powers[self.writable[k]]
            span = options[1].p_hi - options[1].p_lo
            for branch in options:
                if branch.kind == "mid" or not branch.fixed:
                    continue
                if abs(p_opt - branch.p_lo) > 0.05 * span:
                    continue
                flipped = list(combo)
                flipped[k] = branch
                best = self._better(self.solve_subproblem(flipped), best)
        return best


def _composite_vectors(
    attacked_state: SystemState, v_prime: Mapping[int, float], i_prime: Mapping[int, float]
) -> tuple[np.ndarray, np.ndarray]:
    """Full measurement vectors: fake readings where written, true elsewhere."""
    v = np.array(attacked_state.v)
    i = np.array(attacked_state.i)
    for node, val in v_prime.items():
        v[node] = val
    for node, val in i_prime.items():
        i[node] = val
    return v, i


def _noop_vector(
    true_state: SystemState,
    topology: TpsTopology,
    writable_set,
    objective_value: float,
    stealthy: bool,
    success: Optional[bool] = None,
) -> AttackVector:
    induced = np.where(
        [r.is_train for r in topology.roles], np.asarray(true_state.p), 0.0
    )
    return AttackVector(
        writable_set=frozenset(writable_set),
        v_prime=np.array(true_state.v),
        i_prime=np.array(true_state.i),
        s_prime=np.array(topology.positions) if stealthy else None,
        induced_power=induced,
        objective_value=objective_value,
        feasible=False,
        is_noop=True,
        attacked_state=true_state,
        success=success,
    )


def _finalize(
    candidate: _Candidate,
    true_state: SystemState,
    topology: TpsTopology,
    writable_set,
    honest_objective: float,
    stealthy_positions: Optional[np.ndarray] = None,
    success: Optional[bool] = None,
) -> AttackVector:
    v_prime, i_prime = _composite_vectors(candidate.state, candidate.v_prime, candidate.i_prime)
    induced = np.zeros(topology.node_count)
    for node in topology.train_nodes:
        induced[node] = candidate.powers.get(node, float(candidate.state.p[node]))
    return AttackVector(
        writable_set=frozenset(writable_set),
        v_prime=v_prime,
        i_prime=i_prime,
        s_prime=stealthy_positions,
        induced_power=induced,
        objective_value=candidate.objective,
        feasible=True,
        is_noop=abs(candidate.objective - honest_objective) <= _NOOP_MARGIN,
        attacked_state=candidate.state,
        success=success,
    )


def _substation_power(topology: TpsTopology) -> Callable[[SystemState], float]:
    subs = list(topology.substation_nodes)

    def objective(state: SystemState) -> float:
        return float(np.sum(state.p[subs]))

    return objective


def _regen_injection(topology: TpsTopology) -> Callable[[SystemState], float]:
    regen = [i for i, r in enumerate(topology.roles) if r is Role.REGENERATING]

    def objective(state: SystemState) -> float:
        return float(np.sum(state.p[regen]))

    return objective


def efficiency_attack(
    true_state: SystemState,
    topology: TpsTopology,
    params: ElectricalParams,
    thresholds: ControlThresholds,
    power_states,
    writable_set,
    bounds: AttackBounds,
    solver_config: PowerflowConfig = DEFAULT_CONFIG,
    multistarts: int = 8,
    effort: str = "full",
    initial_powers=None,
) -> AttackVector:
    """Fake readings maximising the section's net substation exchange.

    With regenerating traffic this starves the substations of recoverable
    energy (the train burns the excess in its braking rheostats). Solved by
    branch enumeration; returns an explicit no-op vector when nothing
    feasible beats the honest operating point.
    """
    objective = _substation_power(topology)
    honest = objective(true_state)
    writable_trains = [n for n in sorted(set(writable_set)) if topology.roles[n].is_train]
    if not writable_trains:
        return _noop_vector(true_state, topology, writable_set, honest, stealthy=False)
    driver = _AttackDriver(
        true_state,
        topology,
        params,
        thresholds,
        power_states,
        writable_trains,
        bounds,
        objective,
        solver_config,
        multistarts,
        effort=effort,
        initial_powers=initial_powers,
    )
    best = driver.run()
    if best is None or best.objective <= honest + _NOOP_MARGIN:
        return _noop_vector(true_state, topology, writable_set, honest, stealthy=False)
    return _finalize(best, true_state, topology, writable_set, honest)


def safety_attack(
    true_state: SystemState,
    topology: TpsTopology,
    params: ElectricalParams,
    thresholds: ControlThresholds,
    power_states,
    writable_set,
    bounds: AttackBounds,
    unsafe_set,
    solver_config: PowerflowConfig = DEFAULT_CONFIG,
    multistarts: int = 8,
    effort: str = "full",
    initial_powers=None,
) -> AttackVector:
    """Heuristic safety breach: maximise total regenerated injection.

    Flooding the section with regenerated power lifts the catenary voltages;
    the vector is flagged successful only if some node in unsafe_set is
    pushed outside its safety band in the predicted true state.
    """
    if not unsafe_set:
        raise AttackError("unsafe_set must be nonempty for a safety attack")
    objective = _regen_injection(topology)
    honest = objective(true_state)
    writable_trains = [n for n in sorted(set(writable_set)) if topology.roles[n].is_train]
    if not writable_trains:
        return _noop_vector(
            true_state, topology, writable_set, honest, stealthy=False, success=False
        )
    driver = _AttackDriver(
        true_state,
        topology,
        params,
        thresholds,
        power_states,
        writable_trains,
        bounds,
        objective,
        solver_config,
        multistarts,
        effort=effort,
        initial_powers=initial_powers,
    )
    best = driver.run()
    if best is None:
        return _noop_vector(
            true_state, topology, writable_set, honest, stealthy=False, success=False
        )
    success = _breaches(best.state, unsafe_set, thresholds)
    return _finalize(
        best, true_state, topology, writable_set, honest, success=success
    )


def _breaches(state: SystemState, unsafe_set, thresholds: ControlThresholds) -> bool:
    nodes = sorted(unsafe_set)
    v = state.v[nodes]
    return bool(np.any((v < thresholds.v_min) | (v > thresholds.v_max)))


# ---------------------------------------------------------------------------
# Stealthy variants: full measurement-frame consistency via position shifts.
# ---------------------------------------------------------------------------


def _project_chain(positions: np.ndarray) -> np.ndarray:
    """Restore strict chain ordering with at least the merge separation."""
    out = positions.copy()
    gap = MERGE_EPSILON_KM * 1.01
    for k in range(1, len(out)):
        out[k] = max(out[k], out[k - 1] + gap)
    return out


class _StealthyDriver:
    """Search over reported train positions for consistent fake frames.

    For any reported position vector the only fully consistent fake frame is
    the honest steady state of the fictitious section at those positions;
    the attacker's freedom therefore reduces to where the trains claim to
    be. Written trains then regulate against the fictitious voltages, which
    determines the real operating point and the objective.
    """

    def __init__(
        self,
        true_state: SystemState,
        topology: TpsTopology,
        params: ElectricalParams,
        thresholds: ControlThresholds,
        power_states,
        writable_set,
        bounds: AttackBounds,
        objective: Callable[[SystemState], float],
        solver_config: PowerflowConfig,
        effort: str = "full",
        initial_shifts=None,
    ):
        self.true_state = true_state
        self.topology = topology
        self.params = params
        self.thresholds = thresholds
        self.power_states = normalize_power_states(topology, power_states)
        self.writable = sorted(set(writable_set))
        self.bounds = bounds
        self.objective = objective
        self.config = solver_config
        self.effort = effort
        self.initial_shifts = initial_shifts
        self.movable = [
            n for n in self.writable if topology.roles[n].is_train and bounds.ds[n] > 0
        ]
        s = np.asarray(topology.positions)
        # Reported positions may not cross neighbouring nodes: the monitor
        # derives the chain from reported order, so crossings would change
        # the topology and immediately clash with the fixed substations.
        self.shift_lo = np.empty(len(self.movable))
        self.shift_hi = np.empty(len(self.movable))
        for k, node in enumerate(self.movable):
            lo = -bounds.ds[node]
            hi = bounds.ds[node]
            if node > 0:
                lo = max(lo, s[node - 1] + MERGE_EPSILON_KM - s[node])
            if node + 1 < len(s):
                hi = min(hi, s[node + 1] - MERGE_EPSILON_KM - s[node])
            self.shift_lo[k] = min(lo, 0.0)
            self.shift_hi[k] = max(hi, 0.0)
        self._warm_fict = np.array(true_state.v)
        self._warm_real = np.array(true_state.v)

    def _evaluate(self, shifts: np.ndarray) -> Optional[tuple[_Candidate, np.ndarray]]:
        s_prime = np.array(self.topology.positions)
        for k, node in enumerate(self.movable):
            s_prime[node] += shifts[k]
        s_prime = _project_chain(s_prime)

        fict_topology = self.topology.at_positions(s_prime)
        try:
            fict = solve_steady_state(
                fict_topology,
                self.params,
                self.thresholds,
                self.power_states,
                self.config,
                initial_voltages=self._warm_fict,
            )
        except PowerflowError:
            return None
        self._warm_fict = np.array(fict.v)

        override = FeedbackOverride(
            perceived={
                n: float(fict.v[n]) for n in self.writable if self.topology.roles[n].is_train
            }
        )
        try:
            real = solve_under_false_feedback(
                self.topology,
                self.params,
                self.thresholds,
                self.power_states,
                override,
                self.config,
                initial_voltages=self._warm_real,
            )
        except PowerflowError:
            return None
        self._warm_real = np.array(real.v)

        violation = 0.0
        v_prime: dict[int, float] = {}
        i_prime: dict[int, float] = {}
        for node in range(self.topology.node_count):
            dv = float(self.bounds.dv[node])
            di = float(self.bounds.di[node])
            gap_v = max(0.0, abs(float(fict.v[node] - real.v[node])) - dv)
            gap_i = max(0.0, abs(float(fict.i[node] - real.i[node])) - di)
            violation += gap_v * gap_v + (gap_i / 10.0) ** 2
            if node in self.writable:
                v_prime[node] = float(fict.v[node])
                i_prime[node] = float(fict.i[node])
        powers = {
            n: float(fict.p[n]) for n in self.writable if self.topology.roles[n].is_train
        }
        cand = _Candidate(powers, v_prime, i_prime, real, self.objective(real), violation)
        return cand, s_prime

    def _starts(self) -> list[np.ndarray]:
        k = len(self.movable)
        zeros = np.zeros(k)
        s = np.asarray(self.topology.positions)
        subs = [s[n] for n in self.topology.substation_nodes]
        toward_mid = np.empty(k)
        toward_sub = np.empty(k)
        for j, node in enumerate(self.movable):
            below = max((p for p in subs if p <= s[node]), default=s[0])
            above = min((p for p in subs if p >= s[node]), default=s[-1])
            toward_mid[j] = np.clip(
                0.5 * (below + above) - s[node], self.shift_lo[j], self.shift_hi[j]
            )
            nearest = below if s[node] - below <= above - s[node] else above
            toward_sub[j] = np.clip(nearest - s[node], self.shift_lo[j], self.shift_hi[j])
        starts = []
        if self.initial_shifts is not None:
            starts.append(np.clip(self.initial_shifts, self.shift_lo, self.shift_hi))
        starts.extend([zeros, toward_mid, toward_sub])
        if self.effort == "full":
            starts.extend([self.shift_lo.copy(), self.shift_hi.copy()])
            if k <= 2:
                for combo in itertools.product(
                    *[(self.shift_lo[j], self.shift_hi[j]) for j in range(k)]
                ):
                    starts.append(np.array(combo))
        seen = set()
        unique = []
        for cand in starts:
            key = tuple(np.round(cand, 9))
            if key not in seen:
                seen.add(key)
                unique.append(cand)
        return unique

    def run(self) -> Optional[tuple[_Candidate, np.ndarray]]:
        if not self.movable:
            result = self._evaluate(np.zeros(0))
            if result is None or result[0].violation > _FEASIBILITY_TOL:
                return None
            return result
        best: Optional[tuple[_Candidate, np.ndarray]] = None
        lo, hi = self.shift_lo, self.shift_hi
        weights = _PENALTY_WEIGHTS if self.effort == "full" else (1e5,)
        maxiter = 30 if self.effort == "full" else 8
        for start in self._starts():
            x = np.clip(start, lo, hi)
            for weight in weights:

                def penalised(xv: np.ndarray) -> float:
                    out = self._evaluate(np.clip(xv, lo, hi))
                    if out is None:
                        return 1e12
                    return -out[0].objective + weight * out[0].violation

                res = minimize(
                    penalised,
                    x,
                    method="Powell",
                    bounds=Bounds(lo, hi),
                    options={"xtol": 1e-6, "ftol": 1e-10, "maxiter": maxiter},
                )
                x = np.clip(res.x, lo, hi)
            out = self._evaluate(x)
            if out is None or out[0].violation > _FEASIBILITY_TOL:
                continue
            if best is None or out[0].objective > best[0].objective + 1e-12:
                best = out
        return best


def stealthy_attack(
    kind: AttackKind,
    true_state: SystemState,
    topology: TpsTopology,
    params: ElectricalParams,
    thresholds: ControlThresholds,
    power_states,
    writable_set,
    bounds: AttackBounds,
    solver_config: PowerflowConfig = DEFAULT_CONFIG,
    effort: str = "full",
    initial_shifts=None,
) -> AttackVector:
    """Goal-directed attack whose measurement frame passes the bad-data test.

    The fake frame must satisfy the nodal equations at the reported
    positions and the substation models on the fake readings, leaving the
    reported train positions as the only real degrees of freedom. Nodes
    outside the writable set pin the fake frame to the true one there, which
    usually forces the no-op (a single writable train cannot mount a
    successful stealthy safety attack on the reference section).
    """
    if kind.goal == "efficiency":
        objective = _substation_power(topology)
    elif kind.goal == "safety":
        objective = _regen_injection(topology)
    else:
        raise AttackError("stealthy construction applies to efficiency or safety goals")
    honest = objective(true_state)
    driver = _StealthyDriver(
        true_state,
        topology,
        params,
        thresholds,
        power_states,
        writable_set,
        bounds,
        objective,
        solver_config,
        effort=effort,
        initial_shifts=initial_shifts,
    )
    best = driver.run()
    goal_is_safety = kind.goal == "safety"
    if best is None or best[0].objective <= honest + _NOOP_MARGIN:
        return _noop_vector(
            true_state,
            topology,
            writable_set,
            honest,
            stealthy=True,
            success=False if goal_is_safety else None,
        )
    candidate, s_prime = best
    success = (
        _breaches(candidate.state, kind.unsafe_set, thresholds) if goal_is_safety else None
    )
    return _finalize(
        candidate,
        true_state,
        topology,
        writable_set,
        honest,
        stealthy_positions=s_prime,
        success=success,
    )


def suboptimal_additive_attack(
    true_state: SystemState,
    topology: TpsTopology,
    params: ElectricalParams,
    thresholds: ControlThresholds,
    power_states,
    writable_set,
    bounds: AttackBounds,
    additive_dv: float = 20.0,
    solver_config: PowerflowConfig = DEFAULT_CONFIG,
) -> AttackVector:
    """Computation-free efficiency attack: bias written voltage readings.

    Raising a regenerating train's perceived voltage by a constant makes its
    squeeze control curtail injection with no optimisation at all.
    """
    writable_trains = [n for n in sorted(set(writable_set)) if topology.roles[n].is_train]
    objective = _substation_power(topology)
    honest = objective(true_state)
    if not writable_trains:
        return _noop_vector(true_state, topology, writable_set, honest, stealthy=False)
    for node in writable_trains:
        if abs(additive_dv) > bounds.dv[node]:
            raise AttackError(
                f"additive offset {additive_dv} V exceeds the node {node} budget"
            )
    override = FeedbackOverride(additive={n: additive_dv for n in writable_trains})
    state = solve_under_false_feedback(
        topology, params, thresholds, power_states, override, solver_config,
        initial_voltages=np.array(true_state.v),
    )
    v_prime = {n: float(state.v[n] + additive_dv) for n in writable_trains}
    powers = {
        n: control_power(
            topology.roles[n], v_prime[n], normalize_power_states(topology, power_states)[n], thresholds
        )
        for n in writable_trains
    }
    i_prime = {
        n: (powers[n] * WATTS_PER_MW / v_prime[n] if v_prime[n] != 0 else 0.0)
        for n in writable_trains
    }
    candidate = _Candidate(powers, v_prime, i_prime, state, objective(state), 0.0)
    return _finalize(candidate, true_state, topology, writable_set, honest)


def audit_attack_vector(
    attack: AttackVector,
    topology: TpsTopology,
    params: ElectricalParams,
    thresholds: ControlThresholds,
    power_states,
    bounds: AttackBounds,
) -> dict[str, float]:
    """Re-verify an attack vector by direct substitution.

    Returns the worst violation of each constraint family; all values are
    ~0 for a well-formed vector. Used as a self-audit in tests and by the
    CLI attack tables.
    """
    states = normalize_power_states(topology, power_states)
    real = attack.attacked_state
    out = {
        "control_inversion_mw": 0.0,
        "power_consistency_mw": 0.0,
        "power_interval_mw": 0.0,
        "dv_bound_v": 0.0,
        "di_bound_a": 0.0,
        "ds_bound_km": 0.0,
    }
    for node in topology.train_nodes:
        p = float(attack.induced_power[node])
        role = topology.roles[node]
        if node in attack.writable_set and not attack.is_noop:
            vp = float(attack.v_prime[node])
            ip = float(attack.i_prime[node])
            implied = control_power(role, vp, states[node], thresholds)
            out["control_inversion_mw"] = max(out["control_inversion_mw"], abs(implied - p))
            out["power_consistency_mw"] = max(
                out["power_consistency_mw"], abs(vp * ip / WATTS_PER_MW - p)
            )
        if role is Role.TRACTIONING:
            gap = max(0.0, states[node].demand - p, p - 0.0)
        else:
            gap = max(0.0, -p, p - states[node].regen_capacity)
        out["power_interval_mw"] = max(out["power_interval_mw"], gap)
    if real is not None:
        out["dv_bound_v"] = float(
            np.max(np.maximum(np.abs(attack.v_prime - real.v) - bounds.dv, 0.0))
        )
        out["di_bound_a"] = float(
            np.max(np.maximum(np.abs(attack.i_prime - real.i) - bounds.di, 0.0))
        )
    if attack.s_prime is not None:
        out["ds_bound_km"] = float(
            np.max(
                np.maximum(
                    np.abs(attack.s_prime - np.asarray(topology.positions)) - bounds.ds, 0.0
                )
            )
        )
    return out
