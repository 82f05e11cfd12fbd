"""Time-domain scenario engine.

Builds the electrical section instant by instant from train kinematics,
solves the honest and (optionally) attacked operating points, injects
measurement noise, runs the detection stack, and aggregates energy, safety
and detection metrics. Monte Carlo rate estimation and ROC sweeps reuse the
same per-instant machinery with noise vectorised across trials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .attacks import (
    AttackBounds,
    AttackKind,
    AttackVector,
    efficiency_attack,
    safety_attack,
    stealthy_attack,
    suboptimal_additive_attack,
)
from .detection import (
    CondensedEnumerator,
    DetectorConfig,
    MeasurementSet,
    enumerate_stealthy_states,
    estimate_state,
    evaluate_frame,
    gadw_decide,
    measurement_matrix,
    min_pairwise_distance,
    sad_evaluate,
)
from .model import (
    MERGE_EPSILON_KM,
    ControlThresholds,
    ElectricalParams,
    Role,
    SystemState,
    TpsTopology,
    TrainPowerState,
    branch_losses_mw,
)
from .powerflow import PowerflowConfig, PowerflowError, solve_steady_state

_ATTACK_KINDS = (
    "efficiency",
    "safety",
    "stealthy-efficiency",
    "stealthy-safety",
    "suboptimal-additive",
    "random-additive",
    "stealthy-solutions",
)

# Attacks whose fake frames change what the trains physically do.
_PHYSICAL_KINDS = _ATTACK_KINDS[:5]

_SIM_PF_CONFIG = PowerflowConfig(max_iterations=60, tolerance=1e-8)


class ScenarioError(ValueError):
    """Invalid scenario definition."""


# ---------------------------------------------------------------------------
# Train motion and power envelopes.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunningProfile:
    """Stop-to-stop motion plan of one train.

    speed_phases is the (acceleration m/s^2, duration s) template of a single
    hop starting and ending at rest; cruise segments (zero acceleration) are
    stretched per hop so the template covers the actual stop spacing. Davis
    coefficients give running resistance A + B v + C v^2 in newtons.
    """

    name: str
    departure_time: float
    dwell_time: float
    stops: tuple[float, ...]
    speed_phases: tuple[tuple[float, float], ...]
    mass: float  # tonnes
    traction_efficiency: float = 0.7
    regen_efficiency: float = 0.4
    resistance_coeffs: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if len(self.stops) < 2:
            raise ScenarioError(f"{self.name}: a journey needs at least two stops")
        steps = np.diff(self.stops)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise ScenarioError(f"{self.name}: stops must be strictly monotone")
        if not (0 < self.traction_efficiency <= 1 and 0 < self.regen_efficiency <= 1):
            raise ScenarioError(f"{self.name}: efficiencies must be in (0, 1]")
        if self.mass <= 0:
            raise ScenarioError(f"{self.name}: mass must be positive")
        if self.dwell_time < 0 or self.departure_time < 0:
            raise ScenarioError(f"{self.name}: times must be nonnegative")
        v = 0.0
        for a, d in self.speed_phases:
            if d <= 0:
                raise ScenarioError(f"{self.name}: phase durations must be positive")
            v += a * d
            if v < -1e-9:
                raise ScenarioError(f"{self.name}: speed template goes negative")
        if abs(v) > 1e-9:
            raise ScenarioError(f"{self.name}: speed template must end at rest")
        if not any(a == 0.0 for a, _ in self.speed_phases):
            raise ScenarioError(f"{self.name}: template needs a cruise phase to fit hops")


@dataclass(frozen=True)
class _Segment:
    t0: float
    t1: float
    s0_km: float
    v0: float  # m/s, magnitude
    a: float  # m/s^2, signed along travel
    direction: float
    mode: str

    def locate(self, t: float) -> tuple[float, float, float, str]:
        dt = t - self.t0
        dist_m = self.v0 * dt + 0.5 * self.a * dt * dt
        speed = self.v0 + self.a * dt
        pos = self.s0_km + self.direction * dist_m / 1000.0
        return pos, speed, self.a, self.mode


_TIMELINE_CACHE: dict[int, tuple[RunningProfile, list[_Segment]]] = {}


def _phase_distance(phases) -> tuple[float, float]:
    dist = cruise = 0.0
    v = 0.0
    for a, d in phases:
        if a == 0.0:
            cruise += v * d
        dist += v * d + 0.5 * a * d * d
        v += a * d
    return dist, cruise


def _hop_phases(profile: RunningProfile, hop_m: float):
    """Template with cruise segments stretched to cover hop_m metres."""
    dist, cruise = _phase_distance(profile.speed_phases)
    if cruise <= 0:
        raise ScenarioError(f"{profile.name}: template has no cruise distance to stretch")
    needed = hop_m - (dist - cruise)
    if needed <= 0:
        raise ScenarioError(
            f"{profile.name}: hop of {hop_m:.0f} m shorter than accel/brake distance"
        )
    factor = needed / cruise
    return [(a, d * factor if a == 0.0 else d) for a, d in profile.speed_phases]


def _timeline(profile: RunningProfile) -> list[_Segment]:
    cached = _TIMELINE_CACHE.get(id(profile))
    if cached is not None and cached[0] is profile:
        return cached[1]
    segments: list[_Segment] = []
    direction = 1.0 if profile.stops[-1] > profile.stops[0] else -1.0
    t = profile.departure_time
    segments.append(_Segment(0.0, t, profile.stops[0], 0.0, 0.0, direction, "dwell"))
    pos = profile.stops[0]
    for nxt in profile.stops[1:]:
        hop_m = abs(nxt - pos) * 1000.0
        v = 0.0
        for a, d in _hop_phases(profile, hop_m):
            if v == 0.0 and a == 0.0:
                mode = "dwell"
            elif a > 0:
                mode = "traction"
            elif a < 0:
                mode = "brake"
            else:
                mode = "cruise"
            segments.append(_Segment(t, t + d, pos, v, a, direction, mode))
            pos += direction * (v * d + 0.5 * a * d * d) / 1000.0
            v += a * d
            t += d
        pos = nxt  # cancel roundoff drift at the stop
        segments.append(_Segment(t, t + profile.dwell_time, pos, 0.0, 0.0, direction, "dwell"))
        t += profile.dwell_time
    segments.append(_Segment(t, math.inf, pos, 0.0, 0.0, direction, "dwell"))
    _TIMELINE_CACHE[id(profile)] = (profile, segments)
    return segments


def kinematics_at(profile: RunningProfile, t: float) -> tuple[float, float, float, str]:
    """(position km, speed m/s, acceleration m/s^2, mode) at time t."""
    if t < 0:
        raise ScenarioError("t must be nonnegative")
    for seg in _timeline(profile):
        if seg.t0 <= t < seg.t1:
            return seg.locate(t)
    last = _timeline(profile)[-1]
    return last.locate(t)


def power_envelope_at(profile: RunningProfile, t: float) -> TrainPowerState:
    """Electrical demand / regeneration capacity implied by the motion plan."""
    _, speed, accel, mode = kinematics_at(profile, t)
    mass_kg = profile.mass * 1000.0
    a_coef, b_coef, c_coef = profile.resistance_coeffs
    drag = a_coef + b_coef * speed + c_coef * speed * speed
    if mode == "traction":
        mech_w = (mass_kg * accel + drag) * speed
        return TrainPowerState(demand=-mech_w / profile.traction_efficiency / 1e6)
    if mode == "brake":
        recover_w = max(0.0, (-accel * mass_kg - drag) * speed)
        return TrainPowerState(regen_capacity=profile.regen_efficiency * recover_w / 1e6)
    if mode == "cruise" and drag > 0:
        return TrainPowerState(demand=-drag * speed / profile.traction_efficiency / 1e6)
    return TrainPowerState()


# ---------------------------------------------------------------------------
# Scenario definition.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackSpec:
    """What the attacker does, where they can write, and when."""

    kind: str
    writable: object = "trains"  # "trains" | "all" | explicit node indices
    dv: float = 50.0
    di: float = 200.0
    ds: float = 0.6
    additive_dv: float = 20.0
    t_start: float = 0.0
    t_end: float = math.inf

    def __post_init__(self) -> None:
        if self.kind not in _ATTACK_KINDS:
            raise ScenarioError(f"unknown attack kind {self.kind!r}")
        if isinstance(self.writable, str):
            if self.writable not in ("trains", "all"):
                raise ScenarioError("writable must be 'trains', 'all' or node indices")
        else:
            object.__setattr__(self, "writable", tuple(int(n) for n in self.writable))
        if min(self.dv, self.di, self.ds) < 0:
            raise ScenarioError("attack bounds must be nonnegative")

    def active_at(self, t: float) -> bool:
        return self.t_start <= t <= self.t_end

    @property
    def stealthy(self) -> bool:
        return self.kind.startswith("stealthy")


@dataclass(frozen=True)
class StaticInstant:
    """Fixed section for single-instant studies (no kinematics)."""

    roles: tuple[str, ...]
    positions: tuple[float, ...]
    demand: tuple[float, ...]
    regen_capacity: tuple[float, ...]

    def topology(self) -> TpsTopology:
        return TpsTopology.chain(self.roles, self.positions)

    def power_states(self):
        out = []
        for role, d, c in zip(self.roles, self.demand, self.regen_capacity):
            if Role(role) is Role.SUBSTATION:
                out.append(None)
            else:
                out.append(TrainPowerState(demand=d, regen_capacity=c))
        return tuple(out)


@dataclass(frozen=True)
class Scenario:
    """Complete description of one reproducible experiment."""

    name: str = "scenario"
    params: ElectricalParams = ElectricalParams()
    thresholds: ControlThresholds = ControlThresholds()
    line_length_km: float = 10.0
    substations_km: tuple[float, ...] = ()
    stations_km: tuple[float, ...] = ()
    trains: tuple[RunningProfile, ...] = ()
    static_instant: Optional[StaticInstant] = None
    horizon_s: float = 800.0
    timestep_s: float = 1.0
    noise_frac: float = 0.0
    full_scale: tuple[float, float] = (900.0, 2500.0)
    seed: int = 2024
    attack: Optional[AttackSpec] = None
    detector: DetectorConfig = DetectorConfig()
    piv_tolerance_km: float = 0.01
    mitigate: bool = False

    def __post_init__(self) -> None:
        if self.static_instant is None:
            if not self.trains or not self.substations_km:
                raise ScenarioError("dynamic scenarios need trains and substations")
            for s in (*self.substations_km, *self.stations_km):
                if not (0 <= s <= self.line_length_km):
                    raise ScenarioError(f"position {s} km outside the line")
            for profile in self.trains:
                for stop in profile.stops:
                    if not (0 <= stop <= self.line_length_km):
                        raise ScenarioError(f"{profile.name}: stop {stop} km off the line")
        steps = self.horizon_s / self.timestep_s
        if abs(steps - round(steps)) > 1e-9:
            raise ScenarioError("horizon must be an integer number of timesteps")
        if self.noise_frac < 0:
            raise ScenarioError("noise_frac must be nonnegative")

    @property
    def noise_std(self) -> tuple[float, float]:
        return (
            self.noise_frac * self.full_scale[0],
            self.noise_frac * self.full_scale[1],
        )


# ---------------------------------------------------------------------------
# Per-instant section assembly.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstantContext:
    t: float
    topology: TpsTopology
    power_states: tuple
    labels: tuple[str, ...]

    @property
    def train_nodes(self) -> tuple[int, ...]:
        return self.topology.train_nodes

    @property
    def regen_nodes(self) -> tuple[int, ...]:
        return tuple(
            n
            for n in self.topology.train_nodes
            if self.power_states[n] is not None and self.power_states[n].regen_capacity > 0
        )


def assemble_instant(scenario: Scenario, t: float) -> InstantContext:
    """Section snapshot at time t: nodes sorted by position, trains nudged
    off substations by the merge separation so the chain stays regular."""
    if scenario.static_instant is not None:
        inst = scenario.static_instant
        labels = tuple(
            f"{'sub' if Role(r) is Role.SUBSTATION else 'train'}{k}"
            for k, r in enumerate(inst.roles)
        )
        return InstantContext(t, inst.topology(), inst.power_states(), labels)

    entries = [
        (pos, 0, f"sub{k}", Role.SUBSTATION, None)
        for k, pos in enumerate(scenario.substations_km)
    ]
    for profile in scenario.trains:
        pos, _, _, _ = kinematics_at(profile, t)
        ps = power_envelope_at(profile, t)
        role = Role.REGENERATING if ps.regen_capacity > 0 else Role.TRACTIONING
        entries.append((pos, 1, profile.name, role, ps))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))

    positions = [e[0] for e in entries]
    for k in range(1, len(positions)):
        if positions[k] - positions[k - 1] < MERGE_EPSILON_KM:
            positions[k] = positions[k - 1] + MERGE_EPSILON_KM * 1.01
    positions[0] = 0.0 if abs(positions[0]) < 1e-12 else positions[0]

    roles = tuple(e[3] for e in entries)
    labels = tuple(e[2] for e in entries)
    states = tuple(e[4] for e in entries)
    topology = TpsTopology.chain(roles, positions)
    return InstantContext(t, topology, states, labels)


def _writable_nodes(spec: AttackSpec, ctx: InstantContext) -> frozenset:
    if spec.writable == "trains":
        return frozenset(ctx.train_nodes)
    if spec.writable == "all":
        return frozenset(range(ctx.topology.node_count))
    return frozenset(spec.writable)


def nearest_stealthy_frame(
    ctx: InstantContext,
    params: ElectricalParams,
    honest: SystemState,
    config: DetectorConfig,
):
    """Fake frame at the consistent state nearest to (but distinct from) truth."""
    powers = {n: float(honest.p[n]) for n in ctx.train_nodes}
    sols = enumerate_stealthy_states(ctx.topology, params, powers, config)
    best = None
    best_d = np.inf
    for sol in sols.solutions:
        d = float(np.linalg.norm(sol - honest.v, ord=config.p_norm))
        if d > config.dedup_radius_v and d < best_d:
            best, best_d = sol, d
    if best is None:
        return None
    y = measurement_matrix(np.asarray(ctx.topology.positions), params)[ctx.topology.node_count :]
    return np.asarray(best), y @ best


@dataclass
class AppliedAttack:
    """Measurement frame and physics for one instant, attack included."""

    physical: SystemState
    meas_v: np.ndarray
    meas_i: np.ndarray
    meas_s: np.ndarray
    vector: Optional[AttackVector] = None
    tampered: bool = False


def _apply_attack(
    scenario: Scenario,
    ctx: InstantContext,
    honest: SystemState,
    spec: Optional[AttackSpec],
    warm_shifts: Optional[dict] = None,
) -> AppliedAttack:
    s_true = np.asarray(ctx.topology.positions)
    passthrough = AppliedAttack(honest, np.array(honest.v), np.array(honest.i), s_true)
    if spec is None or not spec.active_at(ctx.t):
        return passthrough
    if not ctx.regen_nodes:
        # Tractioning-side attacks change running profiles and are out of
        # scope; the attacker stands down when nothing regenerates.
        return passthrough

    writable = _writable_nodes(spec, ctx)
    params, thresholds = scenario.params, scenario.thresholds
    bounds = AttackBounds.for_writable(
        ctx.topology, writable, spec.dv, spec.di, spec.ds, positions_writable=spec.stealthy
    )
    kind = spec.kind
    if kind == "random-additive":
        target = min(
            (n for n in writable if ctx.topology.roles[n].is_train),
            key=lambda n: ctx.topology.positions[n],
            default=None,
        )
        if target is None:
            return passthrough
        v = np.array(honest.v)
        v[target] += spec.additive_dv
        return AppliedAttack(honest, v, np.array(honest.i), s_true, tampered=True)
    if kind == "stealthy-solutions":
        frame = nearest_stealthy_frame(ctx, params, honest, scenario.detector)
        if frame is None:
            return passthrough
        return AppliedAttack(honest, frame[0], frame[1], s_true, tampered=True)

    common = (honest, ctx.topology, params, thresholds, ctx.power_states, writable, bounds)
    warm_powers = None
    if warm_shifts is not None:
        warm_powers = {
            n: warm_shifts[("p", ctx.labels[n])]
            for n in ctx.train_nodes
            if ("p", ctx.labels[n]) in warm_shifts
        }
    if kind == "efficiency":
        vec = efficiency_attack(
            *common, solver_config=_SIM_PF_CONFIG, effort="fast",
            initial_powers=warm_powers,
        )
    elif kind == "safety":
        vec = safety_attack(
            *common,
            unsafe_set=set(range(ctx.topology.node_count)),
            solver_config=_SIM_PF_CONFIG,
            effort="fast",
            initial_powers=warm_powers,
        )
    elif kind == "suboptimal-additive":
        vec = suboptimal_additive_attack(*common, additive_dv=spec.additive_dv,
                                         solver_config=_SIM_PF_CONFIG)
    else:
        goal = "efficiency" if kind == "stealthy-efficiency" else "safety"
        unsafe = frozenset(range(ctx.topology.node_count)) if goal == "safety" else frozenset()
        movable = [
            n for n in sorted(writable)
            if ctx.topology.roles[n].is_train and bounds.ds[n] > 0
        ]
        initial = None
        if warm_shifts is not None and movable:
            initial = np.array([warm_shifts.get(ctx.labels[n], 0.0) for n in movable])
        vec = stealthy_attack(
            AttackKind(goal, stealthy=True, unsafe_set=unsafe),
            *common,
            solver_config=_SIM_PF_CONFIG,
            effort="fast",
            initial_shifts=initial,
        )
        if warm_shifts is not None and vec.s_prime is not None:
            for n in movable:
                warm_shifts[ctx.labels[n]] = float(
                    vec.s_prime[n] - ctx.topology.positions[n]
                )
    if warm_shifts is not None and not vec.is_noop:
        for n in ctx.train_nodes:
            warm_shifts[("p", ctx.labels[n])] = float(vec.induced_power[n])
    if vec.is_noop or vec.attacked_state is None:
        return passthrough
    meas_s = np.array(vec.s_prime) if vec.s_prime is not None else s_true
    return AppliedAttack(
        vec.attacked_state,
        np.array(vec.v_prime),
        np.array(vec.i_prime),
        meas_s,
        vector=vec,
        tampered=True,
    )


# ---------------------------------------------------------------------------
# Timeline run.
# ---------------------------------------------------------------------------


@dataclass
class InstantRecord:
    t: float
    labels: tuple[str, ...]
    positions: np.ndarray
    v_honest: np.ndarray
    i_honest: np.ndarray
    p_honest: np.ndarray
    v_attacked: np.ndarray
    i_attacked: np.ndarray
    p_attacked: np.ndarray
    attack_active: bool
    tampered: bool
    bdd_alarm: bool = False
    residual: float = 0.0
    piv_alarm: bool = False
    sad_alarm: bool = False
    j_star: float = float("nan")
    distance: float = float("nan")
    gad_alarm: bool = False
    gadw_alarm: bool = False
    sad_onset: bool = False
    skipped: bool = False
    mitigated: bool = False


@dataclass
class MetricsReport:
    """Per-instant traces plus scalar aggregates of one timeline run."""

    scenario_name: str
    seed: int
    records: list[InstantRecord]
    aggregates: dict
    fp_series: Optional[np.ndarray] = None
    md_series: Optional[np.ndarray] = None


class RunFailedError(RuntimeError):
    pass


def _noise_rng(seed: int) -> np.random.Generator:
    # Counter-based generator so trials and reruns are reproducible.
    return np.random.Generator(np.random.Philox(key=seed))


def _aligned(labels: tuple[str, ...], stash: dict) -> Optional[np.ndarray]:
    if stash.get("labels") is None:
        return None
    if stash["labels"] == labels:
        return stash["values"]
    index = {name: k for k, name in enumerate(stash["labels"])}
    try:
        return np.array([stash["values"][index[name]] for name in labels])
    except KeyError:
        return None


def run_timeline(scenario: Scenario, collect_verdicts: bool = True) -> MetricsReport:
    """Simulate the scenario over its horizon.

    Per instant: kinematics, honest solve, attack synthesis, false-feedback
    physics, noise injection, detection stack, bookkeeping. Solver failures
    skip the instant; more than 1% skipped instants fails the run.
    """
    steps = int(round(scenario.horizon_s / scenario.timestep_s)) + 1
    times = [k * scenario.timestep_s for k in range(steps)]
    rng = _noise_rng(scenario.seed)
    std_v, std_i = scenario.noise_std

    records: list[InstantRecord] = []
    gad_history: list[bool] = []
    accepted = {"labels": None, "values": None}
    honest_prev = {"labels": None, "values": None}
    warm = {"labels": None, "values": None}
    mitigating = False
    skipped = 0
    warm_shifts: dict = {}

    for t in times:
        ctx = assemble_instant(scenario, t)
        n = ctx.topology.node_count
        noise = rng.standard_normal(2 * n)
        try:
            honest = solve_steady_state(
                ctx.topology,
                scenario.params,
                scenario.thresholds,
                ctx.power_states,
                config=_SIM_PF_CONFIG,
                initial_voltages=_aligned(ctx.labels, warm),
            )
        except PowerflowError:
            skipped += 1
            records.append(
                InstantRecord(
                    t, ctx.labels, np.asarray(ctx.topology.positions),
                    np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan),
                    np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan),
                    attack_active=False, tampered=False, skipped=True,
                )
            )
            gad_history.append(False)
            continue
        warm = {"labels": ctx.labels, "values": np.array(honest.v)}

        spec = scenario.attack
        if mitigating:
            applied = AppliedAttack(
                honest, np.array(honest.v), np.array(honest.i),
                np.asarray(ctx.topology.positions),
            )
        else:
            applied = _apply_attack(scenario, ctx, honest, spec, warm_shifts)
        # Loss accounting covers every instant the attacker is engaged and at
        # least one train regenerates, including zero-impact (no-op) instants.
        attack_active = (
            spec is not None
            and spec.active_at(t)
            and not mitigating
            and bool(ctx.regen_nodes)
        )

        sigma = np.concatenate(
            [np.full(n, std_v**2), np.full(n, std_i**2)]
        )
        meas = MeasurementSet(
            applied.meas_v + std_v * noise[:n],
            applied.meas_i + std_i * noise[n:],
            applied.meas_s,
            sigma,
        )

        rec = InstantRecord(
            t, ctx.labels, np.asarray(ctx.topology.positions),
            np.array(honest.v), np.array(honest.i), np.array(honest.p),
            np.array(applied.physical.v), np.array(applied.physical.i),
            np.array(applied.physical.p),
            attack_active=attack_active, tampered=applied.tampered,
            mitigated=mitigating,
        )

        if collect_verdicts:
            verdict = evaluate_frame(
                meas,
                ctx.topology,
                scenario.params,
                scenario.detector,
                v_previous=_aligned(ctx.labels, accepted),
                piv_tolerance_km=scenario.piv_tolerance_km,
            )
            rec.bdd_alarm = verdict.bdd_alarm
            rec.residual = verdict.residual
            rec.piv_alarm = verdict.piv_alarm
            rec.sad_alarm = verdict.sad_alarm
            rec.j_star = verdict.j_star
            rec.distance = verdict.distance
            rec.gad_alarm = verdict.gad_alarm
            gad_history.append(verdict.gad_alarm)
            rec.gadw_alarm = (
                gadw_decide(gad_history, scenario.detector.window)
                if len(gad_history) >= scenario.detector.window
                else False
            )
            if not verdict.bdd_alarm:
                accepted = {
                    "labels": ctx.labels,
                    "values": estimate_state(meas, scenario.params),
                }
            # Onset view: would the secondary check catch this frame if the
            # attack had just started (previous instant intact)?
            prev_honest = _aligned(ctx.labels, honest_prev)
            if applied.tampered and prev_honest is not None and not verdict.piv_alarm:
                rec.sad_onset = sad_evaluate(
                    meas, ctx.topology, scenario.params, prev_honest, scenario.detector
                ).alarm
            if scenario.mitigate and rec.gadw_alarm:
                mitigating = True

        honest_prev = {"labels": ctx.labels, "values": np.array(honest.v)}
        records.append(rec)

    if skipped > 0.01 * steps:
        raise RunFailedError(f"{skipped}/{steps} instants failed to solve")

    return MetricsReport(
        scenario_name=scenario.name,
        seed=scenario.seed,
        records=records,
        aggregates=_aggregate(scenario, records, skipped),
    )


def _aggregate(scenario: Scenario, records: Sequence[InstantRecord], skipped: int) -> dict:
    dt_h = scenario.timestep_s / 3600.0
    sub_h = sub_a = 0.0
    qualifying = 0
    breach_s = 0.0
    onset_hits = onset_total = 0
    full_h = full_a = 0.0
    thr = scenario.thresholds
    for rec in records:
        if rec.skipped:
            continue
        subs = [k for k, name in enumerate(rec.labels) if name.startswith("sub")]
        ph = float(np.sum(rec.p_honest[subs]))
        pa = float(np.sum(rec.p_attacked[subs]))
        full_h += -ph * dt_h
        full_a += -pa * dt_h
        if rec.attack_active:
            qualifying += 1
            sub_h += -ph * dt_h
            sub_a += -pa * dt_h
            if rec.tampered:
                onset_total += 1
                onset_hits += int(rec.sad_onset)
        if np.any((rec.v_attacked < thr.v_min) | (rec.v_attacked > thr.v_max)):
            breach_s += scenario.timestep_s
    loss_pct = 100.0 * (sub_h - sub_a) / sub_h if sub_h > 1e-9 else 0.0
    alarms = {
        "bdd": sum(r.bdd_alarm for r in records),
        "piv": sum(r.piv_alarm for r in records),
        "sad": sum(r.sad_alarm for r in records),
        "gad": sum(r.gad_alarm for r in records),
        "gadw": sum(r.gadw_alarm for r in records),
    }
    return {
        "instants": len(records),
        "skipped": skipped,
        "attacked_instants": qualifying,
        "substation_energy_honest_mwh": full_h,
        "substation_energy_attacked_mwh": full_a,
        "qualifying_energy_honest_mwh": sub_h,
        "qualifying_energy_attacked_mwh": sub_a,
        "efficiency_loss_pct": loss_pct,
        "breach_seconds": breach_s,
        "sad_onset_rate": onset_hits / onset_total if onset_total else float("nan"),
        "alarm_counts": alarms,
    }


# ---------------------------------------------------------------------------
# Monte Carlo rate estimation.
# ---------------------------------------------------------------------------


@dataclass
class _FrameBase:
    """Noiseless context of one instant shared by all trials."""

    ctx: InstantContext
    honest: SystemState
    z_honest: np.ndarray
    z_attacked: np.ndarray
    tampered: bool
    est_op: np.ndarray  # maps measurements to the voltage estimate
    h: np.ndarray
    weights: np.ndarray


def _frame_bases(scenario: Scenario) -> list[Optional[_FrameBase]]:
    steps = int(round(scenario.horizon_s / scenario.timestep_s)) + 1
    std_v, std_i = scenario.noise_std
    bases: list[Optional[_FrameBase]] = []
    warm = {"labels": None, "values": None}
    warm_shifts: dict = {}
    for k in range(steps):
        t = k * scenario.timestep_s
        ctx = assemble_instant(scenario, t)
        try:
            honest = solve_steady_state(
                ctx.topology,
                scenario.params,
                scenario.thresholds,
                ctx.power_states,
                config=_SIM_PF_CONFIG,
                initial_voltages=_aligned(ctx.labels, warm),
            )
        except PowerflowError:
            bases.append(None)
            continue
        warm = {"labels": ctx.labels, "values": np.array(honest.v)}
        applied = _apply_attack(scenario, ctx, honest, scenario.attack, warm_shifts)
        n = ctx.topology.node_count
        weights = np.concatenate(
            [np.full(n, 1.0 / std_v**2 if std_v else 1.0),
             np.full(n, 1.0 / std_i**2 if std_i else 1.0)]
        )
        h = measurement_matrix(applied.meas_s, scenario.params)
        a = h.T @ (weights[:, None] * h)
        est_op = np.linalg.solve(a, h.T * weights[None, :])
        bases.append(
            _FrameBase(
                ctx,
                honest,
                np.concatenate([honest.v, honest.i]),
                np.concatenate([applied.meas_v, applied.meas_i]),
                applied.tampered,
                est_op,
                h,
                weights,
            )
        )
    return bases


def _batched_sad(
    base: _FrameBase,
    scenario: Scenario,
    v_meas: np.ndarray,
    i_meas: np.ndarray,
    v_prev: np.ndarray,
    enum_cache: dict,
):
    """Vectorised secondary check over trials for one instant.

    Frames are grouped by which trains count as powered (the measured power
    crosses the passive floor differently per trial) so every group maps to
    one condensed enumeration batch.
    """
    cfg = scenario.detector
    trains = list(base.ctx.train_nodes)
    trials = v_meas.shape[0]
    alarm = np.zeros(trials, dtype=bool)
    degenerate = np.zeros(trials, dtype=bool)
    if not trains:
        return alarm, ~degenerate
    powers = v_meas[:, trains] * i_meas[:, trains] / 1e6
    active = np.abs(powers) > cfg.zero_power_floor_mw
    distance = np.linalg.norm(
        v_meas - v_prev,
        ord=cfg.p_norm if cfg.p_norm == np.inf else None,
        axis=1,
    ) if cfg.p_norm in (2, np.inf) else np.array(
        [np.linalg.norm(row, ord=cfg.p_norm) for row in v_meas - v_prev]
    )

    for pattern in np.unique(active, axis=0):
        rows = np.flatnonzero((active == pattern).all(axis=1))
        quad_nodes = tuple(np.asarray(trains)[pattern])
        if len(quad_nodes) == 0:
            degenerate[rows] = True  # linear system: single state, abstain
            continue
        key = (base.ctx.labels, tuple(np.round(base.ctx.topology.positions, 9)), quad_nodes)
        enum = enum_cache.get(key)
        if enum is None:
            enum = CondensedEnumerator(base.ctx.topology, scenario.params, quad_nodes, cfg)
            enum_cache[key] = enum
        counts, j_star = enum.batch_stats(powers[np.ix_(rows, np.flatnonzero(pattern))])
        j_eff = np.where(counts == 2, cfg.alpha * j_star, j_star)
        deg = counts < 2
        degenerate[rows] = deg
        alarm[rows] = ~deg & (distance[rows] >= j_eff * (1.0 - 1e-9))
    return alarm, degenerate


def monte_carlo_rates(scenario: Scenario, trials: int) -> tuple[np.ndarray, np.ndarray]:
    """Empirical per-instant false-positive and missed-detection rates.

    Each trial draws fresh measurement noise for the whole horizon. The
    no-attack stream drives the false-positive series; the attacked stream
    is evaluated per instant under the onset convention (the reference
    voltage vector comes from the intact no-attack chain) and windowed for
    the missed-detection series.
    """
    if trials < 1:
        raise ScenarioError("trials must be >= 1")
    bases = _frame_bases(scenario)
    std_v, std_i = scenario.noise_std
    cfg = scenario.detector
    rng = _noise_rng(scenario.seed)
    enum_cache: dict = {}

    steps = len(bases)
    fp = np.zeros(steps)
    md = np.full(steps, np.nan)
    v_pr = None  # accepted estimates per trial, aligned to previous labels
    v_pr_labels: Optional[tuple[str, ...]] = None
    gad0_hist: list[np.ndarray] = []
    gad1_hist: list[np.ndarray] = []

    for k, base in enumerate(bases):
        if base is None:
            gad0_hist.append(np.zeros(trials, dtype=bool))
            gad1_hist.append(np.zeros(trials, dtype=bool))
            continue
        n = base.ctx.topology.node_count
        noise = rng.standard_normal((trials, 2 * n))
        noise[:, :n] *= std_v
        noise[:, n:] *= std_i

        z0 = base.z_honest[None, :] + noise
        z1 = base.z_attacked[None, :] + noise
        est0 = z0 @ base.est_op.T
        res0 = z0 - est0 @ base.h.T
        r0 = np.einsum("ij,j,ij->i", res0, base.weights, res0)
        bdd0 = r0 > cfg.tau
        if base.tampered:
            est1 = z1 @ base.est_op.T
            res1 = z1 - est1 @ base.h.T
            r1 = np.einsum("ij,j,ij->i", res1, base.weights, res1)
            bdd1 = r1 > cfg.tau
        else:
            bdd1 = bdd0

        if v_pr is None or v_pr_labels != base.ctx.labels:
            # First usable instant (or a node reordering): reset reference.
            sad0 = np.zeros(trials, dtype=bool)
            sad1 = np.zeros(trials, dtype=bool)
        else:
            sad0, _ = _batched_sad(base, scenario, z0[:, :n], z0[:, n:], v_pr, enum_cache)
            if base.tampered:
                sad1, _ = _batched_sad(base, scenario, z1[:, :n], z1[:, n:], v_pr, enum_cache)
            else:
                sad1 = sad0

        gad0 = bdd0 | (~bdd0 & sad0)
        gad1 = bdd1 | (~bdd1 & sad1)
        gad0_hist.append(gad0)
        gad1_hist.append(gad1)

        w = cfg.window
        if k >= w - 1:
            fp[k] = np.mean(np.logical_and.reduce(gad0_hist[k - w + 1 : k + 1]))
            if base.tampered:
                md[k] = np.mean(~np.logical_and.reduce(gad1_hist[k - w + 1 : k + 1]))

        new_pr = est0.copy()
        if v_pr is not None and v_pr_labels == base.ctx.labels:
            new_pr[bdd0] = v_pr[bdd0]
        v_pr = new_pr
        v_pr_labels = base.ctx.labels
    return fp, md


# ---------------------------------------------------------------------------
# ROC sweep on a static frame.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RocPoint:
    tau: float
    alpha: float
    fp_rate: float
    md_rate: float


def roc_sweep(
    scenario: Scenario,
    tau_grid: Sequence[float],
    alpha_grid: Sequence[float],
    attack: str = "random-additive",
    trials: int = 1000,
) -> list[RocPoint]:
    """Detector operating points over threshold grids on the static frame.

    attack is "random-additive" (bias one train voltage reading) or
    "stealthy-solutions" (jump to the nearest consistent fake state). The
    same noise draws are reused across all grid points.
    """
    if scenario.static_instant is None:
        raise ScenarioError("roc_sweep needs a scenario with a static instant")
    if attack not in ("random-additive", "stealthy-solutions"):
        raise ScenarioError("roc attack must be random-additive or stealthy-solutions")
    if not tau_grid or len(list(alpha_grid)) == 0:
        raise ScenarioError("grids must be nonempty")
    ctx = assemble_instant(scenario, 0.0)
    honest = solve_steady_state(
        ctx.topology, scenario.params, scenario.thresholds, ctx.power_states
    )
    spec = AttackSpec(kind=attack, writable="trains",
                      additive_dv=scenario.attack.additive_dv if scenario.attack else 20.0)
    applied = _apply_attack(scenario, ctx, honest, spec)
    if not applied.tampered:
        raise ScenarioError("attack construction produced no tampered frame")

    n = ctx.topology.node_count
    std_v, std_i = scenario.noise_std
    rng = _noise_rng(scenario.seed)
    noise = rng.standard_normal((trials, 2 * n))
    noise[:, :n] *= std_v
    noise[:, n:] *= std_i

    weights = np.concatenate(
        [np.full(n, 1.0 / std_v**2 if std_v else 1.0),
         np.full(n, 1.0 / std_i**2 if std_i else 1.0)]
    )
    h = measurement_matrix(np.asarray(ctx.topology.positions), scenario.params)
    a = h.T @ (weights[:, None] * h)
    est_op = np.linalg.solve(a, h.T * weights[None, :])

    z0 = np.concatenate([honest.v, honest.i])[None, :] + noise
    z1 = np.concatenate([applied.meas_v, applied.meas_i])[None, :] + noise

    def residuals(z):
        res = z - (z @ est_op.T) @ h.T
        return np.einsum("ij,j,ij->i", res, weights, res)

    r0, r1 = residuals(z0), residuals(z1)

    base = _FrameBase(
        ctx, honest, z0[0], z1[0], True, est_op, h, weights
    )
    cfg = scenario.detector
    trains = list(ctx.train_nodes)
    v_pr = np.broadcast_to(honest.v, (trials, n))

    def sad_stats(z):
        enum_cache: dict = {}
        v_meas, i_meas = z[:, :n], z[:, n:]
        powers = v_meas[:, trains] * i_meas[:, trains] / 1e6
        active = np.abs(powers) > cfg.zero_power_floor_mw
        dist = np.linalg.norm(v_meas - v_pr, axis=1) if cfg.p_norm == 2 else np.array(
            [np.linalg.norm(row, ord=cfg.p_norm) for row in v_meas - v_pr]
        )
        counts = np.zeros(trials, dtype=np.int64)
        j_raw = np.full(trials, np.inf)
        for pattern in np.unique(active, axis=0):
            rows = np.flatnonzero((active == pattern).all(axis=1))
            quad_nodes = tuple(np.asarray(trains)[pattern])
            if not quad_nodes:
                continue
            enum = enum_cache.setdefault(
                quad_nodes,
                CondensedEnumerator(ctx.topology, scenario.params, quad_nodes, cfg),
            )
            c, j = enum.batch_stats(powers[np.ix_(rows, np.flatnonzero(pattern))])
            counts[rows] = c
            j_raw[rows] = j
        return counts, j_raw, dist

    c0, j0, d0 = sad_stats(z0)
    c1, j1, d1 = sad_stats(z1)

    points = []
    for tau in tau_grid:
        bdd0 = r0 > tau
        bdd1 = r1 > tau
        for alpha in alpha_grid:
            j0_eff = np.where(c0 == 2, alpha * j0, j0)
            j1_eff = np.where(c1 == 2, alpha * j1, j1)
            sad0 = (c0 >= 2) & (d0 >= j0_eff * (1 - 1e-9))
            sad1 = (c1 >= 2) & (d1 >= j1_eff * (1 - 1e-9))
            fp = float(np.mean(bdd0 | sad0))
            md = float(np.mean(~(bdd1 | sad1)))
            points.append(RocPoint(float(tau), float(alpha), fp, md))
    return points
