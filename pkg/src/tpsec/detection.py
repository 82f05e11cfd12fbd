"""Layered attack detection for a TPS monitor.

The stack mirrors what the monitor runs on every measurement frame: weighted
least-squares state estimation, a chi-square bad-data test on the residual,
a position integrity cross-check over redundant position sources, a
secondary detector that exploits the discreteness of physics-consistent fake
states once train positions are known, and serial/windowed fusion of the
alarm flags.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import chi2

from . import kernels
from .model import (
    MERGE_EPSILON_KM,
    WATTS_PER_MW,
    CoincidentNodesError,
    ControlThresholds,
    ElectricalParams,
    Role,
    TpsTopology,
    chain_conductance,
)
from .powerflow import solve_steady_state

# Fake-state enumeration seeds are deterministic so identical frames give
# identical verdicts.
_SEED_RNG_STREAM = 0x5EED


class DetectionError(RuntimeError):
    pass


class EstimationError(DetectionError):
    """State estimation impossible (degenerate measurement geometry)."""


@dataclass(frozen=True)
class MeasurementSet:
    """One frame of possibly compromised measurements.

    v_meas/i_meas  per-node voltage (V) and current (A) readings
    s_meas         per-node reported positions (km)
    sigma          2N noise variances, voltage block then current block;
                   all zeros means a noiseless frame (unit weights)
    """

    v_meas: np.ndarray
    i_meas: np.ndarray
    s_meas: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.v_meas, dtype=float)
        i = np.asarray(self.i_meas, dtype=float)
        s = np.asarray(self.s_meas, dtype=float)
        n = v.shape[0]
        if i.shape[0] != n or s.shape[0] != n:
            raise ValueError("v_meas, i_meas, s_meas must share the node dimension")
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape[0] != 2 * n:
            raise ValueError("sigma must hold 2N variances")
        if (sigma < 0).any():
            raise ValueError("variances must be nonnegative")
        if (sigma == 0).any() and (sigma > 0).any():
            raise ValueError("mixed zero and positive variances are not supported")
        for name, arr in (("v_meas", v), ("i_meas", i), ("s_meas", s), ("sigma", sigma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def node_count(self) -> int:
        return self.v_meas.shape[0]

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.v_meas, self.i_meas])

    @property
    def weights(self) -> np.ndarray:
        if (self.sigma == 0).all():
            return np.ones_like(self.sigma)
        return 1.0 / self.sigma


@dataclass(frozen=True)
class DetectorConfig:
    """Detector tuning.

    tau                 chi-square alarm threshold on the weighted residual
    alpha               shrink factor applied to the separation bound when
                        exactly two fake states exist
    p_norm              norm order for voltage-vector distances (2 or inf)
    window              AND-fusion window length for the windowed decision
    zero_power_floor_mw below this magnitude a train row is treated as a
                        passive node during fake-state enumeration
    dedup_radius_v      solutions closer than this collapse to one
    random_seeds        extra random starts beyond the sign-pattern seeds
    """

    tau: float = 16.0
    alpha: float = 0.9
    p_norm: float = 2
    window: int = 3
    zero_power_floor_mw: float = 0.02
    dedup_radius_v: float = 1e-3
    random_seeds: int = 32

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not (0 <= self.alpha <= 1):
            raise ValueError("alpha must be in [0, 1]")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.p_norm != np.inf and self.p_norm < 1:
            raise ValueError("p_norm must be >= 1 or inf")


@dataclass(frozen=True)
class StealthSolutionSet:
    """Real solutions of the consistency system at fixed train powers."""

    solutions: tuple[np.ndarray, ...]
    bezout_bound: int
    complete: bool = True

    def __post_init__(self) -> None:
        if len(self.solutions) > self.bezout_bound:
            raise ValueError("more solutions than the degree bound allows")


@dataclass(frozen=True)
class SadResult:
    j_star: float
    distance: float
    alarm: bool
    degenerate: bool
    n_solutions: int


@dataclass(frozen=True)
class DetectorVerdict:
    """Per-frame outcome of the full stack."""

    bdd_alarm: bool
    residual: float
    piv_alarm: bool
    sad_alarm: bool
    j_star: float
    distance: float
    gad_alarm: bool
    sad_degenerate: bool = False
    n_solutions: int = 0


def measurement_matrix(s_meas, params: ElectricalParams) -> np.ndarray:
    """Stacked [I_N; Y(s)] relating nodal voltages to the 2N measurements."""
    y = chain_conductance(np.asarray(s_meas, dtype=float), params.gamma)
    return np.vstack([np.eye(y.shape[0]), y])


def estimate_state(meas: MeasurementSet, params: ElectricalParams) -> np.ndarray:
    """Weighted least-squares voltage estimate from one measurement frame.

    Solved through the scaled design matrix (QR) rather than the normal
    equations to keep full precision on noiseless frames.
    """
    h = measurement_matrix(meas.s_meas, params)
    root_w = np.sqrt(meas.weights)
    v_hat, _, rank, _ = np.linalg.lstsq(root_w[:, None] * h, root_w * meas.z, rcond=None)
    if rank < h.shape[1]:
        raise EstimationError("measurement matrix is rank deficient")
    return v_hat


def bdd_evaluate(
    meas: MeasurementSet, params: ElectricalParams, config: DetectorConfig
) -> tuple[float, bool]:
    """Weighted residual of the frame and whether it crosses the threshold."""
    h = measurement_matrix(meas.s_meas, params)
    v_hat = estimate_state(meas, params)
    r = meas.z - h @ v_hat
    residual = float(r @ (meas.weights * r))
    return residual, residual > config.tau


def bdd_threshold_for_fp_rate(target_fp: float, meas_dim: int, state_dim: int) -> float:
    """Threshold giving the requested false-positive rate under Gaussian noise.

    The weighted residual of a consistent frame is chi-square distributed
    with meas_dim - state_dim degrees of freedom.
    """
    if not (0 < target_fp <= 1):
        raise ValueError("target_fp must be in (0, 1]")
    dof = meas_dim - state_dim
    if dof <= 0:
        raise ValueError("meas_dim must exceed state_dim")
    if target_fp == 1:
        return 0.0
    return float(chi2.isf(target_fp, dof))


def piv_verify(position_sources: Sequence[np.ndarray], tolerance_km: float) -> bool:
    """True (alarm) when any two position sources disagree beyond tolerance."""
    if len(position_sources) < 2:
        raise ValueError("need at least two position sources to cross-check")
    sources = [np.asarray(s, dtype=float) for s in position_sources]
    for a, b in itertools.combinations(sources, 2):
        if np.max(np.abs(a - b)) > tolerance_km:
            return True
    return False


def _enumeration_rows(topology: TpsTopology, params: ElectricalParams, powers_w):
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
        elif powers_w[node] != 0.0:
            quad[node] = True
            a[node] = powers_w[node]
    zeros = np.zeros(n)
    return (quad, lin_g, lin_b, a, zeros, a, a), quad


def _sign_pattern_seeds(y, quad, powers_w, v_ref):
    """One high and one low decoupled-quadratic root per powered train."""
    idx = np.flatnonzero(quad)
    pairs = []
    for node in idx:
        disc = v_ref * v_ref + 4.0 * powers_w[node] / y[node, node]
        if disc >= 0:
            root = np.sqrt(disc)
            pairs.append(((v_ref + root) / 2.0, (v_ref - root) / 2.0))
        else:
            pairs.append((0.75 * v_ref, 0.25 * v_ref))
    seeds = []
    for combo in itertools.product(*pairs) if pairs else [()]:
        seed = np.full(y.shape[0], v_ref)
        seed[idx] = combo
        seeds.append(seed)
    return np.array(seeds)


def enumerate_stealthy_states(
    topology: TpsTopology,
    params: ElectricalParams,
    train_powers_mw: Mapping[int, float],
    config: DetectorConfig = DetectorConfig(),
) -> StealthSolutionSet:
    """All real voltage vectors consistent with the given train powers.

    With train positions known, a measurement frame can only pass the
    bad-data test if its voltage vector solves this square system, which has
    finitely many solutions: one quadratic row per powered train bounds the
    count by 2^T. Enumeration is multistart damped Newton from sign-pattern
    and random seeds, deduplicated at config.dedup_radius_v.
    """
    n = topology.node_count
    powers_w = np.zeros(n)
    for node, p in train_powers_mw.items():
        if not topology.roles[node].is_train:
            raise ValueError(f"node {node} is not a train")
        if abs(p) > config.zero_power_floor_mw:
            powers_w[node] = p * WATTS_PER_MW
    y = chain_conductance(np.asarray(topology.positions), params.gamma)
    rows, quad = _enumeration_rows(topology, params, powers_w)
    t_count = int(quad.sum())
    bound = 2**t_count

    v_ref = params.v_noload
    seeds = _sign_pattern_seeds(y, quad, powers_w, v_ref)
    if config.random_seeds > 0 and t_count > 0:
        rng = np.random.default_rng(_SEED_RNG_STREAM)
        extra = np.full((config.random_seeds, n), v_ref)
        extra[:, quad] = rng.uniform(-v_ref, 2.0 * v_ref, size=(config.random_seeds, t_count))
        seeds = np.vstack([seeds, extra])

    roots, ok, _ = kernels.newton_power_states(y, *rows, seeds=seeds, tol_v=1e-10, max_iter=120)
    solutions: list[np.ndarray] = []
    for root, good in zip(roots, ok):
        if not good:
            continue
        if any(np.max(np.abs(root - s)) <= config.dedup_radius_v for s in solutions):
            continue
        solutions.append(root)
        if len(solutions) == bound:
            break
    solutions.sort(key=lambda s: tuple(s))
    return StealthSolutionSet(
        solutions=tuple(solutions),
        bezout_bound=bound,
        complete=bool(ok.any()) or t_count == 0,
    )


def min_pairwise_distance(solutions: Sequence[np.ndarray], p_norm) -> float:
    best = np.inf
    for a, b in itertools.combinations(solutions, 2):
        best = min(best, float(np.linalg.norm(a - b, ord=p_norm)))
    return best


class CondensedEnumerator:
    """Batched fake-state statistics for repeated frames of one topology.

    Eliminates the linear rows (substations and passive nodes) analytically,
    leaving one quadratic per powered train, and enumerates many frames with
    different measured train powers in a single kernel call. Distances are
    still taken in the full voltage space via the elimination map. This is
    the hot path of the Monte Carlo studies; single frames should use
    enumerate_stealthy_states.
    """

    def __init__(
        self,
        topology: TpsTopology,
        params: ElectricalParams,
        quad_nodes: Sequence[int],
        config: DetectorConfig = DetectorConfig(),
    ):
        self.config = config
        self.quad_nodes = list(quad_nodes)
        n = topology.node_count
        y = chain_conductance(np.asarray(topology.positions), params.gamma)
        quad = np.zeros(n, dtype=bool)
        quad[self.quad_nodes] = True
        lin = ~quad
        g = np.zeros(n)
        b = np.zeros(n)
        g_sub = 1.0 / params.r_substation
        for node in topology.substation_nodes:
            g[node] = g_sub
            b[node] = params.v_noload * g_sub
        # Linear block: (Y_LL + diag g_L) v_L = b_L - Y_LT v_T.
        a_ll = y[np.ix_(lin, lin)] + np.diag(g[lin])
        self.elim = -np.linalg.solve(a_ll, y[np.ix_(lin, quad)])
        self.offset = np.linalg.solve(a_ll, b[lin])
        # Condensed quadratic rows: v_T * (M v_T + m) = P.
        self.m_mat = y[np.ix_(quad, quad)] + y[np.ix_(quad, lin)] @ self.elim
        self.m_vec = y[np.ix_(quad, lin)] @ self.offset
        self.t_count = len(self.quad_nodes)
        self.v_ref = params.v_noload
        rng = np.random.default_rng(_SEED_RNG_STREAM)
        self._random_seeds = rng.uniform(
            -self.v_ref, 2.0 * self.v_ref, size=(config.random_seeds, self.t_count)
        )

    def _seeds(self, powers_w: np.ndarray) -> np.ndarray:
        """Per-frame seed block: decoupled-quadratic sign patterns plus randoms."""
        k = powers_w.shape[0]
        t = self.t_count
        beta = self.m_mat.sum(axis=1) * self.v_ref - np.diag(self.m_mat) * self.v_ref + self.m_vec
        diag = np.diag(self.m_mat)
        disc = beta**2 + 4.0 * diag * powers_w
        ok = disc >= 0
        root = np.sqrt(np.where(ok, disc, 0.0))
        hi = np.where(ok, (-beta + root) / (2 * diag), 0.75 * self.v_ref)
        lo = np.where(ok, (-beta - root) / (2 * diag), 0.25 * self.v_ref)
        patterns = np.array(list(itertools.product((0, 1), repeat=t)), dtype=bool)
        sign_seeds = np.where(patterns[None, :, :], hi[:, None, :], lo[:, None, :])
        rand = np.broadcast_to(self._random_seeds, (k, len(self._random_seeds), t))
        return np.concatenate([sign_seeds, rand], axis=1)

    def _full_distance(self, delta: np.ndarray, p_norm) -> np.ndarray:
        """Distance in the full voltage space from train-voltage differences."""
        lin_part = delta @ self.elim.T
        if p_norm == np.inf:
            return np.maximum(
                np.abs(delta).max(axis=-1), np.abs(lin_part).max(axis=-1)
            )
        return (
            np.sum(np.abs(delta) ** p_norm, axis=-1)
            + np.sum(np.abs(lin_part) ** p_norm, axis=-1)
        ) ** (1.0 / p_norm)

    def batch_stats(self, powers_mw: np.ndarray, chunk: int = 256):
        """Per-frame solution count and raw minimum separation.

        powers_mw has one row per frame with the measured powers of the
        quadratic trains. Returns (counts, j_star) without the two-solution
        alpha scaling, which depends on detector state.
        """
        powers_w = np.asarray(powers_mw, dtype=float) * WATTS_PER_MW
        k_total = powers_w.shape[0]
        counts = np.zeros(k_total, dtype=np.int32)
        j_star = np.full(k_total, np.inf)
        for start in range(0, k_total, chunk):
            block = powers_w[start : start + chunk]
            k, t = block.shape
            seeds = self._seeds(block)
            s_count = seeds.shape[1]
            a = np.repeat(block, s_count, axis=0)
            roots, ok, _ = kernels.newton_power_states(
                self.m_mat,
                np.ones(t, dtype=bool),
                np.zeros(t),
                np.zeros(t),
                a,
                np.zeros(t),
                a,
                a,
                seeds=seeds.reshape(k * s_count, t),
                tol_v=1e-10,
                max_iter=120,
                y_shift=self.m_vec,
            )
            roots = roots.reshape(k, s_count, t)
            ok = ok.reshape(k, s_count)

            delta = roots[:, :, None, :] - roots[:, None, :, :]
            dist_inf = self._full_distance(delta, np.inf)
            # Greedy dedup in seed order: a root is a representative when no
            # earlier representative sits within the dedup radius.
            distinct = np.zeros((k, s_count), dtype=bool)
            for j in range(s_count):
                near_prev = (
                    (dist_inf[:, j, :j] <= self.config.dedup_radius_v) & distinct[:, :j]
                ).any(axis=1) if j else np.zeros(k, dtype=bool)
                distinct[:, j] = ok[:, j] & ~near_prev
            counts[start : start + k] = distinct.sum(axis=1)

            dist_p = self._full_distance(delta, self.config.p_norm)
            pair = distinct[:, :, None] & distinct[:, None, :]
            pair &= ~np.eye(s_count, dtype=bool)[None, :, :]
            dist_p = np.where(pair, dist_p, np.inf)
            j_star[start : start + k] = dist_p.min(axis=(1, 2))
        return counts, j_star

    def expand(self, train_voltages: np.ndarray) -> np.ndarray:
        """Full voltage vector(s) from condensed train voltages."""
        tv = np.atleast_2d(train_voltages)
        full = np.empty((tv.shape[0], len(self.offset) + self.t_count))
        lin_idx = [i for i in range(full.shape[1]) if i not in self.quad_nodes]
        full[:, self.quad_nodes] = tv
        full[:, lin_idx] = self.offset + tv @ self.elim.T
        return full if train_voltages.ndim == 2 else full[0]


def sad_evaluate(
    meas: MeasurementSet,
    topology_at_true_s: TpsTopology,
    params: ElectricalParams,
    v_previous: np.ndarray,
    config: DetectorConfig = DetectorConfig(),
) -> SadResult:
    """Secondary check: has the voltage vector jumped to another fake state?

    Requires verified train positions and an intact previous voltage vector.
    The measured train powers pin the discrete set of consistent states; a
    frame further from the previous vector than the minimum separation of
    that set marks an attack onset. With exactly two states the separation
    is shrunk by alpha before the comparison. Fewer than two states means
    the check cannot discriminate, so it abstains.
    """
    powers = {
        node: float(meas.v_meas[node] * meas.i_meas[node]) / WATTS_PER_MW
        for node in topology_at_true_s.train_nodes
    }
    sols = enumerate_stealthy_states(topology_at_true_s, params, powers, config)
    distance = float(np.linalg.norm(meas.v_meas - np.asarray(v_previous), ord=config.p_norm))
    if len(sols.solutions) < 2:
        return SadResult(
            j_star=float("nan"),
            distance=distance,
            alarm=False,
            degenerate=True,
            n_solutions=len(sols.solutions),
        )
    j_star = min_pairwise_distance(sols.solutions, config.p_norm)
    if len(sols.solutions) == 2:
        j_star *= config.alpha
    # An attacker sitting exactly at the nearest fake state lands on the
    # boundary, so equality (up to float noise) counts as an onset.
    alarm = distance >= j_star * (1.0 - 1e-9)
    return SadResult(
        j_star=j_star,
        distance=distance,
        alarm=alarm,
        degenerate=False,
        n_solutions=len(sols.solutions),
    )


def gad_decide(bdd_alarm: bool, sad_alarm: bool) -> bool:
    """Serialized decision: the secondary check only rules on BDD-clean frames."""
    return bool(bdd_alarm or (not bdd_alarm and sad_alarm))


def gadw_decide(alarm_history: Sequence[bool], window: int) -> bool:
    """AND-fusion of the last `window` serialized alarms."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(alarm_history) < window:
        raise ValueError("history shorter than the window")
    return all(bool(a) for a in alarm_history[-window:])


def mitigation_plan(
    topology: TpsTopology,
    params: ElectricalParams,
    thresholds: ControlThresholds,
    power_states,
) -> dict[int, float]:
    """Model-based train setpoints (MW) that bypass compromised sensors.

    Solves the honest steady state from profile-derived demands, capacities
    and positions; applying these setpoints restores the honest operating
    point regardless of what the sensors claim.
    """
    state = solve_steady_state(topology, params, thresholds, power_states)
    return {node: float(state.p[node]) for node in topology.train_nodes}


def evaluate_frame(
    meas: MeasurementSet,
    topology_at_true_s: TpsTopology,
    params: ElectricalParams,
    config: DetectorConfig,
    v_previous: Optional[np.ndarray],
    position_sources: Optional[Sequence[np.ndarray]] = None,
    piv_tolerance_km: float = 0.01,
) -> DetectorVerdict:
    """Run the full stack on one frame.

    The secondary check runs only when the position cross-check passes (it
    needs true positions) and a previous intact voltage vector exists.
    """
    try:
        residual, bdd_alarm = bdd_evaluate(meas, params, config)
    except CoincidentNodesError:
        # Reported positions collapse two nodes; treat as an integrity fault.
        return DetectorVerdict(
            bdd_alarm=True,
            residual=float("inf"),
            piv_alarm=True,
            sad_alarm=False,
            j_star=float("nan"),
            distance=float("nan"),
            gad_alarm=True,
        )
    sources = [meas.s_meas, np.asarray(topology_at_true_s.positions, dtype=float)]
    if position_sources:
        sources.extend(position_sources)
    piv_alarm = piv_verify(sources, piv_tolerance_km)

    sad = SadResult(float("nan"), float("nan"), False, True, 0)
    if not piv_alarm and v_previous is not None:
        sad = sad_evaluate(meas, topology_at_true_s, params, v_previous, config)
    return DetectorVerdict(
        bdd_alarm=bdd_alarm,
        residual=residual,
        piv_alarm=piv_alarm,
        sad_alarm=sad.alarm,
        j_star=sad.j_star,
        distance=sad.distance,
        gad_alarm=gad_decide(bdd_alarm, sad.alarm),
        sad_degenerate=sad.degenerate,
        n_solutions=sad.n_solutions,
    )
