"""Operator-facing command line.

Subcommands: simulate (timeline run), attack (single-instant attack table),
detect (verdict stream for a measurement log), roc (threshold sweeps),
report (human-readable summary of an emitted run). Scenario files are JSON
documents mirroring the Scenario type one to one; everything is seeded and
emission is bit-stable, so reruns regress cleanly.

Exit codes: 0 success, 2 validation failure, 3 solver failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attacks import (
    AttackBounds,
    AttackKind,
    efficiency_attack,
    safety_attack,
    stealthy_attack,
    suboptimal_additive_attack,
)
from .detection import DetectorConfig, MeasurementSet, estimate_state, evaluate_frame
from .harness import (
    AttackSpec,
    RunningProfile,
    Scenario,
    ScenarioError,
    StaticInstant,
    assemble_instant,
    monte_carlo_rates,
    roc_sweep,
    run_timeline,
)
from .model import ControlThresholds, ElectricalParams
from .powerflow import PowerflowError, solve_steady_state
from .reporting import emit_report, _write_csv, _fmt
from .harness import RunFailedError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_IO = 4

_OUTPUT_ENV = "TPSEC_OUT"


class ManifestError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class RunManifest:
    """Validated invocation: scenario, subcommand, output sink, overrides."""

    scenario_path: Path
    subcommand: str
    out_dir: Path
    seed: Optional[int]
    overrides: dict


def _field(data: dict, name: str, ctor, default):
    try:
        if name not in data or data[name] is None:
            return default
        return ctor(data[name])
    except ScenarioError:
        raise
    except Exception as exc:
        raise ManifestError(name, str(exc)) from exc


def scenario_from_dict(data: dict) -> Scenario:
    """Build and validate a Scenario; errors name the offending field."""
    if not isinstance(data, dict):
        raise ManifestError("scenario", "document must be a JSON object")

    params = _field(data, "params", lambda d: ElectricalParams(**d), ElectricalParams())
    thresholds = _field(
        data, "thresholds", lambda d: ControlThresholds(**d), ControlThresholds()
    )
    detector = _field(data, "detector", lambda d: DetectorConfig(**d), DetectorConfig())

    def profile(entry):
        entry = dict(entry)
        entry["stops"] = tuple(entry["stops"])
        entry["speed_phases"] = tuple(tuple(p) for p in entry["speed_phases"])
        if "resistance_coeffs" in entry:
            entry["resistance_coeffs"] = tuple(entry["resistance_coeffs"])
        return RunningProfile(**entry)

    trains = _field(data, "trains", lambda lst: tuple(profile(e) for e in lst), ())

    def static(entry):
        return StaticInstant(
            roles=tuple(entry["roles"]),
            positions=tuple(entry["positions"]),
            demand=tuple(entry.get("demand", [0.0] * len(entry["roles"]))),
            regen_capacity=tuple(
                entry.get("regen_capacity", [0.0] * len(entry["roles"]))
            ),
        )

    static_instant = _field(data, "static_instant", static, None)

    def attack(entry):
        entry = dict(entry)
        if "t_end" in entry and entry["t_end"] is None:
            entry["t_end"] = math.inf
        return AttackSpec(**entry)

    attack_spec = _field(data, "attack", attack, None)

    try:
        return Scenario(
            name=_field(data, "name", str, "scenario"),
            params=params,
            thresholds=thresholds,
            line_length_km=_field(data, "line_length_km", float, 10.0),
            substations_km=_field(data, "substations_km", tuple, ()),
            stations_km=_field(data, "stations_km", tuple, ()),
            trains=trains,
            static_instant=static_instant,
            horizon_s=_field(data, "horizon_s", float, 800.0),
            timestep_s=_field(data, "timestep_s", float, 1.0),
            noise_frac=_field(data, "noise_frac", float, 0.0),
            full_scale=_field(data, "full_scale", tuple, (900.0, 2500.0)),
            seed=_field(data, "seed", int, 2024),
            attack=attack_spec,
            detector=detector,
            piv_tolerance_km=_field(data, "piv_tolerance_km", float, 0.01),
            mitigate=_field(data, "mitigate", bool, False),
        )
    except (ScenarioError, ValueError) as exc:
        raise ManifestError("scenario", str(exc)) from exc


def load_scenario(path: Path) -> Scenario:
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(str(path), f"cannot read scenario: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(str(path), f"invalid JSON: {exc}") from exc
    return scenario_from_dict(data)


def _apply_overrides(scenario: Scenario, args) -> Scenario:
    det = scenario.detector
    det_changes = {}
    for name in ("tau", "alpha", "window"):
        value = getattr(args, name, None)
        if value is not None:
            det_changes[name] = value
    if det_changes:
        try:
            det = replace(det, **det_changes)
        except ValueError as exc:
            raise ManifestError("detector", str(exc)) from exc
    changes = {"detector": det}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "noise", None) is not None:
        if args.noise < 0:
            raise ManifestError("noise", "must be nonnegative")
        changes["noise_frac"] = args.noise
    attack = scenario.attack
    bound_changes = {}
    for name in ("dv", "di", "ds"):
        value = getattr(args, name, None)
        if value is not None:
            if value < 0:
                raise ManifestError(name, "must be nonnegative")
            bound_changes[name] = value
    if getattr(args, "attack", None):
        attack = AttackSpec(kind=args.attack, writable=getattr(args, "writable", None) or "trains")
    if attack is not None and bound_changes:
        try:
            attack = replace(attack, **bound_changes)
        except ScenarioError as exc:
            raise ManifestError("attack", str(exc)) from exc
    changes["attack"] = attack
    try:
        return replace(scenario, **changes)
    except (ScenarioError, ValueError) as exc:
        raise ManifestError("scenario", str(exc)) from exc


def _out_dir(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(_OUTPUT_ENV, "out"))


def _parse_writable(raw: str):
    if raw in ("trains", "all"):
        return raw
    try:
        return tuple(int(tok) for tok in raw.split(",") if tok.strip() != "")
    except ValueError as exc:
        raise ManifestError("writable", f"expected 'trains', 'all' or indices: {raw}") from exc


def _parse_grid(raw: str) -> list[float]:
    if ":" in raw:
        parts = raw.split(":")
        if len(parts) != 3:
            raise ManifestError("grid", f"expected lo:hi:step, got {raw}")
        lo, hi, step = (float(p) for p in parts)
        if step <= 0 or hi < lo:
            raise ManifestError("grid", f"bad range {raw}")
        return list(np.arange(lo, hi + step * 1e-9, step))
    return [float(tok) for tok in raw.split(",") if tok.strip() != ""]


# ---------------------------------------------------------------------------
# Subcommand implementations.
# ---------------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    scenario = _apply_overrides(load_scenario(Path(args.scenario)), args)
    out = _out_dir(args)
    metrics = run_timeline(scenario)
    if args.rates_trials:
        fp, md = monte_carlo_rates(scenario, args.rates_trials)
        metrics.fp_series = fp
        metrics.md_series = md
    paths = emit_report(metrics, out, fmt=args.format)
    agg = metrics.aggregates
    print(f"scenario {scenario.name}: {agg['instants']} instants, "
          f"{agg['skipped']} skipped")
    print(f"  efficiency loss: {agg['efficiency_loss_pct']:.2f} % "
          f"over {agg['attacked_instants']} attacked instants")
    print(f"  safety breach seconds: {agg['breach_seconds']:.0f}")
    print(f"  alarms: {agg['alarm_counts']}")
    for p in paths:
        print(f"  wrote {p}")
    return EXIT_OK


def _attack_table(scenario: Scenario, vec, ctx) -> str:
    lines = []
    header = (
        f"{'node':>6} {'role':>11} {'s_km':>8} {'s_fake':>8} {'V':>8} {'V_fake':>8} "
        f"{'I':>9} {'I_fake':>9} {'P_MW':>8}"
    )
    lines.append(header)
    state = vec.attacked_state
    s_prime = vec.s_prime if vec.s_prime is not None else np.asarray(ctx.topology.positions)
    for k, label in enumerate(ctx.labels):
        lines.append(
            f"{label:>6} {ctx.topology.roles[k].value:>11} "
            f"{ctx.topology.positions[k]:8.3f} {s_prime[k]:8.3f} "
            f"{state.v[k]:8.1f} {vec.v_prime[k]:8.1f} "
            f"{state.i[k]:9.1f} {vec.i_prime[k]:9.1f} {state.p[k]:8.3f}"
        )
    return "\n".join(lines)


def _cmd_attack(args) -> int:
    scenario = _apply_overrides(load_scenario(Path(args.scenario)), args)
    ctx = assemble_instant(scenario, args.t)
    honest = solve_steady_state(
        ctx.topology, scenario.params, scenario.thresholds, ctx.power_states
    )
    writable = _parse_writable(args.writable)
    if writable == "trains":
        writable_nodes = set(ctx.train_nodes)
    elif writable == "all":
        writable_nodes = set(range(ctx.topology.node_count))
    else:
        writable_nodes = set(writable)
    stealthy = args.kind.startswith("stealthy")
    bounds = AttackBounds.for_writable(
        ctx.topology, writable_nodes,
        args.dv if args.dv is not None else 50.0,
        args.di if args.di is not None else 200.0,
        args.ds if args.ds is not None else 0.6,
        positions_writable=stealthy,
    )
    common = (honest, ctx.topology, scenario.params, scenario.thresholds,
              ctx.power_states, writable_nodes, bounds)
    if args.kind == "efficiency":
        vec = efficiency_attack(*common)
    elif args.kind == "safety":
        vec = safety_attack(*common, unsafe_set=set(range(ctx.topology.node_count)))
    elif args.kind == "suboptimal-additive":
        vec = suboptimal_additive_attack(*common, additive_dv=args.additive_dv)
    else:
        goal = "efficiency" if args.kind == "stealthy-efficiency" else "safety"
        unsafe = frozenset(range(ctx.topology.node_count)) if goal == "safety" else frozenset()
        vec = stealthy_attack(AttackKind(goal, stealthy=True, unsafe_set=unsafe), *common)

    honest_obj = float(np.sum(honest.p[list(ctx.topology.substation_nodes)]))
    attacked_obj = float(np.sum(vec.attacked_state.p[list(ctx.topology.substation_nodes)]))
    print(f"attack kind: {args.kind} (writable {sorted(writable_nodes)})")
    print(_attack_table(scenario, vec, ctx))
    print(f"substation total: honest {honest_obj:.3f} MW, attacked {attacked_obj:.3f} MW")
    if honest_obj < 0 and "safety" not in args.kind:
        loss = 100.0 * (attacked_obj - honest_obj) / (-honest_obj)
        print(f"efficiency loss: {loss:.2f} %")
    if vec.success is not None:
        print(f"safety breach: {'yes' if vec.success else 'no'}")
    if vec.is_noop:
        print("result: no-op (attacker gains nothing)")

    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": args.kind,
        "writable": sorted(writable_nodes),
        "feasible": vec.feasible,
        "noop": vec.is_noop,
        "success": vec.success,
        "objective_mw": vec.objective_value,
        "v_prime": [float(_fmt_float(x)) for x in vec.v_prime],
        "i_prime": [float(_fmt_float(x)) for x in vec.i_prime],
        "s_prime": None if vec.s_prime is None else [float(_fmt_float(x)) for x in vec.s_prime],
        "induced_power_mw": [float(_fmt_float(x)) for x in vec.induced_power],
        "true_state": {
            "v": [float(_fmt_float(x)) for x in vec.attacked_state.v],
            "i": [float(_fmt_float(x)) for x in vec.attacked_state.i],
            "p": [float(_fmt_float(x)) for x in vec.attacked_state.p],
        },
    }
    path = out / "attack.json"
    path.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


def _fmt_float(x) -> str:
    return format(float(x), ".6g")


def _cmd_detect(args) -> int:
    scenario = _apply_overrides(load_scenario(Path(args.scenario)), args)
    ctx = assemble_instant(scenario, 0.0)
    n = ctx.topology.node_count
    std_v, std_i = scenario.noise_std
    sigma = np.concatenate([np.full(n, std_v**2), np.full(n, std_i**2)])
    try:
        rows = list(csv.DictReader(Path(args.measurements).open()))
    except OSError as exc:
        print(f"error: cannot read measurement log: {exc}", file=sys.stderr)
        return EXIT_IO
    verdict_rows = []
    v_pr = None
    history: list[bool] = []
    for row in rows:
        try:
            t = float(row["t"])
            v = np.array([float(row[f"v{k}"]) for k in range(n)])
            i = np.array([float(row[f"i{k}"]) for k in range(n)])
            s = np.array([float(row[f"s{k}"]) for k in range(n)])
        except (KeyError, ValueError) as exc:
            print(f"error: measurement log field {exc} (need t, v0..v{n-1}, "
                  f"i0..i{n-1}, s0..s{n-1})", file=sys.stderr)
            return EXIT_VALIDATION
        meas = MeasurementSet(v, i, s, sigma)
        verdict = evaluate_frame(
            meas, ctx.topology, scenario.params, scenario.detector,
            v_previous=v_pr, piv_tolerance_km=scenario.piv_tolerance_km,
        )
        if not verdict.bdd_alarm:
            v_pr = estimate_state(meas, scenario.params)
        history.append(verdict.gad_alarm)
        w = scenario.detector.window
        gadw = len(history) >= w and all(history[-w:])
        verdict_rows.append([
            t, verdict.bdd_alarm, verdict.residual, verdict.piv_alarm,
            verdict.sad_alarm, verdict.j_star, verdict.distance,
            verdict.gad_alarm, gadw,
        ])
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "verdicts.csv"
    _write_csv(path, ["t", "bdd", "residual", "piv", "sad", "j_star",
                      "distance", "gad", "gadw"], verdict_rows)
    alarms = sum(1 for r in verdict_rows if r[7])
    print(f"{len(verdict_rows)} frames, {alarms} serialized alarms; wrote {path}")
    return EXIT_OK


def _cmd_roc(args) -> int:
    scenario = _apply_overrides(load_scenario(Path(args.scenario)), args)
    taus = _parse_grid(args.tau_grid)
    alphas = _parse_grid(args.alpha_grid)
    attack = {"random": "random-additive", "stealthy": "stealthy-solutions"}[args.attack]
    points = roc_sweep(scenario, taus, alphas, attack=attack, trials=args.trials)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "roc.csv"
    _write_csv(
        path,
        ["tau", "alpha", "fp_rate", "md_rate"],
        [[p.tau, p.alpha, p.fp_rate, p.md_rate] for p in points],
    )
    print(f"{'tau':>8} {'alpha':>6} {'fp':>8} {'md':>8}")
    for p in points:
        print(f"{p.tau:8.2f} {p.alpha:6.2f} {p.fp_rate:8.4f} {p.md_rate:8.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_report(args) -> int:
    path = Path(args.metrics)
    if path.is_dir():
        path = path / "summary.json"
    try:
        summary = json.loads(path.read_text())
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: invalid summary: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    agg = summary.get("aggregates", {})
    print(f"scenario: {summary.get('scenario')}  (seed {summary.get('seed')})")
    print(f"instants: {agg.get('instants')}  skipped: {agg.get('skipped')}")
    print(f"substation energy (honest):   {agg.get('substation_energy_honest_mwh'):.4f} MWh")
    print(f"substation energy (attacked): {agg.get('substation_energy_attacked_mwh'):.4f} MWh")
    print(f"efficiency loss: {agg.get('efficiency_loss_pct'):.2f} % "
          f"over {agg.get('attacked_instants')} attacked instants")
    print(f"breach seconds: {agg.get('breach_seconds')}")
    onset = agg.get("sad_onset_rate")
    if onset is not None:
        print(f"secondary-detector onset rate: {onset:.3f}")
    print(f"alarms: {agg.get('alarm_counts')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tpsec",
        description="Traction power section security toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, scenario_required=True):
        p.add_argument("--scenario", required=scenario_required, help="scenario JSON path")
        p.add_argument("--out", default=None, help=f"output directory (default ${_OUTPUT_ENV} or ./out)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--window", type=int, default=None)
        p.add_argument("--dv", type=float, default=None)
        p.add_argument("--di", type=float, default=None)
        p.add_argument("--ds", type=float, default=None)
        p.add_argument("--noise", type=float, default=None)

    p_sim = sub.add_parser("simulate", help="run a scenario timeline")
    add_common(p_sim)
    p_sim.add_argument("--attack", default=None, help="override attack kind")
    p_sim.add_argument("--writable", default=None)
    p_sim.add_argument("--rates-trials", type=int, default=0,
                       help="also estimate FP/MD series with this many trials")
    p_sim.add_argument("--format", choices=("csv", "json"), default="csv")
    p_sim.set_defaults(func=_cmd_simulate)

    p_att = sub.add_parser("attack", help="single-instant attack vector table")
    add_common(p_att)
    p_att.add_argument("--kind", required=True, choices=(
        "efficiency", "safety", "stealthy-efficiency", "stealthy-safety",
        "suboptimal-additive"))
    p_att.add_argument("--writable", default="trains")
    p_att.add_argument("--additive-dv", type=float, default=20.0)
    p_att.add_argument("--t", type=float, default=0.0)
    p_att.set_defaults(func=_cmd_attack)

    p_det = sub.add_parser("detect", help="verdict stream for a measurement log")
    add_common(p_det)
    p_det.add_argument("--measurements", required=True)
    p_det.set_defaults(func=_cmd_detect)

    p_roc = sub.add_parser("roc", help="FP/MD sweep over detector thresholds")
    add_common(p_roc)
    p_roc.add_argument("--attack", choices=("random", "stealthy"), default="random")
    p_roc.add_argument("--tau-grid", default="4:64:4")
    p_roc.add_argument("--alpha-grid", default="0.9")
    p_roc.add_argument("--trials", type=int, default=1000)
    p_roc.set_defaults(func=_cmd_roc)

    p_rep = sub.add_parser("report", help="summarise an emitted run")
    p_rep.add_argument("--metrics", required=True, help="summary.json or its directory")
    p_rep.set_defaults(func=_cmd_report)
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ManifestError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RunFailedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except PowerflowError as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
