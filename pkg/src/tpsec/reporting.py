"""Result emission: plot-ready CSV time series and a JSON summary.

Column order is fixed and floats are written with six significant digits so
identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .harness import MetricsReport

STATE_COLUMNS = ["t", "node", "role", "s_km", "V", "I", "P", "V_att", "I_att", "P_att"]
VERDICT_COLUMNS = [
    "t",
    "attack_active",
    "tampered",
    "bdd",
    "residual",
    "piv",
    "sad",
    "j_star",
    "distance",
    "gad",
    "gadw",
    "sad_onset",
    "skipped",
]
RATE_COLUMNS = ["t", "fp_rate", "md_rate"]


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return "nan"
        return format(float(value), ".6g")
    return str(value)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_report(metrics: MetricsReport, out_dir, fmt: str = "csv") -> list[Path]:
    """Write one CSV per time series plus a JSON summary; returns the paths."""
    if fmt not in ("csv", "json"):
        raise ValueError("format must be csv or json")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    summary = {
        "scenario": metrics.scenario_name,
        "seed": metrics.seed,
        "aggregates": _jsonable(metrics.aggregates),
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    written.append(summary_path)
    if fmt == "json":
        return written

    state_rows = []
    verdict_rows = []
    for rec in metrics.records:
        verdict_rows.append(
            [
                rec.t,
                rec.attack_active,
                rec.tampered,
                rec.bdd_alarm,
                rec.residual,
                rec.piv_alarm,
                rec.sad_alarm,
                rec.j_star,
                rec.distance,
                rec.gad_alarm,
                rec.gadw_alarm,
                rec.sad_onset,
                rec.skipped,
            ]
        )
        if rec.skipped:
            continue
        for k, label in enumerate(rec.labels):
            state_rows.append(
                [
                    rec.t,
                    label,
                    "substation" if label.startswith("sub") else "train",
                    rec.positions[k],
                    rec.v_honest[k],
                    rec.i_honest[k],
                    rec.p_honest[k],
                    rec.v_attacked[k],
                    rec.i_attacked[k],
                    rec.p_attacked[k],
                ]
            )
    state_path = out / "state.csv"
    _write_csv(state_path, STATE_COLUMNS, state_rows)
    written.append(state_path)
    verdict_path = out / "verdicts.csv"
    _write_csv(verdict_path, VERDICT_COLUMNS, verdict_rows)
    written.append(verdict_path)

    if metrics.fp_series is not None:
        rate_rows = [
            [k, fp, md]
            for k, (fp, md) in enumerate(zip(metrics.fp_series, metrics.md_series))
        ]
        rates_path = out / "rates.csv"
        _write_csv(rates_path, RATE_COLUMNS, rate_rows)
        written.append(rates_path)
    return written


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if math.isnan(f) else float(format(f, ".10g"))
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj
