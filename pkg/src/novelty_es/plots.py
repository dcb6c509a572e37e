"""CSV tables behind the three figure families: fitness spread, runtime, distance."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .config import RunConfig
from .training import CONFIG_FILE, FINAL_FILE, read_log

INTERVAL = (1.25, 98.75)  # central 97.5 % interval


def quartiles(values: Sequence[float]):
    """(q1, median, q3) with linear interpolation between order statistics."""
    q1, med, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25.0, 50.0, 75.0])
    return float(q1), float(med), float(q3)


def percentile_interval(values: Sequence[float], bounds=INTERVAL):
    lo, hi = np.percentile(np.asarray(values, dtype=np.float64), list(bounds))
    return float(lo), float(hi)


def _by_iteration(logs: List[List[dict]], key: str) -> Dict[int, List[float]]:
    out: Dict[int, List[float]] = {}
    for records in logs:
        for r in records:
            out.setdefault(int(r["iteration"]), []).append(float(r[key]))
    return dict(sorted(out.items()))


def fitness_table(logs: List[List[dict]], key: str = "eval_fitness") -> List[dict]:
    rows = []
    for it, vals in _by_iteration(logs, key).items():
        q1, med, q3 = quartiles(vals)
        rows.append({"iteration": it, "runs": len(vals), "median": med, "q1": q1, "q3": q3})
    return rows


def runtime_table(logs: List[List[dict]], key: str = "steps_mean") -> List[dict]:
    rows = []
    for it, vals in _by_iteration(logs, key).items():
        lo, hi = percentile_interval(vals)
        rows.append({"iteration": it, "runs": len(vals), "mean": float(np.mean(vals)),
                     "p_lo": lo, "p_hi": hi})
    return rows


def distance_table(run_dirs: Sequence[Path]) -> List[dict]:
    rows = []
    for d in run_dirs:
        d = Path(d)
        row = {"run": d.name, "algorithm": "", "policy": "", "seed": "",
               "distance": float("nan"), "goal_iteration": ""}
        if (d / CONFIG_FILE).exists():
            cfg = RunConfig.from_file(d / CONFIG_FILE)
            row.update(algorithm=cfg.algorithm, policy=cfg.policy, seed=cfg.seed)
        if (d / FINAL_FILE).exists():
            final = json.loads((d / FINAL_FILE).read_text(encoding="utf-8"))
            row["distance"] = final["best"]["mean_distance"]
            gi = final.get("goal_iteration")
            row["goal_iteration"] = "" if gi is None else gi
        else:
            records = read_log(d)
            if records:
                row["distance"] = records[-1]["eval_distance"]
        rows.append(row)
    return rows


def _write(path: Path, rows: List[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def plot_export(run_dirs: Sequence, out_dir) -> Dict[str, Path]:
    if not run_dirs:
        raise ValueError("plot_export needs at least one run directory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logs = [read_log(d) for d in run_dirs]
    paths = {"fitness": out / "fitness.csv", "runtime": out / "runtime.csv",
             "distance": out / "distance.csv"}
    _write(paths["fitness"], fitness_table(logs), ["iteration", "runs", "median", "q1", "q3"])
    _write(paths["runtime"], runtime_table(logs), ["iteration", "runs", "mean", "p_lo", "p_hi"])
    _write(paths["distance"], distance_table([Path(d) for d in run_dirs]),
           ["run", "algorithm", "policy", "seed", "distance", "goal_iteration"])
    return paths
