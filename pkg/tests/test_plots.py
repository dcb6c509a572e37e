import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from novelty_es.plots import fitness_table, percentile_interval, plot_export, quartiles, runtime_table
from oracles import percentile_linear


def _log(values, steps=None):
    steps = steps or values
    return [{"iteration": i + 1, "eval_fitness": v, "steps_mean": s}
            for i, (v, s) in enumerate(zip(values, steps))]


def test_single_run_median_is_its_value():
    rows = fitness_table([_log([-3.0, -2.5, -1.0])])
    assert [r["median"] for r in rows] == [-3.0, -2.5, -1.0]
    assert all(r["q1"] == r["median"] == r["q3"] for r in rows)


def test_constant_runs_give_constant_quartiles():
    rows = fitness_table([_log([7.25] * 4) for _ in range(10)])
    assert all(r["runs"] == 10 and r["q1"] == r["median"] == r["q3"] == 7.25 for r in rows)
    rt = runtime_table([_log([1.0] * 3, [120.0] * 3) for _ in range(10)])
    assert all(r["mean"] == r["p_lo"] == r["p_hi"] == 120.0 for r in rt)


def test_interval_matches_order_statistics_on_uniform_data():
    vals = np.random.default_rng(0).uniform(0, 1, 1000)
    lo, hi = percentile_interval(vals)
    assert abs(lo - percentile_linear(vals, 1.25)) <= 1e-9
    assert abs(hi - percentile_linear(vals, 98.75)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_quartiles_match_oracle(vals):
    q1, med, q3 = quartiles(vals)
    for got, q in ((q1, 25), (med, 50), (q3, 75)):
        assert got == pytest.approx(percentile_linear(vals, q), abs=1e-6, rel=1e-12)
    assert q1 <= med <= q3


def test_export_writes_three_tables(tmp_path):
    dirs = []
    for s in range(3):
        d = tmp_path / f"run{s}"
        d.mkdir()
        (d / "log.jsonl").write_text("\n".join(json.dumps(r) for r in _log([float(s), s + 1.0])) + "\n")
        (d / "final_eval.json").write_text(json.dumps({"best": {"mean_distance": 2.0 * s},
                                                       "goal_iteration": None}))
        dirs.append(d)
    paths = plot_export(dirs, tmp_path / "out")
    with open(paths["fitness"]) as fh:
        fit = list(csv.DictReader(fh))
    assert [float(r["median"]) for r in fit] == [1.0, 2.0]
    with open(paths["distance"]) as fh:
        dist = list(csv.DictReader(fh))
    assert [float(r["distance"]) for r in dist] == [0.0, 2.0, 4.0]
    assert paths["runtime"].exists()
