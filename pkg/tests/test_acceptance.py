"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Behavioral thresholds below were frozen from pilot runs (see the ledger).
"""

import math
import statistics

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from novelty_es.config import ConfigError, RunConfig
from novelty_es.env import DECEPTIVE_MAZE
from novelty_es.novelty import Archive, BehaviorCharacteristic as BC, write_archive
from novelty_es.optim import noise_table_build
from novelty_es.plots import percentile_interval, quartiles, fitness_table, runtime_table
from novelty_es.policy import (
    Policy, devectorize, dt_forward, dt_hidden, dt_spec, dt_tokens, new_context, param_count,
    update_context,
)
from novelty_es.pretrain import PretrainConfig, pretrain
from novelty_es.training import Trainer
from oracles import brute_novelty, dt_oracle, percentile_linear
from test_optim import quadratic_run, raw_gradient_cosine

SEEDS = range(10)

# frozen thresholds
ES_ITERS, ES_MAX_HITS = 150, 2
NS_ITERS, NS_MIN_HITS = 3 * ES_ITERS, 7
NSR_ITERS, NSR_MIN_HITS = 2 * ES_ITERS, 7
DT_NSR_ITERS, DT_NSR_MIN_HITS = 4 * NSR_ITERS, 6
DT_NS_ITERS, DT_NS_WINDOW = 100, 5
DT_NS_CHECKPOINTS = (5, 25, 50, 100)
ARCHIVE_SOURCE_ITERS = 50


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def goal_hits(tmp_path, tag, iterations, **kw):
    hits = []
    for seed in SEEDS:
        cfg = RunConfig.from_dict(dict(iterations=iterations, seed=seed, stop_on_goal=True,
                                       checkpoint_every=10_000, **kw))
        tr = Trainer(cfg, tmp_path / f"{tag}{seed}")
        tr.run()
        hits.append(tr.goal_iteration)
    return hits


def test_criterion_1_worker_count_equivalence(tmp_path):
    thetas = {}
    for w in (1, 2, 4):
        cfg = RunConfig.from_dict(dict(iterations=10, workers=w, seed=3, checkpoint_every=10_000))
        tr = Trainer(cfg, tmp_path / f"w{w}")
        tr.run()
        thetas[w] = [m.state.theta.copy() for m in tr.metapop.members]
    ok = all(all(np.array_equal(a, b) for a, b in zip(thetas[1], thetas[w])) for w in (2, 4))
    report(1, ok, "theta after 10 iterations identical for 1, 2 and 4 workers")


def test_criterion_2_novelty_matches_brute_force():
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(0, 501))
        pts = rng.uniform(-1, 11, (n, 2))
        q = tuple(rng.uniform(-1, 11, 2))
        k = int(rng.integers(1, 26))
        got = Archive(k, [BC(float(x), float(y)) for x, y in pts]).novelty(BC(*q))
        want = brute_novelty(q, [tuple(p) for p in pts], k)
        bad += not (got == want or (math.isinf(got) and math.isinf(want)))
    report(2, bad == 0, f"{1000 - bad}/1000 instances exactly equal to the brute-force oracle")


def test_criterion_3_optimizer_sanity():
    table = noise_table_build(7, 2_000_000)
    ratios = [quadratic_run(seed, table) for seed in SEEDS]
    cos = raw_gradient_cosine(table)
    ok = all(r <= 0.10 for r in ratios) and cos >= 0.95
    report(3, ok, f"worst remaining distance {max(ratios):.4f} (<= 0.10), gradient cosine {cos:.4f}")


def test_criterion_4_deception_and_exploration(tmp_path):
    es = goal_hits(tmp_path, "es", ES_ITERS, algorithm="es")
    ns = goal_hits(tmp_path, "ns", NS_ITERS, algorithm="ns-es")
    nsr = goal_hits(tmp_path, "nsr", NSR_ITERS, algorithm="nsr-es")
    count = lambda hits: sum(h is not None for h in hits)  # noqa: E731
    ok = count(es) <= ES_MAX_HITS and count(ns) >= NS_MIN_HITS and count(nsr) >= NSR_MIN_HITS
    report(4, ok, f"goal reached ES {count(es)}/10 (<= {ES_MAX_HITS}), NS-ES {count(ns)}/10 "
                  f"(>= {NS_MIN_HITS}), NSR-ES {count(nsr)}/10 (>= {NSR_MIN_HITS}); "
                  f"iterations ns={ns} nsr={nsr}")


def farthest_smoothed_distance(logs, window=DT_NS_WINDOW):
    """Median over seeds of the farthest ``window``-iteration mean distance reached so far.

    Entry i covers training up to iteration i + window.
    """
    per_seed = []
    for recs in logs:
        d = np.array([r["eval_distance"] for r in recs])
        smooth = np.convolve(d, np.ones(window) / window, mode="valid")
        per_seed.append(np.maximum.accumulate(smooth))
    return np.median(np.vstack(per_seed), axis=0)


def test_criterion_5_dt_parity(tmp_path):
    nsr = goal_hits(tmp_path, "dtnsr", DT_NSR_ITERS, algorithm="nsr-es", policy="dt")
    hits = sum(h is not None for h in nsr)
    logs = []
    for seed in SEEDS:
        cfg = RunConfig.from_dict(dict(algorithm="ns-es", policy="dt", iterations=DT_NS_ITERS,
                                       seed=seed, checkpoint_every=10_000))
        logs.append(Trainer(cfg, tmp_path / f"dtns{seed}").run())
    med = farthest_smoothed_distance(logs)
    marks = [float(med[c - DT_NS_WINDOW]) for c in DT_NS_CHECKPOINTS]
    rising = all(b > a for a, b in zip(marks, marks[1:]))
    report(5, hits >= DT_NSR_MIN_HITS and rising,
           f"DT NSR-ES reached goal {hits}/10 (>= {DT_NSR_MIN_HITS}) at {nsr}; DT NS-ES median "
           f"farthest smoothed distance by iterations {list(DT_NS_CHECKPOINTS)}: "
           + ", ".join(f"{m:.3f}" for m in marks))


def test_criterion_6_causal_transformer():
    spec = dt_spec(4, 2, embed=16, heads=2, layers=2, context_len=6, max_ep_len=30)
    rng = np.random.default_rng(6)
    params = 0.5 * rng.standard_normal(param_count(spec))
    w = devectorize(spec, params)
    moves = [(rng.uniform(-1, 1, 2), rng.normal(0, 1e-3), rng.standard_normal(4)) for _ in range(5)]
    ctx = alt = new_context(spec, 0.01, rng.standard_normal(4))
    for i, (a, r, o) in enumerate(moves):
        ctx = update_context(ctx, a, r, o)
        alt = update_context(alt, a, r, o) if i < 2 else update_context(alt, -a, r + 1, o + 2)
    ho = dt_hidden(spec, w, dt_tokens(spec, w, ctx, ctx.current_obs)[0])
    ha = dt_hidden(spec, w, dt_tokens(spec, w, alt, alt.current_obs)[0])
    future_ok = np.array_equal(ho[:3 * 2 + 2], ha[:3 * 2 + 2])

    silent = {k: (np.zeros_like(v) if k.startswith("emb_") else v) for k, v in w.items()}
    toks, _ = dt_tokens(spec, silent, ctx, ctx.current_obs)
    t0 = ctx.timestep - (len(ctx) - 1)
    pos_ok = all(np.array_equal(toks[3 * i + c], w["pos"][t0 + i]) for i in range(len(ctx)) for c in range(3))

    pol = Policy(dt_spec(4, 2), 0.5 * rng.standard_normal(param_count(dt_spec(4, 2))))
    from novelty_es.env import run_episode
    res = run_episode(pol, DECEPTIVE_MAZE, seed=1, rtg_target=3.0, log_trajectory=True)
    rewards = [r / DECEPTIVE_MAZE.reward_scale for *_, r in res.trajectory]
    tele = abs((3.0 - math.fsum(rewards[:-1])) - pol.context.current_rtg)

    want = dt_oracle(w, spec.dt_layers, spec.dt_heads, ctx.triplets, ctx.current_rtg,
                     ctx.current_obs, ctx.timestep)
    err = float(np.max(np.abs(dt_forward(spec, params, ctx) - want)))
    ok = future_ok and pos_ok and tele <= 1e-9 and err <= 1e-10
    report(6, ok, f"future-independent={future_ok} positional-shared={pos_ok} "
                  f"rtg-telescoping-err={tele:.2e} oracle-err={err:.2e}")


def test_criterion_7_pretraining_seed(tmp_path):
    forced = RunConfig.from_dict({"policy": "dt", "pretrained": "seed.ckpt"}).resolved()
    rules = forced.sigma == forced.lr == 0.01 and not forced.normalize_obs
    refused = 0
    for bad in ({"sigma": 0.05}, {"lr": 0.05}, {"normalize_obs": True}):
        try:
            RunConfig.from_dict({"policy": "dt", "pretrained": "seed.ckpt", **bad})
        except ConfigError:
            refused += 1
    spec = dt_spec(4, 2)
    theta = 0.3 * np.random.default_rng(7).standard_normal(param_count(spec))
    res = pretrain(Policy(spec, theta), spec,
                   PretrainConfig(iterations=0, episodes=5, noise_table_size=200_000), init_theta=theta)
    mse = -res.fitness[0]
    ok = rules and refused == 3 and mse <= 1e-12
    report(7, ok, f"forced sigma=lr=0.01, no normalization: {rules}; overrides refused {refused}/3; "
                  f"self-cloning MSE {mse:.2e}")


def test_criterion_8_archive_transfer(tmp_path):
    src = Trainer(RunConfig.from_dict(dict(algorithm="ns-es", iterations=ARCHIVE_SOURCE_ITERS, seed=0,
                                           checkpoint_every=10_000)), tmp_path / "mlp")
    src.run()
    write_archive(src.archive, tmp_path / "archive.txt")
    novelty = {}
    for tag, extra in (("control", {}), ("import", {"archive_import": str(tmp_path / "archive.txt")})):
        cfg = RunConfig.from_dict(dict(algorithm="ns-es", policy="dt", iterations=1, seed=0,
                                       checkpoint_every=10_000, **extra))
        novelty[tag] = Trainer(cfg, tmp_path / tag).run()[0]["novelty"]
    ok = novelty["import"] < novelty["control"]
    report(8, ok, f"iteration-1 novelty with imported archive ({len(src.archive)} entries) "
                  f"{novelty['import']:.4f} < control {novelty['control']:.4f}")


def test_criterion_9_figure_pipeline():
    rng = np.random.default_rng(9)
    logs = [[{"iteration": it, "eval_fitness": float(v), "steps_mean": float(s)}
             for it, (v, s) in enumerate(zip(rng.uniform(-5, 0, 20), rng.uniform(50, 200, 20)), 1)]
            for _ in range(10)]
    worst = 0.0
    for row in fitness_table(logs):
        vals = [r[row["iteration"] - 1]["eval_fitness"] for r in logs]
        for key, q in (("q1", 25), ("median", 50), ("q3", 75)):
            worst = max(worst, abs(row[key] - percentile_linear(vals, q)))
    for row in runtime_table(logs):
        vals = [r[row["iteration"] - 1]["steps_mean"] for r in logs]
        worst = max(worst, abs(row["p_lo"] - percentile_linear(vals, 1.25)),
                    abs(row["p_hi"] - percentile_linear(vals, 98.75)))
    uniform = rng.uniform(0, 1, 10_000)
    lo, hi = percentile_interval(uniform)
    worst = max(worst, abs(lo - percentile_linear(uniform, 1.25)), abs(hi - percentile_linear(uniform, 98.75)))
    report(9, worst <= 1e-9, f"max deviation from order-statistics oracle {worst:.2e}")
