"""Coordinator for ES, NS-ES and NSR-ES runs.

All per-iteration randomness is drawn from generators keyed by
``(seed, iteration, ...)``, so a run is a pure function of its config and a
checkpoint only has to carry the optimizer state, member BCs and archive.
"""

from __future__ import annotations

import functools
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint, parse_floats, _floats
from .config import ConfigError, RunConfig
from .dist import Aggregate, RunMeta, SequentialExecutor, WorkerPool, aggregate
from .env import EnvSpec, get_env, reset, step
from .novelty import Archive, BehaviorCharacteristic, Member, Metapopulation, read_archive, write_archive
from .optim import (
    TAG_EVAL, TAG_INIT, TAG_NOISE_INDEX, TAG_NORMALIZER, TAG_SELECT, EsState, NoiseTable,
    adam_step, keyed_rng, keyed_seed, normalizer_fit,
)
from .policy import PolicySpec, init_params, param_count
from .protocol import theta_version
from .rollout import rollout_batch

log = logging.getLogger(__name__)

LOG_FILE = "log.jsonl"
CHECKPOINT_FILE = "checkpoint.ckpt"
ARCHIVE_FILE = "archive.txt"
CONFIG_FILE = "config.txt"
FINAL_FILE = "final_eval.json"
STEPS_PERCENTILES = (1.25, 98.75)
GOAL_SUCCESS_RATE = 0.5


class ResumeError(RuntimeError):
    pass


@functools.lru_cache(maxsize=4)
def noise_table(seed: int, length: int) -> NoiseTable:
    return NoiseTable(seed, length)


def eval_seeds(seed: int, iteration: int, member: int, n: int) -> List[int]:
    return [keyed_seed(TAG_EVAL, seed, iteration, member, e) for e in range(n)]


def collect_reference_batch(env: EnvSpec, size: int, seed: int) -> np.ndarray:
    """Observations visited by a uniformly random policy."""
    obs_rows = []
    episode = 0
    while len(obs_rows) < size:
        rng = keyed_rng(TAG_NORMALIZER, seed, episode)
        state, obs = reset(env, keyed_seed(TAG_NORMALIZER, seed, episode, 0))
        obs_rows.append(obs)
        done = False
        while not done and len(obs_rows) < size:
            state, obs, _, done = step(env, state, rng.uniform(-1.0, 1.0, size=env.act_dim))
            obs_rows.append(obs)
        episode += 1
    return np.array(obs_rows[:size])


@dataclass
class MemberEval:
    mean_return: float
    mean_distance: float
    mean_steps: float
    bc: BehaviorCharacteristic
    success_rate: float

    @property
    def reached(self) -> bool:
        """The goal counts as reached when at least half the episodes get there."""
        return self.success_rate >= GOAL_SUCCESS_RATE

    def to_dict(self) -> dict:
        return {"mean_return": self.mean_return, "mean_distance": self.mean_distance,
                "mean_steps": self.mean_steps, "bc": [self.bc.x, self.bc.y],
                "success_rate": self.success_rate, "reached": self.reached}


def evaluate_genome(spec: PolicySpec, theta: np.ndarray, env: EnvSpec, seeds: Sequence[int],
                    rtg_target: float, obs_mean=None, obs_std=None) -> MemberEval:
    n = len(seeds)
    res = rollout_batch(spec, np.tile(theta, (n, 1)), env, list(seeds), rtg_target, obs_mean, obs_std)
    return MemberEval(
        mean_return=math.fsum(res.ret) / n,
        mean_distance=math.fsum(res.distance) / n,
        mean_steps=math.fsum(float(s) for s in res.steps) / n,
        bc=BehaviorCharacteristic(math.fsum(res.final[:, 0]) / n, math.fsum(res.final[:, 1]) / n),
        success_rate=float(np.count_nonzero(res.reached)) / n,
    )


def _json_float(x: float) -> Optional[float]:
    return None if x is None or not math.isfinite(x) else float(x)


class Trainer:
    """Owns the metapopulation, archive, optimizer states and run directory."""

    def __init__(self, config: RunConfig, run_dir, executor=None, listen=None):
        self.config = config
        self.cfg = config.resolved()
        self.run_dir = Path(run_dir)
        self.env = get_env(self.cfg.env)
        self.spec = self.cfg.policy_spec()
        self.genome_len = param_count(self.spec)
        if self.cfg.noise_table_size < self.genome_len + 1:
            raise ConfigError("noise_table_size must exceed the genome length")
        self.table = noise_table(self.cfg.noise_seed, self.cfg.noise_table_size)
        self.pretrained = False
        self.obs_mean = self.obs_std = None
        self.iteration = 0
        self.goal_iteration: Optional[int] = None
        self.metapop: Optional[Metapopulation] = None
        self.archive = Archive(self.cfg.k)
        self._executor = executor
        self._listen = listen
        self._owns_executor = executor is None

    # setup

    @property
    def w(self) -> float:
        return self.cfg.w

    def _meta(self) -> RunMeta:
        return RunMeta(
            run_id=self.run_dir.name, run_seed=self.cfg.seed, policy=self.spec, env_id=self.cfg.env,
            noise_seed=self.cfg.noise_seed, noise_len=self.cfg.noise_table_size,
            episodes=self.cfg.episodes_per_eval,
            obs_mean=None if self.obs_mean is None else tuple(float(v) for v in self.obs_mean),
            obs_std=None if self.obs_std is None else tuple(float(v) for v in self.obs_std),
        )

    def _make_executor(self):
        meta = self._meta()
        if self._listen is not None:
            host, port = self._listen
            pool = WorkerPool(meta, self.cfg.straggler_timeout)
            log.info("waiting for %d workers on %s:%d", self.cfg.workers, host, port)
            pool.listen(host, port, self.cfg.workers)
            return pool
        if self.cfg.workers == 1:
            return SequentialExecutor(meta, self.table)
        pool = WorkerPool(meta, self.cfg.straggler_timeout)
        pool.spawn_inprocess(self.cfg.workers, self.table)
        return pool

    def _state(self, theta: np.ndarray) -> EsState:
        return EsState(theta, sigma=self.cfg.sigma, lr=self.cfg.lr,
                       weight_decay=self.cfg.weight_decay, pop_pairs=self.cfg.pop_pairs)

    def initialize(self) -> None:
        cfg = self.cfg
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if cfg.normalize_obs:
            norm = normalizer_fit(collect_reference_batch(self.env, cfg.normalizer_batch, cfg.seed))
            self.obs_mean, self.obs_std = norm.mean, norm.std
        thetas = self._initial_thetas()
        members = [Member(self._state(th)) for th in thetas]
        if cfg.archive_import:
            self.archive = read_archive(cfg.archive_import, k=cfg.k)
        for m, member in enumerate(members):
            ev = self._evaluate_mean(member.state.theta, 0, m)
            member.bc = ev.bc
            if cfg.uses_archive:
                self.archive.add(ev.bc)
        self.metapop = Metapopulation(members)
        self.iteration = 0
        (self.run_dir / CONFIG_FILE).write_text(self.config.to_text(), encoding="utf-8")
        (self.run_dir / LOG_FILE).write_text("", encoding="utf-8")
        self.save_checkpoint()

    def _initial_thetas(self) -> List[np.ndarray]:
        M = self.cfg.metapop_size
        if not self.cfg.pretrained:
            return [init_params(self.spec, keyed_rng(TAG_INIT, self.cfg.seed, m)) for m in range(M)]
        ck = read_checkpoint(self.cfg.pretrained)
        if ck.spec != self.spec:
            raise ConfigError("pretrained checkpoint does not match the configured policy")
        self.pretrained = True
        return [ck.thetas[m % ck.members].copy() for m in range(M)]

    # iteration

    def _evaluate_mean(self, theta: np.ndarray, iteration: int, member: int) -> "MemberEval":
        seeds = eval_seeds(self.cfg.seed, iteration, member, self.cfg.eval_episodes)
        return evaluate_genome(self.spec, theta, self.env, seeds, self.cfg.rtg_target,
                               self.obs_mean, self.obs_std)

    def select_member(self, iteration: int) -> int:
        if len(self.metapop) == 1:
            return 0
        return self.metapop.select(self.archive, keyed_rng(TAG_SELECT, self.cfg.seed, iteration))

    def step(self) -> dict:
        if self._executor is None:
            self._executor = self._make_executor()
        cfg = self.cfg
        t = self.iteration + 1
        start = time.perf_counter()
        m = self.select_member(t)
        member = self.metapop.members[m]
        indices = self.table.sample_indices(keyed_rng(TAG_NOISE_INDEX, cfg.seed, t),
                                            self.genome_len, cfg.pop_pairs)
        reports, dropped = self._executor.evaluate(
            t, m, member.state.theta, cfg.sigma, cfg.rtg_target, indices, len(self.archive))
        agg = aggregate(reports, indices, self.w, self.archive if cfg.uses_archive else None,
                        cfg.sigma, self.genome_len, self.table)
        member.state = adam_step(member.state, agg.gradient)
        ev = self._evaluate_mean(member.state.theta, t, m)
        member.bc = ev.bc
        nov = self.archive.novelty(ev.bc) if cfg.uses_archive else None
        if cfg.uses_archive:
            self.archive.add(ev.bc)
        if ev.reached and self.goal_iteration is None:
            self.goal_iteration = t
        self.iteration = t
        lo, hi = np.percentile(agg.steps, STEPS_PERCENTILES)
        record = {
            "iteration": t,
            "member_index": m,
            "pop_fitness_mean": math.fsum(agg.fitness) / agg.fitness.shape[0],
            "pop_fitness_max": float(agg.fitness.max()),
            "eval_fitness": ev.mean_return,
            "eval_distance": ev.mean_distance,
            "eval_steps": ev.mean_steps,
            "eval_bc": [ev.bc.x, ev.bc.y],
            "eval_success": ev.success_rate,
            "eval_reached": ev.reached,
            "pop_reached": agg.reached,
            "steps_mean": math.fsum(agg.steps) / agg.steps.shape[0],
            "steps_p_lo": float(lo),
            "steps_p_hi": float(hi),
            "novelty": _json_float(nov),
            "archive_size": len(self.archive),
            "evaluations": int(agg.n),
            "dropped": dropped,
            "theta_version": theta_version(member.state.theta),
            "wall_ms": (time.perf_counter() - start) * 1000.0,
        }
        with open(self.run_dir / LOG_FILE, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        if t % cfg.checkpoint_every == 0:
            self.save_checkpoint()
        return record

    def run(self, iterations: Optional[int] = None) -> List[dict]:
        """Run until ``iterations`` (default: config) or the goal when ``stop_on_goal``."""
        total = self.cfg.iterations if iterations is None else iterations
        if self.metapop is None:
            self.initialize()
        records = []
        try:
            while self.iteration < total:
                records.append(self.step())
                if self.cfg.stop_on_goal and self.goal_iteration is not None:
                    break
            self.save_checkpoint()
            self.write_final_eval()
        finally:
            self.close()
        return records

    def close(self) -> None:
        if self._executor is not None and self._owns_executor:
            self._executor.close()
            self._executor = None

    # persistence

    def _checkpoint_meta(self) -> Dict[str, str]:
        meta = {
            "kind": "run",
            "iteration": str(self.iteration),
            "algorithm": self.cfg.algorithm,
            "env": self.cfg.env,
            "seed": str(self.cfg.seed),
            "pretrained": "1" if self.pretrained else "0",
            "archive_size": str(len(self.archive)),
            "goal_iteration": "none" if self.goal_iteration is None else str(self.goal_iteration),
        }
        for m, member in enumerate(self.metapop.members):
            meta[f"bc.{m}"] = "none" if member.bc is None else _floats([member.bc.x, member.bc.y])
        if self.obs_mean is not None:
            meta["obs_mean"] = _floats(self.obs_mean)
            meta["obs_std"] = _floats(self.obs_std)
        return meta

    def save_checkpoint(self) -> None:
        states = [m.state for m in self.metapop.members]
        write_checkpoint(self.run_dir / CHECKPOINT_FILE, self.spec, [s.theta for s in states],
                         states, self._checkpoint_meta())
        write_archive(self.archive, self.run_dir / ARCHIVE_FILE)

    @classmethod
    def resume(cls, run_dir, config: Optional[RunConfig] = None, executor=None,
               listen=None) -> "Trainer":
        run_dir = Path(run_dir)
        if config is None:
            config = RunConfig.from_file(run_dir / CONFIG_FILE)
        trainer = cls(config, run_dir, executor, listen)
        ck = read_checkpoint(run_dir / CHECKPOINT_FILE)
        if ck.spec != trainer.spec:
            raise ResumeError("checkpoint policy spec does not match the configuration")
        if ck.members != trainer.cfg.metapop_size or ck.optimizer is None:
            raise ResumeError("checkpoint metapopulation does not match the configuration")
        if ck.meta.get("algorithm") != trainer.cfg.algorithm or ck.meta.get("seed") != str(trainer.cfg.seed):
            raise ResumeError("checkpoint was written by a different algorithm or seed")
        members = []
        for m, (theta, (t, am, av)) in enumerate(zip(ck.thetas, ck.optimizer)):
            st = trainer._state(theta)
            st.adam_m, st.adam_v, st.adam_t = am, av, t
            bc = ck.meta[f"bc.{m}"]
            members.append(Member(st, None if bc == "none" else BehaviorCharacteristic(*parse_floats(bc))))
        trainer.metapop = Metapopulation(members)
        trainer.archive = read_archive(run_dir / ARCHIVE_FILE, k=trainer.cfg.k)
        if len(trainer.archive) != int(ck.meta["archive_size"]):
            raise ResumeError("archive file does not match the checkpoint")
        trainer.iteration = int(ck.meta["iteration"])
        trainer.pretrained = ck.pretrained
        goal = ck.meta.get("goal_iteration", "none")
        trainer.goal_iteration = None if goal == "none" else int(goal)
        if "obs_mean" in ck.meta:
            trainer.obs_mean = np.array(parse_floats(ck.meta["obs_mean"]))
            trainer.obs_std = np.array(parse_floats(ck.meta["obs_std"]))
        records = read_log(run_dir)
        with open(run_dir / LOG_FILE, "w", encoding="utf-8") as fh:
            for r in records:
                if r["iteration"] <= trainer.iteration:
                    fh.write(json.dumps(r) + "\n")
        return trainer

    def write_final_eval(self) -> dict:
        thetas = [m.state.theta for m in self.metapop.members]
        seeds = eval_seeds(self.cfg.seed, 0xFFFFFFFF, 0, self.cfg.eval_episodes)
        report = evaluation_report(self.spec, thetas, self.env, seeds, self.cfg.rtg_target,
                                   self.obs_mean, self.obs_std)
        report["iterations"] = self.iteration
        report["goal_iteration"] = self.goal_iteration
        (self.run_dir / FINAL_FILE).write_text(json.dumps(report, indent=2), encoding="utf-8")
        return report


def evaluation_report(spec: PolicySpec, thetas: Sequence[np.ndarray], env: EnvSpec,
                      seeds: Sequence[int], rtg_target: float, obs_mean=None, obs_std=None) -> dict:
    """Evaluate every member; the best one maximizes mean distance from the start."""
    evals = [evaluate_genome(spec, th, env, seeds, rtg_target, obs_mean, obs_std) for th in thetas]
    best = max(range(len(evals)), key=lambda i: (evals[i].mean_distance, -i))
    return {"best_member": best, "best": evals[best].to_dict(),
            "members": [e.to_dict() for e in evals], "episodes": len(seeds)}


def read_log(run_dir) -> List[dict]:
    path = Path(run_dir) / LOG_FILE
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def load_run_policy(path):
    """Checkpoint plus its normalizer arrays (or ``None``)."""
    ck = read_checkpoint(path)
    mean = std = None
    if "obs_mean" in ck.meta:
        mean = np.array(parse_floats(ck.meta["obs_mean"]))
        std = np.array(parse_floats(ck.meta["obs_std"]))
    return ck, mean, std
