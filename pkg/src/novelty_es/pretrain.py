"""Seeding a policy by ES on an imitation loss.

A teacher checkpoint is rolled out to build a frozen dataset of
``(observation, teacher action)`` pairs with the return-to-go and timestep a
transformer student would see.  The student is then optimized with the same
ES machinery, using ``-mean squared action error`` on a keyed minibatch
schedule as fitness.  No gradients flow through either network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint, parse_floats
from .config import ConfigError
from .env import EnvSpec, get_env, reset, step
from .optim import (
    TAG_DATASET, TAG_INIT, TAG_MINIBATCH, TAG_NOISE_INDEX, EsState, adam_step, estimate_update,
    keyed_rng, keyed_seed, shape_scores,
)
from .policy import Policy, PolicySpec, init_params, param_count
from .rollout import dt_forward_windows, mlp_forward_batch
from .training import noise_table

PRETRAIN_STREAM = 1  # separates pretraining noise draws from training draws


@dataclass(frozen=True)
class PretrainConfig:
    env: str = "maze"
    episodes: int = 50
    iterations: int = 200
    pop_pairs: int = 50
    sigma: float = 0.01
    lr: float = 0.01
    weight_decay: float = 0.0
    batch_size: int = 128
    seed: int = 0
    rtg_target: float = 0.0075
    noise_table_size: int = 10_000_000
    noise_seed: int = 42


@dataclass
class Dataset:
    """Flat per-step arrays; ``episode_start[i]`` is the row where step i's episode begins."""

    obs: np.ndarray
    act: np.ndarray
    rtg: np.ndarray
    t: np.ndarray
    episode_start: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]

    def windows(self, rows: np.ndarray, K: int):
        """Context windows (oldest first, padded to K) ending at each row."""
        n = rows.shape[0]
        od, ad = self.obs.shape[1], self.act.shape[1]
        rtg = np.zeros((n, K))
        obs = np.zeros((n, K, od))
        act = np.zeros((n, K, ad))
        t0 = np.empty(n, dtype=np.int64)
        T = np.empty(n, dtype=np.int64)
        for i, r in enumerate(rows):
            lo = max(int(self.episode_start[r]), int(r) - K + 1)
            span = int(r) - lo + 1
            rtg[i, :span] = self.rtg[lo:r + 1]
            obs[i, :span] = self.obs[lo:r + 1]
            act[i, :span - 1] = self.act[lo:r]
            t0[i] = self.t[lo]
            T[i] = span
        return rtg, obs, act, t0, T


def collect_dataset(teacher: Policy, env: EnvSpec, episodes: int, seed: int,
                    rtg_target: float) -> Dataset:
    """Roll the teacher out; observations are stored raw (un-normalized)."""
    obs_rows, act_rows, rtg_rows, t_rows, starts = [], [], [], [], []
    for e in range(episodes):
        state, obs = reset(env, keyed_seed(TAG_DATASET, seed, e))
        teacher.reset(obs, rtg_target)
        rtg = rtg_target
        first = len(obs_rows)
        done = False
        while not done:
            action = teacher.act(obs)
            obs_rows.append(obs)
            act_rows.append(action)
            rtg_rows.append(rtg)
            t_rows.append(state.t)
            starts.append(first)
            state, obs, reward, done = step(env, state, action)
            rtg -= reward / env.reward_scale
            if not done:
                teacher.observe(action, reward / env.reward_scale, obs)
    return Dataset(np.array(obs_rows), np.array(act_rows), np.array(rtg_rows),
                   np.array(t_rows, dtype=np.int64), np.array(starts, dtype=np.int64))


def imitation_fitness(spec: PolicySpec, genomes: np.ndarray, data: Dataset,
                      rows: np.ndarray) -> np.ndarray:
    """``-mean squared action error`` of every genome on the given rows."""
    target = data.act[rows]
    if spec.kind == "mlp":
        pred = mlp_forward_batch(spec, genomes, data.obs[rows])
    else:
        pred = dt_forward_windows(spec, genomes, *data.windows(rows, spec.dt_context_len))
    err = (pred - target[None]) ** 2
    return -err.reshape(err.shape[0], -1).mean(axis=1)


def minibatch(data: Dataset, seed: int, iteration: int, size: int) -> np.ndarray:
    if size >= len(data):
        return np.arange(len(data))
    rng = keyed_rng(TAG_MINIBATCH, seed, iteration)
    return np.sort(rng.choice(len(data), size=size, replace=False))


@dataclass
class PretrainResult:
    theta: np.ndarray
    fitness: List[float]  # mean genome, per iteration (index 0 = before any update)


def pretrain(teacher: Policy, student_spec: PolicySpec, cfg: PretrainConfig,
             init_theta: Optional[np.ndarray] = None) -> PretrainResult:
    env = get_env(cfg.env)
    if teacher.spec.act_dim != student_spec.act_dim:
        raise ConfigError("teacher and student action dimensions differ")
    if teacher.spec.obs_dim != env.obs_dim or student_spec.obs_dim != env.obs_dim:
        raise ConfigError("teacher or student observation size does not match the environment")
    data = collect_dataset(teacher, env, cfg.episodes, cfg.seed, cfg.rtg_target)
    P = param_count(student_spec)
    table = noise_table(cfg.noise_seed, cfg.noise_table_size)
    if init_theta is None:
        init_theta = init_params(student_spec, keyed_rng(TAG_INIT, cfg.seed, 0, PRETRAIN_STREAM))
    state = EsState(np.array(init_theta, dtype=np.float64), sigma=cfg.sigma, lr=cfg.lr,
                    weight_decay=cfg.weight_decay, pop_pairs=cfg.pop_pairs)
    history = []
    for it in range(cfg.iterations + 1):
        rows = minibatch(data, cfg.seed, it, cfg.batch_size)
        history.append(float(imitation_fitness(student_spec, state.theta[None], data, rows)[0]))
        if it == cfg.iterations:
            break
        idx = table.sample_indices(keyed_rng(TAG_NOISE_INDEX, cfg.seed, it, PRETRAIN_STREAM),
                                   P, cfg.pop_pairs)
        genomes = np.empty((2 * cfg.pop_pairs, P))
        for i, n in enumerate(idx):
            eps = table.get(n, P)
            genomes[2 * i] = state.theta + cfg.sigma * eps
            genomes[2 * i + 1] = state.theta - cfg.sigma * eps
        fit = imitation_fitness(student_spec, genomes, data, rows)
        shaped = shape_scores(fit)
        grad = estimate_update(shaped, np.repeat(idx, 2), [1, -1] * cfg.pop_pairs, cfg.sigma, P, table)
        state = adam_step(state, grad)
    return PretrainResult(state.theta, history)


def load_teacher(path) -> Policy:
    ck = read_checkpoint(path)
    mean = std = None
    if "obs_mean" in ck.meta:
        mean = np.array(parse_floats(ck.meta["obs_mean"]))
        std = np.array(parse_floats(ck.meta["obs_std"]))
    best = int(ck.meta.get("best_member", "0"))
    return Policy(ck.spec, ck.thetas[best], mean, std)


def write_student(path, spec: PolicySpec, theta: np.ndarray, fitness: List[float]) -> None:
    write_checkpoint(path, spec, [theta], None, {
        "kind": "policy", "pretrained": "1", "final_imitation_fitness": repr(fitness[-1])})
