"""OpenAI-ES update machinery.

Shared noise table, mirrored perturbations, centered-rank shaping, the
variance-rescaled gradient estimate, Adam ascent and a frozen observation
normalizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
NORM_EPS = 1e-6

# stream tags for counter-based generators
TAG_NOISE_INDEX = 1
TAG_SELECT = 2
TAG_EPISODE = 3
TAG_EVAL = 4
TAG_INIT = 5
TAG_NORMALIZER = 6
TAG_MINIBATCH = 7
TAG_DATASET = 8


def keyed_rng(*words: int) -> np.random.Generator:
    """Philox generator keyed by a tuple of non-negative integers.

    The same words always give the same stream, regardless of which process
    asks for it.
    """
    seq = np.random.SeedSequence([int(w) for w in words])
    return np.random.Generator(np.random.Philox(seq))


def keyed_seed(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1, np.uint64)[0])


class NoiseTable:
    """Immutable block of standard-normal values addressed by offset."""

    def __init__(self, seed: int, length: int):
        if length < 1:
            raise ValueError("noise table length must be positive")
        self.seed = int(seed)
        self.length = int(length)
        noise = np.random.Generator(np.random.PCG64(self.seed)).standard_normal(self.length)
        noise.flags.writeable = False
        self.noise = noise

    def __len__(self) -> int:
        return self.length

    def get(self, index: int, dim: int) -> np.ndarray:
        index = int(index)
        if index < 0 or index + dim > self.length:
            raise IndexError(f"noise slice [{index}, {index + dim}) outside table of {self.length}")
        return self.noise[index:index + dim]

    def sample_indices(self, rng: np.random.Generator, dim: int, n: int) -> np.ndarray:
        hi = self.length - dim
        if hi < 0:
            raise ValueError("noise table shorter than the genome")
        return rng.integers(0, hi, size=n, endpoint=True)


def noise_table_build(seed: int, length: int) -> NoiseTable:
    return NoiseTable(seed, length)


def perturb(theta: np.ndarray, table: NoiseTable, index: int, sign: int, sigma: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return theta + sign * sigma * table.get(index, theta.shape[0])


def shape_scores(raw: Sequence[float]) -> np.ndarray:
    """Centered ranks in [-0.5, 0.5]; tied scores share their average rank."""
    x = np.asarray(raw, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 1 or n < 2:
        raise ValueError("shape_scores needs at least two scores")
    order = np.argsort(x, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0
        i = j + 1
    return ranks / (n - 1) - 0.5


def estimate_update(shaped: Sequence[float], noise_indices: Sequence[int], signs: Sequence[int],
                    sigma: float, genome_len: int, table: NoiseTable) -> np.ndarray:
    """Variance-rescaled mirrored gradient estimate, rebuilt from noise indices.

    ``shaped``, ``noise_indices`` and ``signs`` are per evaluation.  Evaluations
    sharing a noise index are folded first (``sum(score*sign)``), then slices
    are accumulated in ascending noise index so that the result does not
    depend on report arrival order.
    """
    shaped = np.asarray(shaped, dtype=np.float64)
    idx = np.asarray(noise_indices, dtype=np.int64)
    sg = np.asarray(signs, dtype=np.int64)
    n = shaped.shape[0]
    if idx.shape != (n,) or sg.shape != (n,):
        raise ValueError("shaped scores, noise indices and signs must have equal length")
    if n == 0:
        raise ValueError("no evaluations to aggregate")
    coef = {}
    # pairs are folded in input order, which callers keep canonical (+ then -)
    for s, i, g in zip(shaped, idx, sg):
        coef[int(i)] = coef.get(int(i), 0.0) + float(s) * int(g)
    grad = np.zeros(genome_len)
    for i in sorted(coef):
        c = coef[i]
        if c != 0.0:
            grad += c * table.get(i, genome_len)
    return grad / (n * sigma)


@dataclass
class EsState:
    theta: np.ndarray
    sigma: float = 0.05
    lr: float = 0.01
    weight_decay: float = 0.005
    pop_pairs: int = 100
    adam_m: Optional[np.ndarray] = None
    adam_v: Optional[np.ndarray] = None
    adam_t: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.theta)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.theta)
        if self.sigma <= 0 or self.lr <= 0:
            raise ValueError("sigma and lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.adam_m.shape != self.theta.shape or self.adam_v.shape != self.theta.shape:
            raise ValueError("Adam moments must match theta")

    def copy(self) -> "EsState":
        return replace(self, theta=self.theta.copy(), adam_m=self.adam_m.copy(),
                       adam_v=self.adam_v.copy())


def adam_step(state: EsState, gradient: np.ndarray) -> EsState:
    """One Adam ascent step; decoupled weight decay shrinks theta first."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.theta.shape:
        raise ValueError("gradient length does not match theta")
    t = state.adam_t + 1
    m = ADAM_BETA1 * state.adam_m + (1 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.adam_v + (1 - ADAM_BETA2) * g * g
    m_hat = m / (1 - ADAM_BETA1 ** t)
    v_hat = v / (1 - ADAM_BETA2 ** t)
    theta = state.theta * (1 - state.weight_decay) if state.weight_decay else state.theta.copy()
    theta = theta + state.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return replace(state, theta=theta, adam_m=m, adam_v=v, adam_t=t)


@dataclass(frozen=True)
class ObsNormalizer:
    mean: np.ndarray
    std: np.ndarray
    frozen: bool = field(default=True)

    def apply(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.mean) / self.std


def normalizer_fit(observations) -> ObsNormalizer:
    batch = np.asarray(observations, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("normalizer_fit needs a non-empty 2-D batch")
    mean = batch.mean(axis=0)
    std = np.maximum(batch.std(axis=0), NORM_EPS)
    return ObsNormalizer(mean, std, True)


def normalizer_apply(norm: ObsNormalizer, obs) -> np.ndarray:
    return norm.apply(obs)
