"""Behavior archive, k-NN novelty and metapopulation bookkeeping for NS-ES / NSR-ES."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .optim import EsState, adam_step, estimate_update, shape_scores, NoiseTable


class AggregationError(ValueError):
    """Evaluation results cannot be turned into an update."""


@dataclass(frozen=True)
class BehaviorCharacteristic:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("behavior characteristic must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


BC = BehaviorCharacteristic


def bc_distance(a: BehaviorCharacteristic, b: BehaviorCharacteristic) -> float:
    dx = a.x - b.x
    dy = a.y - b.y
    return math.sqrt(dx * dx + dy * dy)


class Archive:
    """Append-only store of behavior characteristics."""

    def __init__(self, k: int = 10, entries: Sequence[BehaviorCharacteristic] = ()):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = int(k)
        self._xy = np.empty((0, 2))
        self._n = 0
        for bc in entries:
            self.add(bc)

    def __len__(self) -> int:
        return self._n

    def add(self, bc: BehaviorCharacteristic) -> "Archive":
        if self._n == self._xy.shape[0]:
            grown = np.empty((max(16, 2 * self._n), 2))
            grown[:self._n] = self._xy[:self._n]
            self._xy = grown
        self._xy[self._n] = (bc.x, bc.y)
        self._n += 1
        return self

    @property
    def points(self) -> np.ndarray:
        return self._xy[:self._n]

    @property
    def entries(self) -> List[BehaviorCharacteristic]:
        return [BehaviorCharacteristic(float(x), float(y)) for x, y in self.points]

    def snapshot(self) -> "Archive":
        return Archive(self.k, self.entries)

    def novelty(self, bc: BehaviorCharacteristic, k: Optional[int] = None) -> float:
        return novelty(bc, self, self.k if k is None else k)

    def novelties(self, xy: np.ndarray, k: Optional[int] = None) -> np.ndarray:
        return batch_novelty(np.asarray(xy, dtype=np.float64), self.points,
                             self.k if k is None else k)


def archive_add(archive: Archive, bc: BehaviorCharacteristic) -> Archive:
    return archive.add(bc)


def batch_novelty(queries: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """Mean distance of each query row to its ``min(k, N)`` nearest points.

    The k smallest distances are summed with ``math.fsum`` so the result is
    exactly rounded and independent of point order.  Empty archives give inf.
    """
    q = np.atleast_2d(queries)
    n = points.shape[0]
    if n == 0:
        return np.full(q.shape[0], np.inf)
    kk = min(int(k), n)
    dx = q[:, 0:1] - points[None, :, 0]
    dy = q[:, 1:2] - points[None, :, 1]
    d = np.sqrt(dx * dx + dy * dy)
    if kk < n:
        d = np.partition(d, kk - 1, axis=1)[:, :kk]
    return np.array([math.fsum(row) / kk for row in d])


def novelty(bc: BehaviorCharacteristic, archive: Archive, k: int) -> float:
    return float(batch_novelty(np.array([[bc.x, bc.y]]), archive.points, k)[0])


def select_member(novelties: Sequence[float], rng: np.random.Generator) -> int:
    """Index drawn with probability proportional to novelty."""
    return int(rng.choice(len(novelties), p=selection_probabilities(novelties)))


def selection_probabilities(novelties: Sequence[float]) -> np.ndarray:
    nov = np.asarray(novelties, dtype=np.float64)
    if nov.ndim != 1 or nov.shape[0] == 0:
        raise ValueError("need at least one novelty")
    if np.any(nov < 0) or np.any(np.isnan(nov)):
        raise ValueError("novelties must be non-negative")
    if np.any(np.isinf(nov)):
        nov = np.isinf(nov).astype(np.float64)
    total = nov.sum()
    if total == 0:
        return np.full(nov.shape[0], 1.0 / nov.shape[0])
    return nov / total


def combine_scores(fitness_shaped, novelty_shaped, w: float) -> np.ndarray:
    """``w * fitness + (1 - w) * novelty``; ``w`` 1 is plain ES, 0 is NS-ES."""
    if not 0.0 <= w <= 1.0:
        raise ValueError("w must lie in [0, 1]")
    f = np.asarray(fitness_shaped, dtype=np.float64)
    n = np.asarray(novelty_shaped, dtype=np.float64)
    if w == 1.0:
        return f.copy()
    if w == 0.0:
        return n.copy()
    return w * f + (1 - w) * n


ALGORITHM_WEIGHT = {"es": 1.0, "ns-es": 0.0, "nsr-es": 0.5}


def score_evaluations(fitness: np.ndarray, bcs: np.ndarray, archive: Optional[Archive],
                      w: float) -> np.ndarray:
    """Shaped score per evaluation for a fitness/novelty weight ``w``.

    Fitness and novelty are centered-rank shaped independently and then mixed
    with :func:`combine_scores`; every algorithm goes through this one path.
    """
    fit_shaped = shape_scores(fitness) if w > 0 else np.zeros(len(fitness))
    if w < 1:
        if archive is None:
            raise AggregationError("novelty-based scoring needs an archive snapshot")
        if bcs is None or np.asarray(bcs).shape != (len(fitness), 2):
            raise AggregationError("a behavior characteristic is missing for some evaluation")
        nov_shaped = shape_scores(archive.novelties(bcs))
    else:
        nov_shaped = np.zeros(len(fitness))
    return combine_scores(fit_shaped, nov_shaped, w)


@dataclass
class Member:
    state: EsState
    bc: Optional[BehaviorCharacteristic] = None
    novelty: float = math.inf


@dataclass
class Metapopulation:
    members: List[Member] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("metapopulation needs at least one member")

    def __len__(self) -> int:
        return len(self.members)

    def refresh_novelty(self, archive: Archive) -> List[float]:
        for m in self.members:
            m.novelty = math.inf if m.bc is None else archive.novelty(m.bc)
        return [m.novelty for m in self.members]

    def select(self, archive: Archive, rng: np.random.Generator) -> int:
        return select_member(self.refresh_novelty(archive), rng)


@dataclass
class Perturbation:
    """One evaluated perturbation: ``theta + sign * sigma * table[noise_index:]``."""

    noise_index: int
    sign: int
    fitness: float
    bc: Optional[BehaviorCharacteristic]


def ns_iteration(metapop: Metapopulation, archive: Archive, member_index: int,
                 results: Sequence[Perturbation], table: NoiseTable, w: float,
                 evaluate_mean: Callable[[np.ndarray], Tuple[float, BehaviorCharacteristic]]
                 ) -> Tuple[Metapopulation, Archive, np.ndarray]:
    """Apply one NS-ES/NSR-ES update to the selected member.

    Perturbation novelties are measured against the archive as it is on entry;
    the updated mean is then evaluated and its BC appended.  Returns the
    metapopulation, archive and the shaped score vector.
    """
    if any(r.bc is None for r in results):
        raise AggregationError("every perturbation needs a behavior characteristic")
    member = metapop.members[member_index]
    fitness = np.array([r.fitness for r in results])
    bcs = np.array([[r.bc.x, r.bc.y] for r in results])
    shaped = score_evaluations(fitness, bcs, archive, w)
    grad = estimate_update(shaped, [r.noise_index for r in results], [r.sign for r in results],
                           member.state.sigma, member.state.theta.shape[0], table)
    member.state = adam_step(member.state, grad)
    _, bc = evaluate_mean(member.state.theta)
    member.bc = bc
    archive.add(bc)
    return metapop, archive, shaped


def write_archive(archive: Archive, path) -> None:
    """Text format: ``k <k> n <count>`` header, then ``x y`` per line (repr floats)."""
    lines = [f"k {archive.k} n {len(archive)}"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in archive.points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_archive(path, k: Optional[int] = None) -> Archive:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text:
        raise ValueError(f"{path}: empty archive file")
    head = text[0].split()
    if len(head) != 4 or head[0] != "k" or head[2] != "n":
        raise ValueError(f"{path}: bad archive header {text[0]!r}")
    count = int(head[3])
    body = [line for line in text[1:] if line.strip()]
    if len(body) != count:
        raise ValueError(f"{path}: header says {count} entries, found {len(body)}")
    arch = Archive(int(head[1]) if k is None else k)
    for line in body:
        x, y = line.split()
        arch.add(BehaviorCharacteristic(float(x), float(y)))
    return arch
