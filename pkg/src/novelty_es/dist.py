"""Master/worker evaluation layer.

The coordinator announces an iteration (mean version, sigma and a list of
``(pair_id, noise_index)`` assignments); workers rebuild ``theta +/- sigma*eps``
from their own copy of the noise table, roll both genomes out and report one
:class:`ResultReport` per pair.  :func:`aggregate` turns the reports into a
canonical, order-independent update.

Two executors share these functions: :class:`SequentialExecutor` (inline,
single worker, the reference semantics) and :class:`WorkerPool` (message
passing to in-process threads or TCP workers).
"""

from __future__ import annotations

import logging
import math
import queue
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .env import get_env
from .novelty import Archive, AggregationError, score_evaluations
from .optim import TAG_EPISODE, NoiseTable, estimate_update, keyed_seed
from .policy import PolicySpec, param_count
from .protocol import (
    ProtocolError, QueueChannel, SocketChannel, decode_vector, encode_vector, message,
    queue_pair, theta_version,
)
from .rollout import rollout_batch

log = logging.getLogger(__name__)


class StaleMeanError(RuntimeError):
    """Worker holds a different mean than the announcement refers to."""


@dataclass(frozen=True)
class RunMeta:
    """Per-run facts every worker needs once, sent in the HELLO reply."""

    run_id: str
    run_seed: int
    policy: PolicySpec
    env_id: str
    noise_seed: int
    noise_len: int
    episodes: int = 1
    obs_mean: Optional[Tuple[float, ...]] = None
    obs_std: Optional[Tuple[float, ...]] = None

    def to_msg(self) -> dict:
        return {
            "run_id": self.run_id, "run_seed": self.run_seed,
            "policy": dict(self.policy.to_pairs()), "env_id": self.env_id,
            "noise_seed": self.noise_seed, "noise_len": self.noise_len,
            "episodes": self.episodes,
            "obs_mean": None if self.obs_mean is None else list(self.obs_mean),
            "obs_std": None if self.obs_std is None else list(self.obs_std),
        }

    @classmethod
    def from_msg(cls, msg: dict) -> "RunMeta":
        return cls(
            run_id=msg["run_id"], run_seed=int(msg["run_seed"]),
            policy=PolicySpec.from_pairs(msg["policy"]), env_id=msg["env_id"],
            noise_seed=int(msg["noise_seed"]), noise_len=int(msg["noise_len"]),
            episodes=int(msg["episodes"]),
            obs_mean=None if msg["obs_mean"] is None else tuple(msg["obs_mean"]),
            obs_std=None if msg["obs_std"] is None else tuple(msg["obs_std"]),
        )


@dataclass
class TaskAnnouncement:
    run_id: str
    iteration: int
    member_index: int
    theta_version: str
    sigma: float
    rtg_target: float
    pair_assignments: List[Tuple[int, int]]
    archive_version: int
    env_id: str

    def to_msg(self) -> dict:
        d = asdict(self)
        d["pair_assignments"] = [list(p) for p in self.pair_assignments]
        return message("ASSIGN", **d)

    @classmethod
    def from_msg(cls, msg: dict) -> "TaskAnnouncement":
        return cls(
            run_id=msg["run_id"], iteration=int(msg["iteration"]),
            member_index=int(msg["member_index"]), theta_version=msg["theta_version"],
            sigma=float(msg["sigma"]), rtg_target=float(msg["rtg_target"]),
            pair_assignments=[(int(a), int(b)) for a, b in msg["pair_assignments"]],
            archive_version=int(msg["archive_version"]), env_id=msg["env_id"],
        )


@dataclass
class ResultReport:
    pair_id: int
    noise_index: int
    fitness_pos: float
    fitness_neg: float
    bc_pos: Tuple[float, float]
    bc_neg: Tuple[float, float]
    steps_pos: float
    steps_neg: float
    worker_id: int
    reached_pos: bool = False
    reached_neg: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bc_pos"] = list(self.bc_pos)
        d["bc_neg"] = list(self.bc_neg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResultReport":
        return cls(
            pair_id=int(d["pair_id"]), noise_index=int(d["noise_index"]),
            fitness_pos=float(d["fitness_pos"]), fitness_neg=float(d["fitness_neg"]),
            bc_pos=tuple(d["bc_pos"]), bc_neg=tuple(d["bc_neg"]),
            steps_pos=float(d["steps_pos"]), steps_neg=float(d["steps_neg"]),
            worker_id=int(d["worker_id"]),
            reached_pos=bool(d.get("reached_pos", False)),
            reached_neg=bool(d.get("reached_neg", False)),
        )


def announce(meta: RunMeta, iteration: int, member_index: int, theta: np.ndarray, sigma: float,
             rtg_target: float, noise_indices: Sequence[int], worker_ids: Sequence[int],
             archive_version: int = 0) -> Dict[int, TaskAnnouncement]:
    """Split the population round-robin over workers (in worker-id order)."""
    if not worker_ids:
        raise ValueError("no workers to announce to")
    genome = theta.shape[0]
    for idx in noise_indices:
        if idx < 0 or idx + genome > meta.noise_len:
            raise ProtocolError(f"noise index {idx} out of range")
    ids = sorted(worker_ids)
    version = theta_version(theta)
    per = {w: [] for w in ids}
    for pair_id, idx in enumerate(noise_indices):
        per[ids[pair_id % len(ids)]].append((pair_id, int(idx)))
    return {
        w: TaskAnnouncement(meta.run_id, iteration, member_index, version, float(sigma),
                            float(rtg_target), pairs, archive_version, meta.env_id)
        for w, pairs in per.items()
    }


def episode_seed(run_seed: int, iteration: int, pair_id: int, sign: int, episode: int) -> int:
    return keyed_seed(TAG_EPISODE, run_seed, iteration, pair_id, 0 if sign > 0 else 1, episode)


def worker_execute(ann: TaskAnnouncement, mean: np.ndarray, table: NoiseTable, meta: RunMeta,
                   worker_id: int = 0) -> List[ResultReport]:
    """Evaluate ``mean +/- sigma*eps`` for every assigned pair."""
    if theta_version(mean) != ann.theta_version:
        raise StaleMeanError(f"mean version {theta_version(mean)} != {ann.theta_version}")
    if not ann.pair_assignments:
        return []
    spec = meta.policy
    env = get_env(ann.env_id)
    P = mean.shape[0]
    E = meta.episodes
    rows, seeds = [], []
    for pair_id, idx in ann.pair_assignments:
        if idx < 0 or idx + P > table.length:
            raise ProtocolError(f"noise index {idx} outside the local noise table")
        eps = table.get(idx, P)
        for sign in (1, -1):
            genome = mean + sign * ann.sigma * eps
            for e in range(E):
                rows.append(genome)
                seeds.append(episode_seed(meta.run_seed, ann.iteration, pair_id, sign, e))
    res = rollout_batch(spec, np.stack(rows), env, seeds, ann.rtg_target,
                        meta.obs_mean, meta.obs_std)
    reports = []
    for n, (pair_id, idx) in enumerate(ann.pair_assignments):
        pos = slice(2 * n * E, (2 * n + 1) * E)
        neg = slice((2 * n + 1) * E, (2 * n + 2) * E)
        reports.append(ResultReport(
            pair_id=pair_id, noise_index=idx,
            fitness_pos=math.fsum(res.ret[pos]) / E, fitness_neg=math.fsum(res.ret[neg]) / E,
            bc_pos=(math.fsum(res.final[pos, 0]) / E, math.fsum(res.final[pos, 1]) / E),
            bc_neg=(math.fsum(res.final[neg, 0]) / E, math.fsum(res.final[neg, 1]) / E),
            steps_pos=float(res.steps[pos].mean()), steps_neg=float(res.steps[neg].mean()),
            worker_id=worker_id,
            reached_pos=bool(res.reached[pos].any()), reached_neg=bool(res.reached[neg].any()),
        ))
    return reports


@dataclass
class Aggregate:
    gradient: np.ndarray
    shaped: np.ndarray
    fitness: np.ndarray
    bcs: np.ndarray
    steps: np.ndarray
    pair_ids: List[int]
    dropped: List[int]
    reached: int

    @property
    def n(self) -> int:
        return self.shaped.shape[0]


def canonical_reports(reports: Iterable[ResultReport], noise_indices: Sequence[int]
                      ) -> Tuple[List[ResultReport], List[int]]:
    """Dedupe (first wins) and sort by pair id; returns (reports, dropped pair ids)."""
    seen: Dict[int, ResultReport] = {}
    for rep in reports:
        if rep.pair_id < 0 or rep.pair_id >= len(noise_indices):
            raise AggregationError(f"report for unknown pair {rep.pair_id}")
        if rep.noise_index != noise_indices[rep.pair_id]:
            raise AggregationError(f"pair {rep.pair_id} reports noise index {rep.noise_index}, "
                                   f"expected {noise_indices[rep.pair_id]}")
        if rep.pair_id in seen:
            log.warning("duplicate report for pair %d from worker %d ignored",
                        rep.pair_id, rep.worker_id)
            continue
        seen[rep.pair_id] = rep
    dropped = [p for p in range(len(noise_indices)) if p not in seen]
    return [seen[p] for p in sorted(seen)], dropped


def aggregate(reports: Iterable[ResultReport], noise_indices: Sequence[int], w: float,
              archive: Optional[Archive], sigma: float, genome_len: int,
              table: NoiseTable) -> Aggregate:
    """Shaped scores and gradient from the received reports.

    Scores are laid out by pair id, ``+`` before ``-``.  Missing pairs are
    dropped as a whole so the mirrored estimator stays balanced.
    """
    reps, dropped = canonical_reports(reports, noise_indices)
    if not reps:
        raise AggregationError("no reports to aggregate")
    fitness = np.array([f for r in reps for f in (r.fitness_pos, r.fitness_neg)])
    bcs = np.array([b for r in reps for b in (r.bc_pos, r.bc_neg)], dtype=np.float64)
    steps = np.array([s for r in reps for s in (r.steps_pos, r.steps_neg)])
    idx = [r.noise_index for r in reps for _ in (0, 1)]
    signs = [1, -1] * len(reps)
    shaped = score_evaluations(fitness, bcs, archive, w)
    grad = estimate_update(shaped, idx, signs, sigma, genome_len, table)
    reached = sum(int(r.reached_pos) + int(r.reached_neg) for r in reps)
    return Aggregate(grad, shaped, fitness, bcs, steps, [r.pair_id for r in reps], dropped, reached)


# -- executors ------------------------------------------------------------------


class SequentialExecutor:
    """Inline single-worker evaluation: the reference semantics."""

    def __init__(self, meta: RunMeta, table: NoiseTable):
        self.meta = meta
        self.table = table

    def evaluate(self, iteration: int, member_index: int, theta: np.ndarray, sigma: float,
                 rtg_target: float, noise_indices: Sequence[int], archive_version: int = 0
                 ) -> Tuple[List[ResultReport], List[int]]:
        ann = announce(self.meta, iteration, member_index, theta, sigma, rtg_target,
                       noise_indices, [0], archive_version)[0]
        return worker_execute(ann, theta, self.table, self.meta, 0), []

    def close(self) -> None:
        pass


class WorkerPool:
    """Coordinator side of the message protocol.

    Workers are attached with :meth:`attach` (any channel with ``send``,
    ``recv`` and ``close``).  Each channel gets a reader thread feeding one
    inbox, so the coordinator itself stays single-threaded.
    """

    def __init__(self, meta: RunMeta, deadline: float = 60.0):
        self.meta = meta
        self.deadline = float(deadline)
        self.inbox: "queue.Queue" = queue.Queue()
        self.channels: Dict[int, object] = {}
        self.live: set = set()
        self.known_version: Dict[int, Optional[str]] = {}
        self.mean_sends = 0
        self.mean_sends_by_iteration: Dict[int, Dict[int, int]] = {}
        self.drop_log: List[Tuple[int, List[int]]] = []
        self._threads: List[threading.Thread] = []
        self._listener: Optional[socket.socket] = None

    # connection management

    def attach(self, channel, timeout: float = 30.0) -> int:
        hello = _recv_with_timeout(channel, timeout)
        if hello is None or hello.get("type") != "HELLO":
            raise ProtocolError("worker did not open with HELLO")
        wid = len(self.channels)
        channel.send(message("HELLO", worker_id=wid, **self.meta.to_msg()))
        self.channels[wid] = channel
        self.live.add(wid)
        self.known_version[wid] = None
        t = threading.Thread(target=self._reader, args=(wid, channel), daemon=True)
        t.start()
        self._threads.append(t)
        return wid

    def _reader(self, wid: int, channel) -> None:
        try:
            while True:
                msg = channel.recv()
                self.inbox.put((wid, msg))
                if msg is None:
                    return
        except (OSError, ProtocolError) as exc:
            log.warning("worker %d connection failed: %s", wid, exc)
            self.inbox.put((wid, None))

    def listen(self, host: str, port: int, n_workers: int, timeout: float = 300.0) -> Tuple[str, int]:
        """Accept ``n_workers`` TCP workers; returns the bound address."""
        srv = socket.create_server((host, port))
        self._listener = srv
        srv.settimeout(timeout)
        addr = srv.getsockname()[:2]
        for _ in range(n_workers):
            conn, _ = srv.accept()
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.attach(SocketChannel(conn))
        return addr

    def spawn_inprocess(self, n_workers: int, table: Optional[NoiseTable] = None,
                        wrappers: Sequence = ()) -> None:
        """Start ``n_workers`` worker threads connected through queues.

        ``wrappers[i]``, if given, wraps worker i's channel (fault injection).
        """
        for i in range(n_workers):
            coord_end, worker_end = queue_pair()
            if i < len(wrappers) and wrappers[i] is not None:
                worker_end = wrappers[i](worker_end)
            t = threading.Thread(target=serve_worker, args=(worker_end, table), daemon=True)
            t.start()
            self._threads.append(t)
            self.attach(coord_end)

    # iteration

    def _send_task(self, wid: int, ann: TaskAnnouncement, theta: np.ndarray) -> None:
        ch = self.channels[wid]
        if self.known_version[wid] != ann.theta_version:
            self._send_mean(wid, ann, theta)
        ch.send(ann.to_msg())

    def _send_mean(self, wid: int, ann: TaskAnnouncement, theta: np.ndarray) -> None:
        self.channels[wid].send(message("MEAN", theta_version=ann.theta_version,
                                        params=encode_vector(theta)))
        self.known_version[wid] = ann.theta_version
        self.mean_sends += 1
        per = self.mean_sends_by_iteration.setdefault(ann.iteration, {})
        per[wid] = per.get(wid, 0) + 1

    def evaluate(self, iteration: int, member_index: int, theta: np.ndarray, sigma: float,
                 rtg_target: float, noise_indices: Sequence[int], archive_version: int = 0
                 ) -> Tuple[List[ResultReport], List[int]]:
        if not self.live:
            raise RuntimeError("no live workers")
        anns = announce(self.meta, iteration, member_index, theta, sigma, rtg_target,
                        noise_indices, sorted(self.live), archive_version)
        owner: Dict[int, int] = {}
        for wid, ann in anns.items():
            for pair_id, _ in ann.pair_assignments:
                owner[pair_id] = wid
            if ann.pair_assignments:
                self._send_task(wid, ann, theta)
        template = next(iter(anns.values()))
        results: Dict[int, ResultReport] = {}
        end = time.monotonic() + self.deadline
        while owner:
            remaining = end - time.monotonic()
            if remaining <= 0:
                break
            try:
                wid, msg = self.inbox.get(timeout=remaining)
            except queue.Empty:
                break
            if msg is None:
                self._lose_worker(wid, owner, template, theta, noise_indices)
                continue
            kind = msg["type"]
            if kind == "MEAN" and msg.get("request"):
                if msg.get("theta_version") == template.theta_version:
                    self._send_mean(wid, template, theta)
            elif kind == "RESULT":
                if int(msg["iteration"]) != iteration:
                    continue
                for d in msg["reports"]:
                    rep = ResultReport.from_dict(d)
                    if rep.pair_id in results:
                        log.warning("duplicate report for pair %d ignored", rep.pair_id)
                    elif rep.pair_id in owner:
                        results[rep.pair_id] = rep
                        del owner[rep.pair_id]
            else:
                log.warning("unexpected %s message from worker %d", kind, wid)
        dropped = sorted(owner)
        if dropped:
            by_worker: Dict[int, List[int]] = {}
            for p in dropped:
                by_worker.setdefault(owner[p], []).append(p)
            for wid, pairs in by_worker.items():
                if wid in self.live:
                    self.channels[wid].send(message("DROP", iteration=iteration, pairs=pairs))
            self.drop_log.append((iteration, dropped))
            log.warning("iteration %d: dropped pairs %s after deadline", iteration, dropped)
        return [results[p] for p in sorted(results)], dropped

    def _lose_worker(self, wid: int, owner: Dict[int, int], template: TaskAnnouncement,
                     theta: np.ndarray, noise_indices: Sequence[int]) -> None:
        if wid not in self.live:
            return
        self.live.discard(wid)
        orphans = sorted(p for p, w in owner.items() if w == wid)
        log.warning("worker %d lost; reassigning pairs %s", wid, orphans)
        if not orphans:
            return
        if not self.live:
            raise RuntimeError("all workers lost")
        ids = sorted(self.live)
        per: Dict[int, List[Tuple[int, int]]] = {w: [] for w in ids}
        for n, p in enumerate(orphans):
            target = ids[n % len(ids)]
            per[target].append((p, int(noise_indices[p])))
            owner[p] = target
        for target, pairs in per.items():
            if pairs:
                ann = TaskAnnouncement(**{**asdict(template), "pair_assignments": pairs})
                self._send_task(target, ann, theta)

    def close(self) -> None:
        for wid in sorted(self.live):
            try:
                self.channels[wid].send(message("SHUTDOWN"))
            except OSError:
                pass
        for ch in self.channels.values():
            try:
                ch.close()
            except OSError:
                pass
        if self._listener is not None:
            self._listener.close()
        for t in self._threads:
            t.join(timeout=5.0)


def _recv_with_timeout(channel, timeout: float):
    if isinstance(channel, QueueChannel):
        try:
            return channel.inbox.get(timeout=timeout)
        except queue.Empty:
            return None
    if isinstance(channel, SocketChannel):
        channel.sock.settimeout(timeout)
        try:
            return channel.recv()
        finally:
            channel.sock.settimeout(None)
    return channel.recv()


# -- worker side ------------------------------------------------------------------


def serve_worker(channel, table: Optional[NoiseTable] = None, name: str = "worker") -> int:
    """Worker loop; returns the number of iterations served.

    A shared ``table`` may be passed by in-process workers; otherwise the
    table is rebuilt from the seed in the HELLO reply.
    """
    channel.send(message("HELLO", name=name))
    hello = channel.recv()
    if hello is None or hello["type"] != "HELLO":
        raise ProtocolError("coordinator did not answer HELLO")
    meta = RunMeta.from_msg(hello)
    wid = int(hello["worker_id"])
    if table is None or table.seed != meta.noise_seed or table.length != meta.noise_len:
        table = NoiseTable(meta.noise_seed, meta.noise_len)
    mean = None
    version = None
    pending: List[TaskAnnouncement] = []
    served = 0

    def run(ann: TaskAnnouncement) -> None:
        reports = worker_execute(ann, mean, table, meta, wid)
        channel.send(message("RESULT", iteration=ann.iteration, worker_id=wid,
                             reports=[r.to_dict() for r in reports]))

    try:
        while True:
            msg = channel.recv()
            if msg is None or msg["type"] == "SHUTDOWN":
                break
            kind = msg["type"]
            if kind == "MEAN":
                mean = decode_vector(msg["params"])
                version = theta_version(mean)
                if version != msg["theta_version"]:
                    raise ProtocolError("mean payload does not match its declared version")
                ready = [a for a in pending if a.theta_version == version]
                pending = [a for a in pending if a.theta_version != version]
                for ann in ready:
                    run(ann)
                    served += 1
            elif kind == "ASSIGN":
                ann = TaskAnnouncement.from_msg(msg)
                if ann.theta_version != version:
                    pending.append(ann)
                    channel.send(message("MEAN", request=True, theta_version=ann.theta_version))
                    continue
                run(ann)
                served += 1
            elif kind == "DROP":
                pending = [a for a in pending if a.iteration != int(msg["iteration"])]
    finally:
        channel.close()
    return served


def run_tcp_worker(host: str, port: int, retries: int = 50, delay: float = 0.2) -> int:
    last = None
    for _ in range(retries):
        try:
            sock = socket.create_connection((host, port))
            break
        except OSError as exc:
            last = exc
            time.sleep(delay)
    else:
        raise ConnectionError(f"could not reach coordinator at {host}:{port}: {last}")
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return serve_worker(SocketChannel(sock))
