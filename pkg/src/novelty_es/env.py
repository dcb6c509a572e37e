"""Point-agent navigation environments with 2-D position semantics.

The agent moves ``step_scale * action`` per step.  A move whose segment
touches an interior wall, or whose end point leaves the arena, is cancelled
entirely.  Reward is progress toward the goal (previous distance minus new
distance), emitted unscaled; returns reported by :func:`run_episode` are
divided by ``reward_scale``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .novelty import BehaviorCharacteristic


class EnvInputError(ValueError):
    pass


Segment = Tuple[float, float, float, float]


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    arena: Tuple[float, float, float, float] = (0.0, 0.0, 10.0, 10.0)
    walls: Tuple[Segment, ...] = ()
    start: Tuple[float, float] = (1.0, 5.0)
    goal: Tuple[float, float] = (9.0, 5.0)
    max_steps: int = 200
    step_scale: float = 0.5
    reward_scale: float = 1000.0
    goal_radius: float = 0.5
    jitter: float = 0.05

    obs_dim = 4
    act_dim = 2

    def __post_init__(self):
        if self.max_steps < 1:
            raise EnvInputError("max_steps must be >= 1")
        for name, p in (("start", self.start), ("goal", self.goal)):
            if not _inside(self.arena, p[0], p[1]):
                raise EnvInputError(f"{name} lies outside the arena")
            if any(_point_on_segment(p[0], p[1], w) for w in self.walls):
                raise EnvInputError(f"{name} lies on a wall")

    @property
    def width(self) -> float:
        return self.arena[2] - self.arena[0]

    @property
    def height(self) -> float:
        return self.arena[3] - self.arena[1]


def _inside(arena, x: float, y: float) -> bool:
    return arena[0] <= x <= arena[2] and arena[1] <= y <= arena[3]


def _orient(ax, ay, bx, by, cx, cy) -> float:
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _on_box(ax, ay, bx, by, px, py) -> bool:
    return min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by)


def _point_on_segment(px, py, wall: Segment) -> bool:
    x0, y0, x1, y1 = wall
    return _orient(x0, y0, x1, y1, px, py) == 0.0 and _on_box(x0, y0, x1, y1, px, py)


def segments_intersect(p: Tuple[float, float], q: Tuple[float, float], wall: Segment) -> bool:
    """True when segment p-q meets the wall segment, touching included."""
    ax, ay = p
    bx, by = q
    cx, cy, dx, dy = wall
    d1 = _orient(cx, cy, dx, dy, ax, ay)
    d2 = _orient(cx, cy, dx, dy, bx, by)
    d3 = _orient(ax, ay, bx, by, cx, cy)
    d4 = _orient(ax, ay, bx, by, dx, dy)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and ((d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)):
        return True
    if d1 == 0 and _on_box(cx, cy, dx, dy, ax, ay):
        return True
    if d2 == 0 and _on_box(cx, cy, dx, dy, bx, by):
        return True
    if d3 == 0 and _on_box(ax, ay, bx, by, cx, cy):
        return True
    if d4 == 0 and _on_box(ax, ay, bx, by, dx, dy):
        return True
    return False


DECEPTIVE_MAZE = EnvSpec("DeceptiveMaze", walls=((5.0, 2.0, 5.0, 10.0),))
OPEN_FIELD = EnvSpec("OpenField")

ENVS: Dict[str, EnvSpec] = {"maze": DECEPTIVE_MAZE, "open": OPEN_FIELD}


def get_env(env_id: str) -> EnvSpec:
    try:
        return ENVS[env_id]
    except KeyError:
        raise EnvInputError(f"unknown environment {env_id!r}; known: {sorted(ENVS)}") from None


@dataclass
class EnvState:
    x: float
    y: float
    t: int = 0
    done: bool = False
    start: Tuple[float, float] = (0.0, 0.0)


def observe(spec: EnvSpec, x: float, y: float) -> np.ndarray:
    x0, y0, x1, y1 = spec.arena
    w, h = x1 - x0, y1 - y0
    return np.array([
        2.0 * (x - x0) / w - 1.0,
        2.0 * (y - y0) / h - 1.0,
        (spec.goal[0] - x) / w,
        (spec.goal[1] - y) / h,
    ])


def start_position(spec: EnvSpec, seed: Optional[int]) -> Tuple[float, float]:
    """Start point plus uniform jitter within a disc of radius ``spec.jitter``."""
    sx, sy = spec.start
    if spec.jitter <= 0 or seed is None:
        return float(sx), float(sy)
    u = np.random.Generator(np.random.PCG64(int(seed))).random(2)
    r = spec.jitter * math.sqrt(u[0])
    a = 2.0 * math.pi * u[1]
    return sx + r * math.cos(a), sy + r * math.sin(a)


def reset(spec: EnvSpec, seed: Optional[int] = None) -> Tuple[EnvState, np.ndarray]:
    x, y = start_position(spec, seed)
    return EnvState(x, y, 0, False, (x, y)), observe(spec, x, y)


def goal_distance(spec: EnvSpec, x: float, y: float) -> float:
    dx = spec.goal[0] - x
    dy = spec.goal[1] - y
    return math.sqrt(dx * dx + dy * dy)


def step(spec: EnvSpec, state: EnvState, action) -> Tuple[EnvState, np.ndarray, float, bool]:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise EnvInputError("action must be two finite reals")
    if state.done:
        raise EnvInputError("episode already finished")
    ax = min(1.0, max(-1.0, float(a[0])))
    ay = min(1.0, max(-1.0, float(a[1])))
    nx = state.x + spec.step_scale * ax
    ny = state.y + spec.step_scale * ay
    blocked = not _inside(spec.arena, nx, ny) or any(
        segments_intersect((state.x, state.y), (nx, ny), w) for w in spec.walls)
    if blocked:
        nx, ny = state.x, state.y
    before = goal_distance(spec, state.x, state.y)
    after = goal_distance(spec, nx, ny)
    t = state.t + 1
    done = after <= spec.goal_radius or t >= spec.max_steps
    new = EnvState(nx, ny, t, done, state.start)
    return new, observe(spec, nx, ny), before - after, done


@dataclass
class EpisodeResult:
    ret: float
    steps: int
    bc: BehaviorCharacteristic
    distance_traveled: float
    reached_goal: bool = False
    trajectory: Optional[List[Tuple[int, float, float, float]]] = field(default=None, repr=False)


def run_episode(policy, spec: EnvSpec, seed: Optional[int] = None, rtg_target: float = 0.0,
                log_trajectory: bool = False) -> EpisodeResult:
    """Roll out ``policy`` (a :class:`novelty_es.policy.Policy`) for one episode."""
    if policy.spec.obs_dim != spec.obs_dim or policy.spec.act_dim != spec.act_dim:
        raise EnvInputError("policy dimensions do not match the environment")
    state, obs = reset(spec, seed)
    policy.reset(obs, rtg_target)
    total = 0.0
    traj = [] if log_trajectory else None
    done = False
    while not done:
        action = policy.act(obs)
        state, obs, reward, done = step(spec, state, action)
        total += reward
        if traj is not None:
            traj.append((state.t, state.x, state.y, reward))
        if not done:
            policy.observe(action, reward / spec.reward_scale, obs)
    sx, sy = state.start
    return EpisodeResult(
        ret=total / spec.reward_scale,
        steps=state.t,
        bc=BehaviorCharacteristic(state.x, state.y),
        distance_traveled=math.hypot(state.x - sx, state.y - sy),
        reached_goal=goal_distance(spec, state.x, state.y) <= spec.goal_radius,
        trajectory=traj,
    )


@dataclass
class EvalSummary:
    mean_return: float
    mean_steps: float
    mean_distance: float
    mean_bc: BehaviorCharacteristic
    episodes: List[EpisodeResult]


def summarize(episodes: Sequence[EpisodeResult]) -> EvalSummary:
    n = len(episodes)
    if n == 0:
        raise ValueError("no episodes to summarize")
    return EvalSummary(
        mean_return=math.fsum(e.ret for e in episodes) / n,
        mean_steps=math.fsum(e.steps for e in episodes) / n,
        mean_distance=math.fsum(e.distance_traveled for e in episodes) / n,
        mean_bc=BehaviorCharacteristic(math.fsum(e.bc.x for e in episodes) / n,
                                       math.fsum(e.bc.y for e in episodes) / n),
        episodes=list(episodes),
    )


def evaluate(policy, spec: EnvSpec, n_episodes: int, seeds: Sequence[Optional[int]],
             rtg_target: float = 0.0) -> EvalSummary:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if len(seeds) != n_episodes:
        raise ValueError("need one seed per episode")
    return summarize([run_episode(policy, spec, s, rtg_target) for s in seeds])


def write_trajectory(result: EpisodeResult, path) -> None:
    if result.trajectory is None:
        raise ValueError("episode was run without trajectory logging")
    with open(path, "w", encoding="ascii") as fh:
        for t, x, y, r in result.trajectory:
            fh.write(f"{t} {x!r} {y!r} {r!r}\n")
