import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from novelty_es.env import (
    DECEPTIVE_MAZE, OPEN_FIELD, EnvInputError, EnvSpec, evaluate, get_env, reset, run_episode,
    segments_intersect, start_position, step, write_trajectory,
)
from novelty_es.policy import Policy, mlp_spec, param_count
from oracles import segments_cross


class Scripted:
    """Policy stand-in driven by a function of the raw position."""

    def __init__(self, fn, env=DECEPTIVE_MAZE):
        self.spec = mlp_spec(4, 2)
        self.fn = fn
        self.env = env

    def reset(self, obs, rtg):
        pass

    def observe(self, *a):
        pass

    def act(self, obs):
        x0, y0, x1, y1 = self.env.arena
        x = (obs[0] + 1) / 2 * (x1 - x0) + x0
        y = (obs[1] + 1) / 2 * (y1 - y0) + y0
        return np.asarray(self.fn(x, y), dtype=float)


def test_reset_deterministic_and_jitter_bounded():
    a, b = reset(DECEPTIVE_MAZE, 11), reset(DECEPTIVE_MAZE, 11)
    assert np.array_equal(a[1], b[1])
    for s in range(200):
        x, y = start_position(DECEPTIVE_MAZE, s)
        assert math.hypot(x - 1, y - 5) <= 0.05


def test_zero_jitter_start_exact():
    env = EnvSpec("x", jitter=0.0)
    state, obs = reset(env, 5)
    assert (state.x, state.y) == (1.0, 5.0)
    assert np.array_equal(obs, [2 * 1 / 10 - 1, 0.0, 0.8, 0.0])


def test_observation_range_scan():
    rng = np.random.default_rng(0)
    for s in rng.integers(0, 2**62, 10_000):
        _, obs = reset(DECEPTIVE_MAZE, int(s))
        assert np.all(np.abs(obs) <= 1.0)
    state, _ = reset(DECEPTIVE_MAZE, 0)
    for _ in range(300):
        if state.done:
            state, _ = reset(DECEPTIVE_MAZE, 0)
        state, obs, _, _ = step(DECEPTIVE_MAZE, state, rng.uniform(-1, 1, 2))
        assert np.all(np.abs(obs) <= 1.0)


def test_zero_action_no_move_no_reward():
    state, _ = reset(OPEN_FIELD, 1)
    new, _, r, _ = step(OPEN_FIELD, state, [0.0, 0.0])
    assert (new.x, new.y) == (state.x, state.y) and r == 0.0


def test_straight_toward_goal_reward_is_step_scale():
    env = EnvSpec("open", jitter=0.0)
    state, _ = reset(env)
    _, _, r, _ = step(env, state, [1.0, 0.0])
    assert r == pytest.approx(0.5, abs=1e-15)


def test_wall_blocks_crossing_move():
    env = EnvSpec("m", walls=((5.0, 2.0, 5.0, 10.0),), jitter=0.0)
    state, _ = reset(env)
    state.x, state.y = 4.8, 5.0
    assert segments_cross((4.8, 5.0), (5.3, 5.0), (5.0, 2.0), (5.0, 10.0))
    new, _, r, _ = step(env, state, [1.0, 0.0])
    assert (new.x, new.y) == (4.8, 5.0) and r == 0.0


def test_non_finite_action_rejected():
    state, _ = reset(DECEPTIVE_MAZE, 0)
    with pytest.raises(EnvInputError):
        step(DECEPTIVE_MAZE, state, [math.nan, 0.0])


def test_action_clamped():
    env = EnvSpec("open", jitter=0.0)
    state, _ = reset(env)
    new, *_ = step(env, state, [7.0, 0.0])
    assert new.x == 1.5


pts = st.tuples(st.integers(-6, 6).map(float), st.integers(-6, 6).map(float))


@settings(max_examples=500, deadline=None)
@given(pts, pts, pts, pts)
def test_segment_test_matches_parametric_oracle(p, q, a, b):
    if a == b:
        return
    assert segments_intersect(p, q, (*a, *b)) == segments_cross(p, q, a, b)


@settings(max_examples=300, deadline=None)
@given(st.tuples(st.floats(0, 10), st.floats(0, 10)), st.tuples(st.floats(0, 10), st.floats(0, 10)))
def test_segment_test_matches_oracle_on_maze_wall(p, q):
    wall = DECEPTIVE_MAZE.walls[0]
    assert segments_intersect(p, q, wall) == segments_cross(p, q, wall[:2], wall[2:])


def test_max_steps_bounds():
    with pytest.raises(EnvInputError):
        EnvSpec("x", max_steps=0)
    env = EnvSpec("x", max_steps=1)
    res = run_episode(Scripted(lambda x, y: (0, 0)), env, 0)
    assert res.steps == 1


def test_frozen_policy_stays_at_start():
    spec = mlp_spec(4, 2)
    res = run_episode(Policy(spec, np.zeros(param_count(spec))), DECEPTIVE_MAZE, 3)
    assert math.hypot(res.bc.x - 1, res.bc.y - 5) <= 0.05 and res.ret == 0.0 and res.steps == 200


def test_go_right_reaches_goal_in_fifteen_steps():
    env = EnvSpec("open", jitter=0.0)
    res = run_episode(Scripted(lambda x, y: (1, 0), env), env, 0)
    assert res.reached_goal and res.steps == math.ceil((8 - 0.5) / 0.5) == 15


def test_evaluate_means():
    env = get_env("open")
    pol = Scripted(lambda x, y: (0.3, 0.1), env)
    one = run_episode(pol, env, 4)
    summ = evaluate(pol, env, 1, [4])
    assert summ.mean_return == one.ret and summ.mean_bc == one.bc
    same = evaluate(pol, env, 5, [4] * 5)
    assert np.var([e.ret for e in same.episodes]) == 0
    mixed = evaluate(pol, env, 3, [1, 2, 3])
    assert mixed.mean_steps == pytest.approx(np.mean([e.steps for e in mixed.episodes]))
    assert mixed.mean_distance == pytest.approx(np.mean([e.distance_traveled for e in mixed.episodes]))
    assert mixed.mean_bc.x == pytest.approx(np.mean([e.bc.x for e in mixed.episodes]))


def test_greedy_fails_and_waypoints_succeed():
    env = DECEPTIVE_MAZE

    def greedy(x, y):
        d = np.array([9 - x, 5 - y])
        return d / max(np.linalg.norm(d), 1e-12)

    res = run_episode(Scripted(greedy), env, 0)
    assert not res.reached_goal

    def waypoints(x, y):
        if x < 5.5 and y > 1.0:      # head down toward the gap
            return (0.5, -1.0)
        if x < 5.5:                  # through the gap below the wall
            return (1.0, 0.0)
        d = np.array([9 - x, 5 - y])  # then straight to the goal
        return d / np.abs(d).max()

    res = run_episode(Scripted(waypoints), env, 0)
    assert res.reached_goal and res.steps <= 60


def _replay_safe(res, env):
    prev = (res.trajectory[0][1], res.trajectory[0][2])
    for _, x, y, _ in res.trajectory[1:]:
        if (x, y) != prev:
            for w in env.walls:
                assert not segments_cross(prev, (x, y), w[:2], w[2:])
        prev = (x, y)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_wall_safety_and_bc_is_last_position(seed):
    spec = mlp_spec(4, 2)
    params = np.random.default_rng(seed).standard_normal(param_count(spec))
    res = run_episode(Policy(spec, params), DECEPTIVE_MAZE, seed, log_trajectory=True)
    _replay_safe(res, DECEPTIVE_MAZE)
    assert (res.bc.x, res.bc.y) == res.trajectory[-1][1:3]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_open_field_return_telescopes(seed):
    spec = mlp_spec(4, 2)
    params = np.random.default_rng(seed).standard_normal(param_count(spec))
    env = OPEN_FIELD
    res = run_episode(Policy(spec, params), env, seed)
    sx, sy = start_position(env, seed)
    d0 = math.hypot(9 - sx, 5 - sy)
    d1 = math.hypot(9 - res.bc.x, 5 - res.bc.y)
    assert abs(res.ret * env.reward_scale - (d0 - d1)) <= 1e-9


def test_trajectory_file(tmp_path):
    env = EnvSpec("open", jitter=0.0)
    res = run_episode(Scripted(lambda x, y: (1, 0), env), env, 0, log_trajectory=True)
    write_trajectory(res, tmp_path / "t.txt")
    lines = (tmp_path / "t.txt").read_text().splitlines()
    assert len(lines) == 15 and lines[0].split()[0] == "1"
    t, x, y, r = lines[-1].split()
    assert float(x) == res.bc.x and float(y) == res.bc.y
