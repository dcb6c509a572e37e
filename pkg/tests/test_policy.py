import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from novelty_es.policy import (
    Policy, PolicyInputError, PolicySpec, StructureError, attention, devectorize, dt_forward,
    dt_spec, dt_tokens, init_params, layout, mlp_forward, mlp_spec, new_context, param_count,
    update_context, vectorize,
)
from oracles import dense_mlp, dt_oracle, mlp_weights_from_vector


def test_zero_mlp_vectorizes_to_nine_zeros():
    spec = PolicySpec("mlp", 2, 3, mlp_hidden=())
    v = vectorize(spec, {"l0.W": np.zeros((2, 3)), "l0.b": np.zeros(3)})
    assert v.shape == (9,) and not v.any()


@pytest.mark.parametrize("hidden,count", [((4,), 27), ((), 9)])
def test_param_count_small(hidden, count):
    spec = PolicySpec("mlp", 2, 3, mlp_hidden=hidden)
    assert param_count(spec) == count
    assert sum(int(np.prod(s)) for _, s in layout(spec)) == count


def test_param_count_desk_dt_matches_layout():
    spec = dt_spec(4, 2, embed=16, heads=1, layers=1, context_len=5, max_ep_len=200)
    by_hand = (
        (1 + 4 + 2) * 16 + 3 * 16      # embeddings
        + 200 * 16                      # positional table
        + 2 * 16 + 4 * (16 * 16 + 16)   # ln1 + q/k/v/o
        + 2 * 16 + 16 * 64 + 64 + 64 * 16 + 16  # ln2 + feed-forward
        + 2 * 16 + 16 * 2 + 2           # final norm + decoder
    )
    assert param_count(spec) == by_hand == 6706
    assert init_params(spec, np.random.default_rng(0)).shape == (6706,)


def test_vectorize_rejects_bad_shapes():
    spec = PolicySpec("mlp", 2, 3, mlp_hidden=())
    with pytest.raises(StructureError):
        vectorize(spec, {"l0.W": np.zeros((3, 2)), "l0.b": np.zeros(3)})
    with pytest.raises(StructureError):
        devectorize(spec, np.zeros(8))


@pytest.mark.parametrize("spec", [
    mlp_spec(4, 2), PolicySpec("mlp", 3, 1, mlp_hidden=(5, 7, 2)),
    dt_spec(4, 2, embed=8, heads=2, layers=2, context_len=3, max_ep_len=20),
])
def test_round_trip_hundred_vectors(spec):
    rng = np.random.default_rng(1)
    for _ in range(100):
        v = rng.standard_normal(param_count(spec))
        assert np.array_equal(vectorize(spec, devectorize(spec, v)), v)


def test_spec_invariants():
    with pytest.raises(StructureError):
        PolicySpec("dt", 4, 2, dt_embed_dim=10, dt_heads=3)
    with pytest.raises(StructureError):
        PolicySpec("mlp", 0, 2)
    s = dt_spec(4, 2)
    assert PolicySpec.from_pairs(dict(s.to_pairs())) == s


def test_mlp_zero_params_zero_action():
    spec = mlp_spec(4, 2)
    assert not mlp_forward(spec, np.zeros(param_count(spec)), [0.3, -2, 5, 1]).any()


def test_mlp_saturates():
    spec = PolicySpec("mlp", 1, 1, mlp_hidden=())
    assert mlp_forward(spec, np.array([0.0, 5.0]), [3.0])[0] >= 0.999


def test_mlp_matches_dense_oracle():
    spec = PolicySpec("mlp", 4, 2, mlp_hidden=(8,))
    rng = np.random.default_rng(2)
    v = rng.standard_normal(param_count(spec))
    obs = rng.standard_normal(4)
    want = dense_mlp(mlp_weights_from_vector(v, [4, 8, 2]), obs)
    assert np.allclose(mlp_forward(spec, v, obs), want, rtol=0, atol=1e-12)


def test_mlp_rejects_non_finite_observation():
    spec = mlp_spec(4, 2)
    with pytest.raises(PolicyInputError):
        mlp_forward(spec, np.zeros(param_count(spec)), [np.nan, 0, 0, 0])


def test_attention_singleton_returns_value():
    v = np.array([[1.5, -2.0]])
    assert np.array_equal(attention(np.array([[9.0, 1.0]]), np.array([[-3.0, 4.0]]), v), v)


def test_attention_uniform_is_mean():
    q = np.zeros((2, 3))
    v = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    out = attention(q, np.ones((2, 3)), v)
    assert np.allclose(out, [[2.0, 2.0, 2.0]] * 2, atol=1e-15)


def test_attention_causal_prefix_unchanged():
    rng = np.random.default_rng(3)
    q, k, v = (rng.standard_normal((3, 4)) for _ in range(3))
    base = attention(q, k, v, causal=True)
    for arr in (q, k, v):
        arr[2] += 5.0
    again = attention(q, k, v, causal=True)
    assert np.array_equal(base[:2], again[:2])


def _random_dt(seed, **kw):
    spec = dt_spec(4, 2, **kw)
    rng = np.random.default_rng(seed)
    params = 0.5 * rng.standard_normal(param_count(spec))
    return spec, params, rng


def _rollout_context(spec, rng, steps, rtg=0.0075):
    ctx = new_context(spec, rtg, rng.standard_normal(4))
    for _ in range(steps):
        ctx = update_context(ctx, rng.uniform(-1, 1, 2), rng.normal(0, 1e-3), rng.standard_normal(4))
    return ctx


def test_dt_zero_params_zero_action():
    spec = dt_spec(4, 2)
    ctx = new_context(spec, 7.0, np.ones(4))
    assert not dt_forward(spec, np.zeros(param_count(spec)), ctx).any()


def test_dt_deterministic():
    spec, params, rng = _random_dt(4)
    ctx = _rollout_context(spec, rng, 3)
    assert np.array_equal(dt_forward(spec, params, ctx), dt_forward(spec, params, ctx))


@pytest.mark.parametrize("kw", [
    dict(embed=16, heads=1, layers=1, context_len=5),
    dict(embed=8, heads=2, layers=2, context_len=4),
])
def test_dt_matches_token_oracle(kw):
    spec, params, rng = _random_dt(5, max_ep_len=50, **kw)
    ctx = _rollout_context(spec, rng, 3)
    w = devectorize(spec, params)
    want = dt_oracle(w, spec.dt_layers, spec.dt_heads, ctx.triplets, ctx.current_rtg,
                     ctx.current_obs, ctx.timestep)
    assert np.allclose(dt_forward(spec, params, ctx), want, rtol=0, atol=1e-10)


def test_update_context_rtg_and_window():
    spec = dt_spec(4, 2, context_len=2)
    ctx = new_context(spec, 7.0, np.zeros(4))
    ctx = update_context(ctx, [0.1, 0.2], 0.5, np.ones(4))
    assert ctx.current_rtg == 6.5
    same = update_context(ctx, [0.0, 0.0], 0.0, np.ones(4))
    assert same.current_rtg == 6.5
    third = update_context(same, [0.0, 0.0], 0.25, np.ones(4))
    assert len(third) == 2 and third.timestep == 3


def test_context_longer_than_k_rejected():
    spec = dt_spec(4, 2, context_len=3)
    big = dt_spec(4, 2, context_len=6)
    rng = np.random.default_rng(0)
    ctx = _rollout_context(big, rng, 5)
    with pytest.raises(StructureError):
        dt_forward(spec, np.zeros(param_count(spec)), ctx)


def test_positional_row_shared_by_three_tokens():
    spec = dt_spec(4, 2, embed=8, context_len=3, max_ep_len=10)
    rng = np.random.default_rng(6)
    params = rng.standard_normal(param_count(spec))
    w = devectorize(spec, params)
    assert w["pos"].shape == (spec.dt_max_ep_len, spec.dt_embed_dim)
    ctx = _rollout_context(spec, rng, 4)
    # with the token embeddings zeroed, each token is exactly its positional offset
    silent = {k: (np.zeros_like(v) if k.startswith("emb_") else v) for k, v in w.items()}
    added, _ = dt_tokens(spec, silent, ctx, ctx.current_obs)
    t0 = ctx.timestep - (len(ctx) - 1)
    for i in range(len(ctx)):
        for c in range(3):
            assert np.array_equal(added[3 * i + c], w["pos"][t0 + i])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 7), cut=st.integers(0, 6))
def test_causality_future_tokens_do_not_change_past_actions(seed, steps, cut):
    """Outputs at timesteps up to ``cut`` ignore every token after them."""
    from novelty_es.policy import dt_hidden
    spec, params, rng = _random_dt(seed, context_len=8, max_ep_len=20)
    w = devectorize(spec, params)
    cut = min(cut, steps - 1)
    moves = [(rng.uniform(-1, 1, 2), rng.normal(0, 1e-3), rng.standard_normal(4)) for _ in range(steps)]
    start = new_context(spec, 0.01, rng.standard_normal(4))
    orig = alt = start
    for i, (a, r, o) in enumerate(moves):
        orig = update_context(orig, a, r, o)
        if i < cut:
            alt = update_context(alt, a, r, o)
        else:  # timestep ``cut``'s action and everything later differ
            alt = update_context(alt, a * -0.5, r + 1.0, o + 3.0)
    out_o = dt_hidden(spec, w, dt_tokens(spec, w, orig, orig.current_obs)[0])
    out_a = dt_hidden(spec, w, dt_tokens(spec, w, alt, alt.current_obs)[0])
    for t in range(cut + 1):
        s = 3 * t + 1  # state token of timestep t
        act_o = np.tanh(out_o[s] @ w["dec.W"] + w["dec.b"])
        act_a = np.tanh(out_a[s] @ w["dec.W"] + w["dec.b"])
        assert np.array_equal(act_o, act_a)
    assert not np.array_equal(out_o[3 * cut + 2:], out_a[3 * cut + 2:])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_actions_in_open_interval(seed):
    rng = np.random.default_rng(seed)
    for spec in (mlp_spec(4, 2), dt_spec(4, 2, embed=8, context_len=3, max_ep_len=10)):
        params = 0.3 * rng.standard_normal(param_count(spec))
        pol = Policy(spec, params)
        obs = rng.standard_normal(4)
        pol.reset(obs, 0.5)
        a = pol.act(obs)
        assert np.all(np.abs(a) < 1.0)


def test_rtg_telescoping_over_episode():
    from novelty_es.env import DECEPTIVE_MAZE, run_episode
    spec, params, _ = _random_dt(7)
    pol = Policy(spec, params)
    res = run_episode(pol, DECEPTIVE_MAZE, seed=3, rtg_target=7.0, log_trajectory=True)
    rewards = [r / DECEPTIVE_MAZE.reward_scale for *_, r in res.trajectory]
    # the final reward is never fed back into the context
    assert abs((7.0 - math.fsum(rewards[:-1])) - pol.context.current_rtg) <= 1e-9
