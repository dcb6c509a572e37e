"""Compiled batch rollouts for many genomes at once.

Each genome is simulated in its own outer-loop iteration with fixed
summation orders, so a genome's result does not depend on which other
genomes share the batch.  That property is what keeps distributed runs
bit-identical across worker counts.

The semantics mirror :func:`novelty_es.env.step` and the reference forward
passes in :mod:`novelty_es.policy`; tests compare the two paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .env import EnvSpec, start_position
from .policy import PolicySpec, layout, offsets, LN_EPS

LN_EPS_C = LN_EPS

# -- environment ------------------------------------------------------------


@njit(cache=True)
def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


@njit(cache=True)
def _on_box(ax, ay, bx, by, px, py):
    return min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by)


@njit(cache=True)
def _crosses(ax, ay, bx, by, cx, cy, dx, dy):
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


@njit(cache=True)
def _move(x, y, ax, ay, walls, arena, step_scale):
    ax = min(1.0, max(-1.0, ax))
    ay = min(1.0, max(-1.0, ay))
    nx = x + step_scale * ax
    ny = y + step_scale * ay
    if not (arena[0] <= nx <= arena[2] and arena[1] <= ny <= arena[3]):
        return x, y
    for w in range(walls.shape[0]):
        if _crosses(x, y, nx, ny, walls[w, 0], walls[w, 1], walls[w, 2], walls[w, 3]):
            return x, y
    return nx, ny


@njit(cache=True)
def _goal_dist(x, y, goal):
    dx = goal[0] - x
    dy = goal[1] - y
    return math.sqrt(dx * dx + dy * dy)


@njit(cache=True)
def _observe(x, y, arena, goal, out):
    w = arena[2] - arena[0]
    h = arena[3] - arena[1]
    out[0] = 2.0 * (x - arena[0]) / w - 1.0
    out[1] = 2.0 * (y - arena[1]) / h - 1.0
    out[2] = (goal[0] - x) / w
    out[3] = (goal[1] - y) / h


# -- dense helpers ------------------------------------------------------------


@njit(cache=True)
def _affine(p, w_off, b_off, x, n_in, n_out, out):
    """out = x @ W + b with W stored (n_in, n_out) row-major at p[w_off]."""
    for j in range(n_out):
        out[j] = 0.0
    for i in range(n_in):
        xi = x[i]
        base = w_off + i * n_out
        for j in range(n_out):
            out[j] += xi * p[base + j]
    for j in range(n_out):
        out[j] += p[b_off + j]


@njit(cache=True)
def _layer_norm(x, n, g_off, b_off, p, out):
    mu = 0.0
    for i in range(n):
        mu += x[i]
    mu /= n
    var = 0.0
    for i in range(n):
        d = x[i] - mu
        var += d * d
    var /= n
    inv = 1.0 / math.sqrt(var + LN_EPS_C)
    for i in range(n):
        out[i] = (x[i] - mu) * inv * p[g_off + i] + p[b_off + i]


# -- MLP ----------------------------------------------------------------------


@njit(cache=True)
def _mlp_act(p, sizes, offs, obs, buf_a, buf_b, action):
    n_layers = sizes.shape[0] - 1
    for i in range(sizes[0]):
        buf_a[i] = obs[i]
    for layer in range(n_layers):
        _affine(p, offs[2 * layer], offs[2 * layer + 1], buf_a, sizes[layer], sizes[layer + 1], buf_b)
        for j in range(sizes[layer + 1]):
            buf_a[j] = math.tanh(buf_b[j])
    for j in range(sizes[n_layers]):
        action[j] = buf_a[j]


@njit(cache=True)
def _rollout_mlp(params, sizes, offs, obs_mean, obs_std, starts, walls, arena, goal,
                 step_scale, goal_radius, max_steps, ret, final, steps, reached):
    width = 0
    for s in sizes:
        width = max(width, s)
    obs = np.empty(4)
    nobs = np.empty(4)
    buf_a = np.empty(width)
    buf_b = np.empty(width)
    action = np.empty(2)
    for n in range(params.shape[0]):
        p = params[n]
        x = starts[n, 0]
        y = starts[n, 1]
        total = 0.0
        t = 0
        hit = False
        while True:
            _observe(x, y, arena, goal, obs)
            for i in range(4):
                nobs[i] = (obs[i] - obs_mean[i]) / obs_std[i]
            _mlp_act(p, sizes, offs, nobs, buf_a, buf_b, action)
            before = _goal_dist(x, y, goal)
            x, y = _move(x, y, action[0], action[1], walls, arena, step_scale)
            after = _goal_dist(x, y, goal)
            total += before - after
            t += 1
            if after <= goal_radius:
                hit = True
                break
            if t >= max_steps:
                break
        ret[n] = total
        final[n, 0] = x
        final[n, 1] = y
        steps[n] = t
        reached[n] = hit


# -- Decision Transformer -------------------------------------------------------
# offs holds the layout offsets in genome order:
#   0 emb_rtg.W 1 emb_rtg.b 2 emb_obs.W 3 emb_obs.b 4 emb_act.W 5 emb_act.b 6 pos
#   7 + 16*l + {0 ln1.g 1 ln1.b 2 Wq 3 bq 4 Wk 5 bk 6 Wv 7 bv 8 Wo 9 bo
#               10 ln2.g 11 ln2.b 12 W1 13 b1 14 W2 15 b2}
#   7 + 16*L + {0 ln_f.g 1 ln_f.b 2 dec.W 3 dec.b}


@njit(cache=True)
def _embed(p, offs, kind, vec, dim, t, E, out):
    """Token embedding plus the positional row of timestep ``t``."""
    w_off = offs[2 * kind]
    b_off = offs[2 * kind + 1]
    _affine(p, w_off, b_off, vec, dim, E, out)
    pos = offs[6] + t * E
    for j in range(E):
        out[j] += p[pos + j]


@njit(cache=True)
def _attend(q, keys, vals, n, E, H, out, logits):
    """Scaled dot-product attention of one query against rows 0..n-1."""
    dh = E // H
    scale = 1.0 / math.sqrt(dh)
    for h in range(H):
        lo = h * dh
        m = -np.inf
        for r in range(n):
            s = 0.0
            for j in range(dh):
                s += q[lo + j] * keys[r, lo + j]
            s *= scale
            logits[r] = s
            if s > m:
                m = s
        tot = 0.0
        for r in range(n):
            logits[r] = math.exp(logits[r] - m)
            tot += logits[r]
        for j in range(dh):
            out[lo + j] = 0.0
        for r in range(n):
            wr = logits[r] / tot
            for j in range(dh):
                out[lo + j] += wr * vals[r, lo + j]


@njit(cache=True)
def _dt_head(p, offs, x, L, E, act_dim, ws, action):
    """Feed-forward + final norm + decoder for the last-layer row ``x`` (in place)."""
    base = 7 + 16 * (L - 1)
    h = ws[0]
    f1 = ws[1]
    f2 = ws[2]
    _layer_norm(x, E, offs[base + 10], offs[base + 11], p, h)
    _affine(p, offs[base + 12], offs[base + 13], h, E, 4 * E, f1)
    for j in range(4 * E):
        f1[j] = math.tanh(f1[j])
    _affine(p, offs[base + 14], offs[base + 15], f1, 4 * E, E, f2)
    for j in range(E):
        x[j] += f2[j]
    top = 7 + 16 * L
    _layer_norm(x, E, offs[top], offs[top + 1], p, h)
    _affine(p, offs[top + 2], offs[top + 3], h, E, act_dim, f2)
    for j in range(act_dim):
        action[j] = math.tanh(f2[j])


@njit(cache=True)
def _dt_window_act(p, offs, L, E, H, obs_dim, act_dim, rtg, obs, act, t0, T, action,
                   X, Q, Kx, Vx, A, logits, row, ws):
    """Full forward over a window of T timesteps starting at absolute step t0.

    rtg/obs/act hold the window oldest first; the action of the last
    timestep is not read (it is the pending placeholder and cannot affect
    the last state token under the causal mask).
    """
    n = 3 * T - 1
    for i in range(T):
        _embed(p, offs, 0, rtg[i:i + 1], 1, t0 + i, E, X[3 * i])
        _embed(p, offs, 1, obs[i], obs_dim, t0 + i, E, X[3 * i + 1])
        if i < T - 1:
            _embed(p, offs, 2, act[i], act_dim, t0 + i, E, X[3 * i + 2])
    for l in range(L):
        base = 7 + 16 * l
        last = l == L - 1
        for r in range(n):
            _layer_norm(X[r], E, offs[base], offs[base + 1], p, row)
            _affine(p, offs[base + 4], offs[base + 5], row, E, E, Kx[r])
            _affine(p, offs[base + 6], offs[base + 7], row, E, E, Vx[r])
            if (not last) or r == n - 1:
                _affine(p, offs[base + 2], offs[base + 3], row, E, E, Q[r])
        lo = n - 1 if last else 0
        for r in range(lo, n):
            _attend(Q[r], Kx, Vx, r + 1, E, H, A[r], logits)
        for r in range(lo, n):
            _affine(p, offs[base + 8], offs[base + 9], A[r], E, E, row)
            for j in range(E):
                X[r, j] += row[j]
        if not last:
            # feed-forward for every row of an inner layer
            h = ws[0]
            f1 = ws[1]
            f2 = ws[2]
            for r in range(n):
                _layer_norm(X[r], E, offs[base + 10], offs[base + 11], p, h)
                _affine(p, offs[base + 12], offs[base + 13], h, E, 4 * E, f1)
                for j in range(4 * E):
                    f1[j] = math.tanh(f1[j])
                _affine(p, offs[base + 14], offs[base + 15], f1, 4 * E, E, f2)
                for j in range(E):
                    X[r, j] += f2[j]
    _dt_head(p, offs, X[n - 1], L, E, act_dim, ws, action)


@njit(cache=True)
def _dt_forward_batch(params, offs, L, E, H, obs_dim, act_dim, rtg, obs, act, t0, T, out):
    """Forward every genome on every stored window: out[genome, window, :]."""
    K = rtg.shape[1]
    n_max = 3 * K
    X = np.empty((n_max, E))
    Q = np.empty((n_max, E))
    Kx = np.empty((n_max, E))
    Vx = np.empty((n_max, E))
    A = np.empty((n_max, E))
    logits = np.empty(n_max)
    row = np.empty(E)
    ws = np.empty((3, 4 * E))
    action = np.empty(act_dim)
    for g in range(params.shape[0]):
        for s in range(rtg.shape[0]):
            _dt_window_act(params[g], offs, L, E, H, obs_dim, act_dim, rtg[s], obs[s], act[s],
                           t0[s], T[s], action, X, Q, Kx, Vx, A, logits, row, ws)
            for j in range(act_dim):
                out[g, s, j] = action[j]


@njit(cache=True)
def _rollout_dt(params, offs, L, E, H, K, act_dim, obs_mean, obs_std, starts, walls, arena,
                goal, step_scale, goal_radius, max_steps, rtg_target, reward_scale,
                ret, final, steps, reached, record, rec_obs, rec_act):
    obs_dim = 4
    n_max = 3 * K
    # cached path (single layer): per-token keys/values never change
    Kc = np.empty((n_max, E))
    Vc = np.empty((n_max, E))
    Kw = np.empty((n_max, E))
    Vw = np.empty((n_max, E))
    # full-recompute path buffers
    X = np.empty((n_max, E))
    Q = np.empty((n_max, E))
    A = np.empty((n_max, E))
    w_rtg = np.empty(K)
    w_obs = np.empty((K, obs_dim))
    w_act = np.empty((K, act_dim))
    logits = np.empty(n_max)
    row = np.empty(E)
    tok = np.empty(E)
    xs = np.empty(E)
    q = np.empty(E)
    att = np.empty(E)
    ws = np.empty((3, 4 * E))
    obs = np.empty(obs_dim)
    nobs = np.empty(obs_dim)
    action = np.empty(act_dim)
    prev_act = np.empty(act_dim)
    g1 = np.empty(1)
    for n in range(params.shape[0]):
        p = params[n]
        x = starts[n, 0]
        y = starts[n, 1]
        total = 0.0
        rtg = rtg_target
        t = 0
        hit = False
        while True:
            _observe(x, y, arena, goal, obs)
            for i in range(obs_dim):
                nobs[i] = (obs[i] - obs_mean[i]) / obs_std[i]
            t0 = t - K + 1
            if t0 < 0:
                t0 = 0
            T = t - t0 + 1
            slot = t % K
            if L == 1:
                ln_g = offs[7]
                ln_b = offs[8]
                if t > 0 and K > 1:
                    ps = (t - 1) % K
                    _embed(p, offs, 2, prev_act, act_dim, t - 1, E, tok)
                    _layer_norm(tok, E, ln_g, ln_b, p, row)
                    _affine(p, offs[11], offs[12], row, E, E, Kc[3 * ps + 2])
                    _affine(p, offs[13], offs[14], row, E, E, Vc[3 * ps + 2])
                g1[0] = rtg
                _embed(p, offs, 0, g1, 1, t, E, tok)
                _layer_norm(tok, E, ln_g, ln_b, p, row)
                _affine(p, offs[11], offs[12], row, E, E, Kc[3 * slot])
                _affine(p, offs[13], offs[14], row, E, E, Vc[3 * slot])
                _embed(p, offs, 1, nobs, obs_dim, t, E, xs)
                _layer_norm(xs, E, ln_g, ln_b, p, row)
                _affine(p, offs[11], offs[12], row, E, E, Kc[3 * slot + 1])
                _affine(p, offs[13], offs[14], row, E, E, Vc[3 * slot + 1])
                _affine(p, offs[9], offs[10], row, E, E, q)
                # gather the window oldest first
                nt = 0
                for i in range(T):
                    sl = (t0 + i) % K
                    last_ts = i == T - 1
                    for c in range(3):
                        if last_ts and c == 2:
                            break
                        for j in range(E):
                            Kw[nt, j] = Kc[3 * sl + c, j]
                            Vw[nt, j] = Vc[3 * sl + c, j]
                        nt += 1
                _attend(q, Kw, Vw, nt, E, H, att, logits)
                _affine(p, offs[15], offs[16], att, E, E, row)
                for j in range(E):
                    xs[j] += row[j]
                _dt_head(p, offs, xs, 1, E, act_dim, ws, action)
            else:
                w_rtg[slot] = rtg
                for j in range(obs_dim):
                    w_obs[slot, j] = nobs[j]
                if t > 0 and K > 1:
                    for j in range(act_dim):
                        w_act[(t - 1) % K, j] = prev_act[j]
                # unroll the ring into chronological order in the X-side buffers
                wr = np.empty(T)
                wo = np.empty((T, obs_dim))
                wa = np.empty((T, act_dim))
                for i in range(T):
                    sl = (t0 + i) % K
                    wr[i] = w_rtg[sl]
                    for j in range(obs_dim):
                        wo[i, j] = w_obs[sl, j]
                    for j in range(act_dim):
                        wa[i, j] = w_act[sl, j]
                _dt_window_act(p, offs, L, E, H, obs_dim, act_dim, wr, wo, wa, t0, T, action,
                               X, Q, Kw, Vw, A, logits, row, ws)
            if record:
                for j in range(obs_dim):
                    rec_obs[n, t, j] = nobs[j]
                for j in range(act_dim):
                    rec_act[n, t, j] = action[j]
            before = _goal_dist(x, y, goal)
            x, y = _move(x, y, action[0], action[1], walls, arena, step_scale)
            after = _goal_dist(x, y, goal)
            reward = before - after
            total += reward
            rtg = rtg - reward / reward_scale
            for j in range(act_dim):
                prev_act[j] = action[j]
            t += 1
            if after <= goal_radius:
                hit = True
                break
            if t >= max_steps:
                break
        ret[n] = total
        final[n, 0] = x
        final[n, 1] = y
        steps[n] = t
        reached[n] = hit


# -- Python-facing wrappers ------------------------------------------------------


@dataclass
class BatchResult:
    """Per-genome episode outcomes; ``ret`` is in scaled units."""

    ret: np.ndarray
    final: np.ndarray
    steps: np.ndarray
    reached: np.ndarray
    start: np.ndarray

    @property
    def distance(self) -> np.ndarray:
        return np.hypot(self.final[:, 0] - self.start[:, 0], self.final[:, 1] - self.start[:, 1])


def layout_offsets(spec: PolicySpec) -> np.ndarray:
    off = offsets(spec)
    return np.array([off[name][0] for name, _ in layout(spec)], dtype=np.int64)


def _env_arrays(env: EnvSpec):
    walls = np.array(env.walls, dtype=np.float64).reshape(-1, 4)
    return walls, np.array(env.arena, dtype=np.float64), np.array(env.goal, dtype=np.float64)


def _norm_arrays(obs_mean, obs_std, dim):
    if obs_mean is None:
        return np.zeros(dim), np.ones(dim)
    return np.asarray(obs_mean, dtype=np.float64), np.asarray(obs_std, dtype=np.float64)


def rollout_batch(spec: PolicySpec, params: np.ndarray, env: EnvSpec,
                  seeds: Sequence[Optional[int]], rtg_target: float = 0.0,
                  obs_mean=None, obs_std=None, record: bool = False):
    """One episode per row of ``params`` with the matching episode seed.

    With ``record`` set, also returns the normalized observations and actions
    seen at every step (padded arrays of shape ``(N, max_steps, dim)``).
    """
    params = np.ascontiguousarray(np.atleast_2d(params), dtype=np.float64)
    N = params.shape[0]
    if len(seeds) != N:
        raise ValueError("need one seed per genome")
    starts = np.array([start_position(env, s) for s in seeds], dtype=np.float64).reshape(N, 2)
    walls, arena, goal = _env_arrays(env)
    mean, std = _norm_arrays(obs_mean, obs_std, spec.obs_dim)
    ret = np.empty(N)
    final = np.empty((N, 2))
    steps = np.empty(N, dtype=np.int64)
    reached = np.empty(N, dtype=np.bool_)
    offs = layout_offsets(spec)
    if spec.kind == "mlp":
        if record:
            raise ValueError("recording is only implemented for the transformer rollout")
        sizes = np.array([spec.obs_dim, *spec.mlp_hidden, spec.act_dim], dtype=np.int64)
        _rollout_mlp(params, sizes, offs, mean, std, starts, walls, arena, goal,
                     float(env.step_scale), float(env.goal_radius), int(env.max_steps),
                     ret, final, steps, reached)
        rec = None
    else:
        if env.max_steps > spec.dt_max_ep_len:
            raise ValueError("episode length exceeds the transformer's positional table")
        shape = (N, env.max_steps) if record else (1, 1)
        rec_obs = np.zeros(shape + (spec.obs_dim,))
        rec_act = np.zeros(shape + (spec.act_dim,))
        _rollout_dt(params, offs, spec.dt_layers, spec.dt_embed_dim, spec.dt_heads,
                    spec.dt_context_len, spec.act_dim, mean, std, starts, walls, arena, goal,
                    float(env.step_scale), float(env.goal_radius), int(env.max_steps),
                    float(rtg_target), float(env.reward_scale), ret, final, steps, reached,
                    record, rec_obs, rec_act)
        rec = (rec_obs, rec_act) if record else None
    out = BatchResult(ret / env.reward_scale, final, steps, reached, starts)
    return (out, rec) if record else out


def dt_forward_windows(spec: PolicySpec, params: np.ndarray, rtg: np.ndarray, obs: np.ndarray,
                       act: np.ndarray, t0: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Actions of every genome on every stored context window.

    Windows are padded to ``K`` timesteps, oldest first; ``T[s]`` gives the
    valid length and ``t0[s]`` the absolute timestep of the first entry.
    """
    params = np.ascontiguousarray(np.atleast_2d(params), dtype=np.float64)
    out = np.empty((params.shape[0], rtg.shape[0], spec.act_dim))
    _dt_forward_batch(params, layout_offsets(spec), spec.dt_layers, spec.dt_embed_dim,
                      spec.dt_heads, spec.obs_dim, spec.act_dim,
                      np.ascontiguousarray(rtg, dtype=np.float64),
                      np.ascontiguousarray(obs, dtype=np.float64),
                      np.ascontiguousarray(act, dtype=np.float64),
                      np.ascontiguousarray(t0, dtype=np.int64),
                      np.ascontiguousarray(T, dtype=np.int64), out)
    return out


def mlp_forward_batch(spec: PolicySpec, params: np.ndarray, observations: np.ndarray) -> np.ndarray:
    """Actions of every genome on every observation row: ``(G, S, act_dim)``."""
    params = np.ascontiguousarray(np.atleast_2d(params), dtype=np.float64)
    obs = np.ascontiguousarray(np.atleast_2d(observations), dtype=np.float64)
    out = np.empty((params.shape[0], obs.shape[0], spec.act_dim))
    sizes = np.array([spec.obs_dim, *spec.mlp_hidden, spec.act_dim], dtype=np.int64)
    _mlp_batch(params, sizes, layout_offsets(spec), obs, out)
    return out


@njit(cache=True)
def _mlp_batch(params, sizes, offs, obs, out):
    width = 0
    for s in sizes:
        width = max(width, s)
    buf_a = np.empty(width)
    buf_b = np.empty(width)
    action = np.empty(sizes[sizes.shape[0] - 1])
    for g in range(params.shape[0]):
        for s in range(obs.shape[0]):
            _mlp_act(params[g], sizes, offs, obs[s], buf_a, buf_b, action)
            for j in range(action.shape[0]):
                out[g, s, j] = action[j]
