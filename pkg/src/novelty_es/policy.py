"""Policy architectures and the flat genome <-> weights mapping.

Two architectures are supported: a tanh MLP and a Decision Transformer
(causal pre-norm transformer over interleaved return-to-go / observation /
action tokens).  Both are described by a :class:`PolicySpec`, which fixes
a bijection between a flat parameter vector and named weight arrays.

Genome layout (normative, row-major, weights stored as ``(in, out)``):

MLP, per layer ``i``:  ``l{i}.W``, ``l{i}.b``

Decision Transformer:
    ``emb_rtg.W  (1, E)``, ``emb_rtg.b``, ``emb_obs.W (obs, E)``, ``emb_obs.b``,
    ``emb_act.W (act, E)``, ``emb_act.b``, ``pos (max_ep_len, E)``,
    then per layer ``h{i}``: ``ln1.g``, ``ln1.b``, ``attn.Wq``, ``attn.bq``,
    ``attn.Wk``, ``attn.bk``, ``attn.Wv``, ``attn.bv``, ``attn.Wo``, ``attn.bo``,
    ``ln2.g``, ``ln2.b``, ``ff.W1 (E, 4E)``, ``ff.b1``, ``ff.W2 (4E, E)``, ``ff.b2``,
    then ``ln_f.g``, ``ln_f.b``, ``dec.W (E, act)``, ``dec.b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

LN_EPS = 1e-5

KINDS = ("mlp", "dt")


class StructureError(ValueError):
    """Shapes or lengths do not agree with the policy spec."""


class PolicyInputError(ValueError):
    """Non-finite or malformed policy input."""


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    obs_dim: int
    act_dim: int
    mlp_hidden: Tuple[int, ...] = (32, 32)
    dt_embed_dim: int = 16
    dt_heads: int = 1
    dt_layers: int = 1
    dt_context_len: int = 5
    dt_max_ep_len: int = 200
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        if self.kind not in KINDS:
            raise StructureError(f"unknown policy kind {self.kind!r}")
        if self.activation != "tanh":
            raise StructureError("only tanh activation is supported")
        dims = [self.obs_dim, self.act_dim, *self.mlp_hidden, self.dt_embed_dim,
                self.dt_heads, self.dt_layers, self.dt_context_len, self.dt_max_ep_len]
        if any(int(d) < 1 for d in dims):
            raise StructureError("all policy dimensions must be >= 1")
        if self.dt_embed_dim % self.dt_heads:
            raise StructureError("dt_embed_dim must be divisible by dt_heads")

    def to_pairs(self) -> List[Tuple[str, str]]:
        return [
            ("kind", self.kind),
            ("obs_dim", str(self.obs_dim)),
            ("act_dim", str(self.act_dim)),
            ("mlp_hidden", ",".join(str(h) for h in self.mlp_hidden)),
            ("dt_embed_dim", str(self.dt_embed_dim)),
            ("dt_heads", str(self.dt_heads)),
            ("dt_layers", str(self.dt_layers)),
            ("dt_context_len", str(self.dt_context_len)),
            ("dt_max_ep_len", str(self.dt_max_ep_len)),
            ("activation", self.activation),
        ]

    @classmethod
    def from_pairs(cls, pairs: Dict[str, str]) -> "PolicySpec":
        hidden = pairs.get("mlp_hidden", "32,32").strip()
        kw = dict(
            kind=pairs["kind"],
            obs_dim=int(pairs["obs_dim"]),
            act_dim=int(pairs["act_dim"]),
            mlp_hidden=tuple(int(h) for h in hidden.split(",") if h.strip()),
        )
        for name in ("dt_embed_dim", "dt_heads", "dt_layers", "dt_context_len", "dt_max_ep_len"):
            if name in pairs:
                kw[name] = int(pairs[name])
        if "activation" in pairs:
            kw["activation"] = pairs["activation"]
        return cls(**kw)


def mlp_spec(obs_dim: int, act_dim: int, hidden: Sequence[int] = (32, 32)) -> PolicySpec:
    return PolicySpec("mlp", obs_dim, act_dim, mlp_hidden=tuple(hidden))


def dt_spec(obs_dim: int, act_dim: int, embed: int = 16, heads: int = 1, layers: int = 1,
            context_len: int = 5, max_ep_len: int = 200) -> PolicySpec:
    return PolicySpec("dt", obs_dim, act_dim, dt_embed_dim=embed, dt_heads=heads,
                      dt_layers=layers, dt_context_len=context_len, dt_max_ep_len=max_ep_len)


def layout(spec: PolicySpec) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) list describing the genome."""
    if spec.kind == "mlp":
        sizes = [spec.obs_dim, *spec.mlp_hidden, spec.act_dim]
        out = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            out.append((f"l{i}.W", (a, b)))
            out.append((f"l{i}.b", (b,)))
        return out

    E = spec.dt_embed_dim
    out = [
        ("emb_rtg.W", (1, E)), ("emb_rtg.b", (E,)),
        ("emb_obs.W", (spec.obs_dim, E)), ("emb_obs.b", (E,)),
        ("emb_act.W", (spec.act_dim, E)), ("emb_act.b", (E,)),
        ("pos", (spec.dt_max_ep_len, E)),
    ]
    for i in range(spec.dt_layers):
        h = f"h{i}."
        out += [
            (h + "ln1.g", (E,)), (h + "ln1.b", (E,)),
            (h + "attn.Wq", (E, E)), (h + "attn.bq", (E,)),
            (h + "attn.Wk", (E, E)), (h + "attn.bk", (E,)),
            (h + "attn.Wv", (E, E)), (h + "attn.bv", (E,)),
            (h + "attn.Wo", (E, E)), (h + "attn.bo", (E,)),
            (h + "ln2.g", (E,)), (h + "ln2.b", (E,)),
            (h + "ff.W1", (E, 4 * E)), (h + "ff.b1", (4 * E,)),
            (h + "ff.W2", (4 * E, E)), (h + "ff.b2", (E,)),
        ]
    out += [("ln_f.g", (E,)), ("ln_f.b", (E,)),
            ("dec.W", (E, spec.act_dim)), ("dec.b", (spec.act_dim,))]
    return out


def offsets(spec: PolicySpec) -> Dict[str, Tuple[int, Tuple[int, ...]]]:
    """name -> (start offset, shape)."""
    pos = 0
    out = {}
    for name, shape in layout(spec):
        out[name] = (pos, shape)
        pos += int(np.prod(shape))
    return out


def param_count(spec: PolicySpec) -> int:
    """Closed-form genome length (kept independent of :func:`layout`)."""
    if spec.kind == "mlp":
        sizes = [spec.obs_dim, *spec.mlp_hidden, spec.act_dim]
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    E = spec.dt_embed_dim
    embeddings = (1 + spec.obs_dim + spec.act_dim) * E + 3 * E
    positional = spec.dt_max_ep_len * E
    per_layer = 2 * E + 4 * (E * E + E) + 2 * E + (E * 4 * E + 4 * E) + (4 * E * E + E)
    head = 2 * E + E * spec.act_dim + spec.act_dim
    return embeddings + positional + spec.dt_layers * per_layer + head


def vectorize(spec: PolicySpec, weights: Dict[str, np.ndarray]) -> np.ndarray:
    parts = []
    expected = layout(spec)
    if set(weights) != {name for name, _ in expected}:
        raise StructureError("weight names do not match the policy layout")
    for name, shape in expected:
        w = np.asarray(weights[name], dtype=np.float64)
        if w.shape != shape:
            raise StructureError(f"{name}: expected shape {shape}, got {w.shape}")
        parts.append(w.ravel())
    return np.concatenate(parts)


def devectorize(spec: PolicySpec, params: np.ndarray) -> Dict[str, np.ndarray]:
    """Named views into ``params`` (no copy)."""
    params = np.asarray(params, dtype=np.float64)
    n = param_count(spec)
    if params.ndim != 1 or params.shape[0] != n:
        raise StructureError(f"expected a flat vector of length {n}, got shape {params.shape}")
    out = {}
    for name, (start, shape) in offsets(spec).items():
        size = int(np.prod(shape))
        out[name] = params[start:start + size].reshape(shape)
    return out


def check_params(spec: PolicySpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != param_count(spec):
        raise StructureError(
            f"parameter vector length {params.shape} does not match spec ({param_count(spec)})")
    if not np.all(np.isfinite(params)):
        raise PolicyInputError("parameter vector has non-finite entries")
    return params


def init_params(spec: PolicySpec, rng: np.random.Generator) -> np.ndarray:
    """Random initial genome.

    MLP: column-normalised Gaussian weights (std 1 for hidden layers, 0.01 for
    the output layer), zero biases.  DT: N(0, 0.02) weights, unit layer-norm
    gains, zero biases, so initial actions stay close to zero.
    """
    weights = {}
    for name, shape in layout(spec):
        leaf = name.split(".")[-1]
        if spec.kind == "mlp":
            if leaf == "W":
                last = name.startswith(f"l{len(spec.mlp_hidden)}.")
                w = rng.standard_normal(shape)
                w *= (0.01 if last else 1.0) / np.sqrt(np.square(w).sum(axis=0, keepdims=True))
                weights[name] = w
            else:
                weights[name] = np.zeros(shape)
        else:
            if leaf == "g":
                weights[name] = np.ones(shape)
            elif leaf.startswith("W") or leaf == "pos":
                weights[name] = 0.02 * rng.standard_normal(shape)
            else:
                weights[name] = np.zeros(shape)
    return vectorize(spec, weights)


def _check_obs(obs, dim: int) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (dim,):
        raise StructureError(f"observation must have shape ({dim},), got {obs.shape}")
    if not np.all(np.isfinite(obs)):
        raise PolicyInputError("observation has non-finite entries")
    return obs


def mlp_forward(spec: PolicySpec, params, observation) -> np.ndarray:
    if spec.kind != "mlp":
        raise StructureError("mlp_forward requires an MLP spec")
    w = devectorize(spec, check_params(spec, params))
    h = _check_obs(observation, spec.obs_dim)
    for i in range(len(spec.mlp_hidden) + 1):
        h = np.tanh(h @ w[f"l{i}.W"] + w[f"l{i}.b"])
    return h


def attention(queries, keys, values, causal: bool = False) -> np.ndarray:
    """Scaled dot-product attention for one head.

    Logits are scaled by ``1/sqrt(d)``.  With ``causal`` set, position ``j > i``
    gets weight exactly zero for query ``i``.
    """
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if q.ndim != 2 or k.shape != q.shape or v.shape[0] != q.shape[0]:
        raise StructureError("queries, keys and values must be L x d with matching L and d")
    L, d = q.shape
    logits = (q @ k.T) / math.sqrt(d)
    if causal:
        logits = np.where(np.tril(np.ones((L, L), dtype=bool)), logits, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


@dataclass(frozen=True)
class DtContext:
    """Rolling Decision Transformer input window.

    ``triplets`` holds completed ``(return_to_go, observation, action)``
    timesteps, oldest first.  The current timestep (``current_rtg``,
    ``current_obs``) still awaits its action.  Together they span at most
    ``context_len`` timesteps, so at most ``context_len - 1`` completed
    triplets are retained.
    """

    context_len: int
    current_rtg: float
    current_obs: Optional[Tuple[float, ...]] = None
    triplets: Tuple[Tuple[float, Tuple[float, ...], Tuple[float, ...]], ...] = ()
    timestep: int = 0

    def __post_init__(self):
        if self.context_len < 1:
            raise StructureError("context_len must be >= 1")
        if len(self.triplets) > self.context_len - 1:
            raise StructureError(
                f"context holds {len(self.triplets) + 1} timesteps, more than K={self.context_len}")

    def __len__(self) -> int:
        return len(self.triplets) + 1


def new_context(spec: PolicySpec, initial_rtg: float, observation=None) -> DtContext:
    obs = None if observation is None else tuple(float(o) for o in observation)
    return DtContext(spec.dt_context_len, float(initial_rtg), obs)


def update_context(context: DtContext, executed_action, reward: float, next_obs) -> DtContext:
    """Complete the current timestep and open the next one.

    The new return-to-go is ``current_rtg - reward`` (reward in scaled units).
    """
    reward = float(reward)
    if not math.isfinite(reward):
        raise PolicyInputError("reward must be finite")
    if context.current_obs is None:
        raise StructureError("context has no current observation to complete")
    done = (context.current_rtg, context.current_obs, tuple(float(a) for a in executed_action))
    triplets = context.triplets + (done,)
    keep = context.context_len - 1
    triplets = triplets[-keep:] if keep else ()
    return replace(
        context,
        current_rtg=context.current_rtg - reward,
        current_obs=tuple(float(o) for o in next_obs),
        triplets=triplets,
        timestep=context.timestep + 1,
    )


def dt_tokens(spec: PolicySpec, w: Dict[str, np.ndarray], context: DtContext,
              current_obs) -> Tuple[np.ndarray, int]:
    """Embedded token sequence ``(g, s, a)*`` with per-timestep positions.

    Returns the ``(3T, E)`` token matrix and the row of the last state token.
    The pending action uses the zero vector as a placeholder.
    """
    T = len(context)
    t0 = context.timestep - (T - 1)
    if t0 < 0 or context.timestep >= spec.dt_max_ep_len:
        raise StructureError("context timestep outside the positional table")
    rows = []
    steps = list(context.triplets) + [(context.current_rtg, tuple(current_obs),
                                       (0.0,) * spec.act_dim)]
    for i, (g, s, a) in enumerate(steps):
        pos = w["pos"][t0 + i]
        rows.append(np.array([g]) @ w["emb_rtg.W"] + w["emb_rtg.b"] + pos)
        rows.append(np.asarray(s) @ w["emb_obs.W"] + w["emb_obs.b"] + pos)
        rows.append(np.asarray(a) @ w["emb_act.W"] + w["emb_act.b"] + pos)
    return np.stack(rows), 3 * T - 2


def dt_hidden(spec: PolicySpec, w: Dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Run the causal pre-norm transformer stack over token matrix ``x``."""
    E, H = spec.dt_embed_dim, spec.dt_heads
    dh = E // H
    for i in range(spec.dt_layers):
        p = f"h{i}."
        h = layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"])
        q = h @ w[p + "attn.Wq"] + w[p + "attn.bq"]
        k = h @ w[p + "attn.Wk"] + w[p + "attn.bk"]
        v = h @ w[p + "attn.Wv"] + w[p + "attn.bv"]
        heads = [attention(q[:, j * dh:(j + 1) * dh], k[:, j * dh:(j + 1) * dh],
                           v[:, j * dh:(j + 1) * dh], causal=True) for j in range(H)]
        x = x + np.concatenate(heads, axis=1) @ w[p + "attn.Wo"] + w[p + "attn.bo"]
        h = layer_norm(x, w[p + "ln2.g"], w[p + "ln2.b"])
        x = x + np.tanh(h @ w[p + "ff.W1"] + w[p + "ff.b1"]) @ w[p + "ff.W2"] + w[p + "ff.b2"]
    return layer_norm(x, w["ln_f.g"], w["ln_f.b"])


def dt_forward(spec: PolicySpec, params, context: DtContext, current_obs=None) -> np.ndarray:
    """Next action for the Decision Transformer given its context window."""
    if spec.kind != "dt":
        raise StructureError("dt_forward requires a DecisionTransformer spec")
    if len(context) > spec.dt_context_len:
        raise StructureError("context longer than the model's context length")
    if current_obs is None:
        current_obs = context.current_obs
    if current_obs is None:
        raise StructureError("no current observation given")
    current_obs = _check_obs(current_obs, spec.obs_dim)
    w = devectorize(spec, check_params(spec, params))
    x, last_state = dt_tokens(spec, w, context, current_obs)
    out = dt_hidden(spec, w, x)
    return np.tanh(out[last_state] @ w["dec.W"] + w["dec.b"])


@dataclass
class Policy:
    """A spec plus a genome, optionally with a frozen observation normalizer."""

    spec: PolicySpec
    params: np.ndarray
    obs_mean: Optional[np.ndarray] = None
    obs_std: Optional[np.ndarray] = None
    _ctx: Optional[DtContext] = field(default=None, repr=False)

    def __post_init__(self):
        self.params = check_params(self.spec, self.params)

    def normalize(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if self.obs_mean is None:
            return obs
        return (obs - self.obs_mean) / self.obs_std

    def act(self, obs) -> np.ndarray:
        """Stateless action for MLPs; for DTs uses the context set by :meth:`reset`."""
        obs = self.normalize(obs)
        if self.spec.kind == "mlp":
            return mlp_forward(self.spec, self.params, obs)
        if self._ctx is None:
            raise StructureError("call reset() before acting with a Decision Transformer")
        return dt_forward(self.spec, self.params, self._ctx, obs)

    def reset(self, obs, rtg_target: float = 0.0) -> None:
        if self.spec.kind == "dt":
            self._ctx = new_context(self.spec, rtg_target, self.normalize(obs))

    def observe(self, action, scaled_reward: float, next_obs) -> None:
        if self.spec.kind == "dt":
            self._ctx = update_context(self._ctx, action, scaled_reward, self.normalize(next_obs))

    @property
    def context(self) -> Optional[DtContext]:
        return self._ctx
