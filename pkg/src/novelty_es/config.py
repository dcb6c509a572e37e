"""Run configuration: key-value text files and validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, FrozenSet, Optional, Tuple

from .env import ENVS, get_env
from .policy import PolicySpec

ALGORITHMS = ("es", "ns-es", "nsr-es")
POLICIES = ("ff", "dt")
PRETRAINED_SIGMA = 0.01
PRETRAINED_LR = 0.01
ALGORITHM_WEIGHT = {"es": 1.0, "ns-es": 0.0, "nsr-es": 0.5}


class ConfigError(ValueError):
    """Invalid configuration; raised before any compute starts."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "nsr-es"
    policy: str = "ff"
    env: str = "maze"
    iterations: int = 200
    pop_pairs: int = 100
    dt_pop_multiplier: int = 4
    sigma: float = 0.05
    lr: float = 0.01
    weight_decay: float = 0.005
    k: int = 10
    metapop_size: int = 5
    w: float = 0.5
    rtg_target: float = 0.0075
    seed: int = 0
    workers: int = 1
    pretrained: str = ""
    normalize_obs: bool = False
    normalizer_batch: int = 1000
    eval_episodes: int = 10
    episodes_per_eval: int = 1
    noise_table_size: int = 10_000_000
    noise_seed: int = 42
    checkpoint_every: int = 10
    straggler_timeout: float = 60.0
    stop_on_goal: bool = False
    archive_import: str = ""
    mlp_hidden: Tuple[int, ...] = (32, 32)
    dt_embed_dim: int = 16
    dt_heads: int = 1
    dt_layers: int = 1
    dt_context_len: int = 5
    # keys given explicitly by the user (drives forced-default rules)
    explicit: FrozenSet[str] = field(default=frozenset(), compare=False)

    # construction

    @classmethod
    def from_dict(cls, values: Dict[str, object]) -> "RunConfig":
        known = {f.name: f for f in fields(cls) if f.name != "explicit"}
        kw = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(known[key], raw)
        cfg = cls(**kw, explicit=frozenset(kw))
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values: Dict[str, str] = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, _, value = line.partition("=")
            else:
                parts = line.split(None, 1)
                if len(parts) != 2:
                    raise ConfigError(f"line {n}: expected 'key = value'")
                key, value = parts
            key = key.strip()
            if key in values:
                raise ConfigError(f"line {n}: duplicate key {key!r}")
            values[key] = value.strip()
        return cls.from_dict(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def with_overrides(self, **kw) -> "RunConfig":
        merged = {k: getattr(self, k) for k in self.explicit}
        merged.update(kw)
        return RunConfig.from_dict(merged)

    def to_text(self) -> str:
        """Effective settings, one per line; parses back to the same resolved run."""
        eff = self.resolved()
        out = []
        for f in fields(self):
            if f.name == "explicit":
                continue
            v = getattr(eff, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    # validation and derived values

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if self.env not in ENVS:
            raise ConfigError(f"unknown env {self.env!r}; known: {sorted(ENVS)}")
        positive = ("iterations", "pop_pairs", "dt_pop_multiplier", "k", "metapop_size", "workers",
                    "eval_episodes", "episodes_per_eval", "noise_table_size", "checkpoint_every",
                    "normalizer_batch", "dt_embed_dim", "dt_heads", "dt_layers", "dt_context_len")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.sigma <= 0 or self.lr <= 0:
            raise ConfigError("sigma and lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.straggler_timeout <= 0:
            raise ConfigError("straggler_timeout must be positive")
        if not 0.0 <= self.w <= 1.0:
            raise ConfigError("w must lie in [0, 1]")
        if self.pretrained:
            if "sigma" in self.explicit and self.sigma != PRETRAINED_SIGMA:
                raise ConfigError("pretrained runs fix sigma at 0.01")
            if "lr" in self.explicit and self.lr != PRETRAINED_LR:
                raise ConfigError("pretrained runs fix lr at 0.01")
            if self.normalize_obs:
                raise ConfigError("pretrained runs do not use observation normalization")
        if self.algorithm == "es" and "metapop_size" in self.explicit and self.metapop_size != 1:
            raise ConfigError("es uses a single search distribution (metapop_size 1)")
        if "w" in self.explicit and self.algorithm != "nsr-es" and self.w != ALGORITHM_WEIGHT[self.algorithm]:
            raise ConfigError(f"w is fixed at {ALGORITHM_WEIGHT[self.algorithm]} for {self.algorithm}")
        try:
            self.policy_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def resolved(self) -> "RunConfig":
        """Effective settings after the forced rules are applied."""
        kw = {}
        if self.algorithm == "es":
            kw["metapop_size"] = 1
        if self.algorithm != "nsr-es":
            kw["w"] = ALGORITHM_WEIGHT[self.algorithm]
        if self.policy == "dt" and "pop_pairs" not in self.explicit:
            kw["pop_pairs"] = self.pop_pairs * self.dt_pop_multiplier
        if self.pretrained:
            kw.update(sigma=PRETRAINED_SIGMA, lr=PRETRAINED_LR, normalize_obs=False)
        return dataclasses.replace(self, **kw)

    @property
    def uses_archive(self) -> bool:
        return self.algorithm != "es"

    def policy_spec(self) -> PolicySpec:
        env = get_env(self.env)
        if self.policy == "ff":
            return PolicySpec("mlp", env.obs_dim, env.act_dim, mlp_hidden=self.mlp_hidden)
        return PolicySpec("dt", env.obs_dim, env.act_dim, dt_embed_dim=self.dt_embed_dim,
                          dt_heads=self.dt_heads, dt_layers=self.dt_layers,
                          dt_context_len=self.dt_context_len, dt_max_ep_len=env.max_steps)


def _coerce(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        if f.type in ("Tuple[int, ...]",) and not isinstance(raw, tuple):
            return tuple(int(v) for v in raw)
        return raw
    try:
        if f.type == "bool":
            return _bool(raw)
        if f.type == "int":
            return int(raw)
        if f.type == "float":
            return float(raw)
        if f.type == "Tuple[int, ...]":
            return _ints(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc
    return raw
