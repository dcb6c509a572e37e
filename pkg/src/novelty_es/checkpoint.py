"""Checkpoint files.

Layout::

    novelty-es-checkpoint
    format 1
    <key> <value>            one per line; spec.* keys describe the PolicySpec
    ...
    end
    <binary block>

The binary block holds little-endian float64 values: ``members`` parameter
vectors of length ``genome`` back to back, then, when ``optimizer 1``, one
block per member of ``[adam_t, adam_m (genome), adam_v (genome)]``.
Scalars in the header are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .optim import EsState
from .policy import PolicySpec, param_count

MAGIC = "novelty-es-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: PolicySpec
    thetas: List[np.ndarray]
    optimizer: Optional[List[tuple]] = None  # (t, m, v) per member
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def pretrained(self) -> bool:
        return self.meta.get("pretrained", "0") == "1"

    @property
    def members(self) -> int:
        return len(self.thetas)


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def parse_floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v]


def write_checkpoint(path, spec: PolicySpec, thetas: Sequence[np.ndarray],
                     states: Optional[Sequence[EsState]] = None,
                     meta: Optional[Dict[str, str]] = None) -> None:
    P = param_count(spec)
    for th in thetas:
        if np.asarray(th).shape != (P,):
            raise CheckpointError(f"parameter vector length {np.asarray(th).shape} != {P}")
    lines = [MAGIC, f"format {FORMAT_VERSION}"]
    lines += [f"spec.{k} {v}" for k, v in spec.to_pairs()]
    lines += [f"members {len(thetas)}", f"genome {P}", f"optimizer {int(states is not None)}"]
    for k, v in (meta or {}).items():
        if not k or any(c.isspace() for c in k) or "\n" in str(v):
            raise CheckpointError(f"bad metadata entry {k!r}")
        lines.append(f"{k} {v}")
    lines.append("end")
    blocks = [np.asarray(th, dtype="<f8") for th in thetas]
    if states is not None:
        for st in states:
            blocks.append(np.array([float(st.adam_t)], dtype="<f8"))
            blocks.append(np.asarray(st.adam_m, dtype="<f8"))
            blocks.append(np.asarray(st.adam_v, dtype="<f8"))
    data = ("\n".join(lines) + "\n").encode("utf-8") + b"".join(b.tobytes() for b in blocks)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = raw[:cut].decode("utf-8").split("\n")
    body = raw[cut + len(marker):]
    fields: Dict[str, str] = {}
    for line in header[1:]:
        key, _, value = line.partition(" ")
        fields[key] = value
    if fields.get("format") != str(FORMAT_VERSION):
        raise CheckpointError(f"{path}: unsupported format {fields.get('format')!r}")
    spec = PolicySpec.from_pairs({k[5:]: v for k, v in fields.items() if k.startswith("spec.")})
    M, P = int(fields["members"]), int(fields["genome"])
    if P != param_count(spec):
        raise CheckpointError(f"{path}: genome length {P} does not match its spec")
    has_opt = fields["optimizer"] == "1"
    expected = M * P + (M * (1 + 2 * P) if has_opt else 0)
    values = np.frombuffer(body, dtype="<f8")
    if values.shape[0] != expected:
        raise CheckpointError(f"{path}: expected {expected} floats, found {values.shape[0]}")
    values = values.astype(np.float64)
    thetas = [values[i * P:(i + 1) * P].copy() for i in range(M)]
    opt = None
    if has_opt:
        opt = []
        base = M * P
        for i in range(M):
            blk = values[base + i * (1 + 2 * P): base + (i + 1) * (1 + 2 * P)]
            opt.append((int(blk[0]), blk[1:1 + P].copy(), blk[1 + P:].copy()))
    meta = {k: v for k, v in fields.items()
            if not k.startswith("spec.") and k not in ("format", "members", "genome", "optimizer")}
    return Checkpoint(spec, thetas, opt, meta)
