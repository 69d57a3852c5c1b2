"""Adam with a cosine learning-rate decay, and binary parameter checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

CKPT_MAGIC = b"LANECKPT"


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.name = name


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps <= 0:
        return lr_max
    t = min(max(step, 0), total_steps) / total_steps
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamState:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return cosine_lr(self.step, self.total_steps, self.lr_max, self.lr_min)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Missing gradients count as zero.  Every gradient is checked before any
    parameter is touched, so a NaN aborts the whole step.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            if not np.isfinite(g).all():
                raise NonFiniteGradient(name)
    lr = state.lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, raw little-endian f64


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict) -> None:
    names = list(tensors)
    header = dict(meta)
    header["tensors"] = [{"name": n, "shape": list(tensors[n].shape)} for n in names]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen])
    offset = 12 + hlen
    out = {}
    for entry in header.pop("tensors"):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        out[entry["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after tensor payload")
    return out, header
