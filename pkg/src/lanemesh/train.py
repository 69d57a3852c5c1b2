"""Training loop with one sampled pathway per example and resumable checkpoints."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .mesh import Mesh, PointCloudSet, corrupt_mesh, make_pointcloud_set, normalize, synth_shape
from .model import ConfigError, LaneModel, ModelConfig, subsequence_loss
from .optim import AdamState, adam_step, load_checkpoint, save_checkpoint
from .tokenizer import Scheme, SubsequenceBatch, TokenSequence, split_subsequences, tokenize


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainExample:
    pcs: PointCloudSet
    seq: TokenSequence
    subs: SubsequenceBatch

    @property
    def L(self) -> int:
        return self.seq.true_length

    @property
    def M(self) -> int:
        return self.subs.M


def make_example(mesh: Mesh, config: ModelConfig, seed: int, scheme: Scheme = Scheme.HALFEDGE) -> TrainExample:
    """Tokenize a normalized mesh and sample its point-cloud set."""
    seq = tokenize(mesh, scheme)
    if seq.true_length > config.capacity:
        raise ConfigError(f"sequence of {seq.true_length} tokens exceeds capacity {config.capacity}")
    pcs = make_pointcloud_set(mesh, config.counts, seed)
    return TrainExample(pcs, seq, split_subsequences(seq, config.l_sub))


MPolicy = str | int | Callable[[int, np.random.Generator], int]


def choose_m(policy: MPolicy, M: int, rng: np.random.Generator) -> int:
    """Pathway index in 1..M: ``"uniform"``, a fixed int (clipped to M), or a callable."""
    if policy == "uniform":
        return int(rng.integers(1, M + 1))
    if isinstance(policy, (int, np.integer)):
        return int(min(max(policy, 1), M))
    if callable(policy):
        m = int(policy(M, rng))
        if not 1 <= m <= M:
            raise ValueError(f"m_policy returned {m} outside 1..{M}")
        return m
    raise ValueError(f"unknown m_policy {policy!r}")


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator, so a resumed run draws the same pathways."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step])))


def train_step(batch: Sequence[TrainExample], m_policy: MPolicy, model: LaneModel, opt: AdamState,
               rng: np.random.Generator) -> float:
    """Forward/backward over each sample's chosen pathway, then one Adam update.

    Gradients are averaged over the batch.  A non-finite loss or gradient
    aborts the step before any parameter changes.
    """
    model.zero_grad()
    total = 0.0
    for ex in batch:
        m = choose_m(m_policy, ex.M, rng)
        logits = model.forward(ex.pcs, ex.L, m, layout="gather")
        loss = subsequence_loss(logits, ex.subs.subsequences[m - 1])
        if not math.isfinite(loss.item()):
            raise NonFiniteLoss(f"non-finite loss at step {opt.step}")
        ad.scale(loss, 1.0 / len(batch)).backward()
        total += loss.item()
    grads = {n: t.grad for n, t in model.params.items()}
    adam_step(model.state_arrays(), grads, opt)
    model.zero_grad()
    return total / len(batch)


# ---------------------------------------------------------------------------
# run configuration and loop


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    steps: int = 1000
    batch_size: int = 1
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    m_policy: str = "uniform"
    checkpoint_every: int = 100
    log_every: int = 1
    target_loss: float | None = None
    scheme: str = "halfedge"
    dataset: tuple = ({"kind": "cube", "resolution": 1},)
    sample_seeds: int = 1
    corrupt_fraction: float | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown RunConfig fields: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "dataset" in d:
            d["dataset"] = tuple(dict(x) for x in d["dataset"])
        Scheme[d.get("scheme", "halfedge").upper()]
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["dataset"] = [dict(x) for x in self.dataset]
        return d

    def build_examples(self) -> list[TrainExample]:
        """One example per (dataset entry, sampling seed); meshes are normalized."""
        scheme = Scheme[self.scheme.upper()]
        out = []
        for i, spec in enumerate(self.dataset):
            spec = dict(spec)
            mesh = normalize(synth_shape(spec.pop("kind"), spec.pop("resolution"), **spec))
            if self.corrupt_fraction:
                mesh = corrupt_mesh(mesh, self.corrupt_fraction, self.seed + i)
            for k in range(self.sample_seeds):
                out.append(make_example(mesh, self.model, self.seed + 1000 * i + 10 * k, scheme))
        return out


def save_training_state(path: str | Path, model: LaneModel, opt: AdamState, run: RunConfig) -> None:
    tensors = dict(model.state_arrays())
    for n in model.params:
        if n in opt.m:
            tensors["adam.m/" + n] = opt.m[n]
            tensors["adam.v/" + n] = opt.v[n]
    meta = {
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "step": opt.step,
        "run": run.to_dict(),
    }
    save_checkpoint(path, tensors, meta)


def load_model(path: str | Path, config: ModelConfig | None = None) -> tuple[LaneModel, dict, dict]:
    """(model, header, optimizer tensors).  A config hash mismatch is an error."""
    tensors, header = load_checkpoint(path)
    stored = ModelConfig.from_dict(header["config"])
    if stored.hash() != header.get("config_hash"):
        raise ConfigError(f"{path}: header config does not match its hash")
    if config is not None and config.hash() != stored.hash():
        raise ConfigError(f"{path}: checkpoint config hash {stored.hash()} != requested {config.hash()}")
    params = {n: t for n, t in tensors.items() if not n.startswith("adam.")}
    moments = {n: t for n, t in tensors.items() if n.startswith("adam.")}
    return LaneModel(stored, params=params), header, moments


def train(examples: Sequence[TrainExample], run: RunConfig, out_dir: str | Path | None = None,
          resume: bool = False, model: LaneModel | None = None) -> tuple[LaneModel, list[dict]]:
    """Cycle through ``examples`` for ``run.steps`` optimizer steps.

    With ``out_dir`` set, metrics are appended to ``metrics.jsonl`` and a
    checkpoint ``checkpoint.bin`` is written every ``checkpoint_every`` steps
    and at the end.  ``resume`` restarts from that checkpoint (parameters and
    Adam moments), reproducing the uninterrupted run exactly.  Stops early
    once every loss in the last ``max(8, 2 * len(examples))`` steps is below
    ``run.target_loss``.
    """
    if not examples:
        raise ValueError("no training examples")
    opt = AdamState(lr_max=run.lr_max, lr_min=run.lr_min, total_steps=run.steps)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.bin" if out is not None else None
    if resume:
        if ckpt is None or not ckpt.exists():
            raise FileNotFoundError("resume requested but no checkpoint found")
        model, header, moments = load_model(ckpt, run.model)
        opt.step = int(header["step"])
        for n in model.params:
            if "adam.m/" + n in moments:
                opt.m[n] = moments["adam.m/" + n]
                opt.v[n] = moments["adam.v/" + n]
    elif model is None:
        model = LaneModel(run.model, seed=run.seed)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[dict] = []
    n = len(examples)
    while opt.step < run.steps:
        step = opt.step
        batch = [examples[(step * run.batch_size + i) % n] for i in range(run.batch_size)]
        t0 = time.perf_counter()
        loss = train_step(batch, run.m_policy, model, opt, step_rng(run.seed, step))
        rec = {"step": step, "loss": loss, "lr": opt.lr, "seconds": time.perf_counter() - t0}
        history.append(rec)
        if out is not None and step % run.log_every == 0:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        window = history[-max(8, 2 * n):]
        done = (run.target_loss is not None and len(window) >= max(8, 2 * n)
                and max(r["loss"] for r in window) < run.target_loss)
        if ckpt is not None and (opt.step % run.checkpoint_every == 0 or opt.step == run.steps or done):
            save_training_state(ckpt, model, opt, run)
        if done:
            break
    return model, history
