"""Inference: build the latent hierarchy once, then decode its pathways.

Serial mode runs pathway 1, 2, ..., M one after another.  AdaGraph mode
groups pathways into batches of at most ``batch_limit`` and runs each batch
as one forward pass with a per-pathway mask over the latent spaces; with
``threads > 1`` batches are dispatched to a thread pool.  Both modes use the
masked layout with identical per-pathway shapes, so their logits and tokens
agree bitwise.
"""

from __future__ import annotations

import enum
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .mesh import Mesh, PointCloudSet, corrupt_mesh, make_pointcloud_set
from .model import LaneModel, LatentHierarchy
from .tokenizer import EOS, PAD, DecodeResult, Scheme, TokenSequence, decode


def hardware_threads() -> int:
    """Usable threads, capped by the LANE_THREADS environment variable."""
    try:
        n = len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        n = os.cpu_count() or 1
    cap = os.environ.get("LANE_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return n


class Status(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"


@dataclass
class PathwaySpec:
    m: int
    L: int
    status: Status = Status.PENDING

    @property
    def active_spaces(self) -> range:
        return range(1, self.m + 1)


@dataclass
class GenerationResult:
    tokens: TokenSequence
    raw: np.ndarray  # (M, l_sub) argmax ids before EOS normalization
    summaries: list[dict]
    timing: dict
    logits: np.ndarray | None = None  # (M, l_sub, vocab) when requested

    def timing_json(self) -> dict:
        return dict(self.timing)


def greedy(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest id."""
    return np.argmax(logits, axis=-1)


def _summary(logits: np.ndarray) -> dict:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    ent = -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1)
    return {"mean_max_prob": float(p.max(axis=-1).mean()), "mean_entropy": float(ent.mean())}


def assemble(raw: np.ndarray, L: int, scheme: Scheme) -> TokenSequence:
    """Concatenate pathway outputs and normalize the end of sequence.

    The stream is cut at the first EOS within the first ``L`` tokens;
    without one, position ``L - 1`` is forced to EOS.  The buffer keeps
    length ``L`` with PAD after the real tokens.
    """
    flat = np.asarray(raw, dtype=np.int64).reshape(-1)[:L]
    hits = np.flatnonzero(flat == EOS)
    n = int(hits[0]) + 1 if len(hits) else L
    out = np.full(L, PAD, dtype=np.int64)
    out[:n] = flat[:n]
    out[n - 1] = EOS
    return TokenSequence(out, scheme, n)


def _finish(model: LaneModel, outs: list[np.ndarray], L: int, scheme: Scheme, timing: dict,
            keep_logits: bool) -> GenerationResult:
    logits = np.stack(outs)
    raw = greedy(logits)
    total = timing["hierarchy_s"] + timing["decode_s"]
    timing["tok_per_s"] = L / total if total > 0 else float("inf")
    timing["decode_tok_per_s"] = L / timing["decode_s"] if timing["decode_s"] > 0 else float("inf")
    return GenerationResult(assemble(raw, L, scheme), raw, [_summary(x) for x in logits], timing,
                            logits if keep_logits else None)


def build_hierarchy(model: LaneModel, pcs: PointCloudSet, L: int) -> tuple[LatentHierarchy, float]:
    """(hierarchy, seconds); runs the extractor and the AR block exactly once."""
    t0 = time.perf_counter()
    with ad.no_grad():
        h = model.build_hierarchy(pcs, L)
    return h, time.perf_counter() - t0


def serial_generate(model: LaneModel, h: LatentHierarchy, L: int, scheme: Scheme = Scheme.HALFEDGE,
                    hierarchy_s: float = 0.0, keep_logits: bool = False) -> GenerationResult:
    """Reference decoder: one pathway at a time in index order."""
    specs = [PathwaySpec(m, L) for m in range(1, h.M + 1)]
    outs = []
    t0 = time.perf_counter()
    with ad.no_grad():
        for s in specs:
            s.status = Status.RUNNING
            outs.append(model.pathways(h, [s.m], L, layout="mask").data[0])
            s.status = Status.DONE
    timing = {"hierarchy_s": hierarchy_s, "decode_s": time.perf_counter() - t0,
              "mode": "serial", "batch_limit": 1, "M": h.M, "L": L}
    return _finish(model, outs, L, scheme, timing, keep_logits)


def plan_batches(specs: list[PathwaySpec], batch_limit: int) -> list[list[PathwaySpec]]:
    if batch_limit < 1:
        raise ValueError("batch_limit must be >= 1")
    return [specs[i:i + batch_limit] for i in range(0, len(specs), batch_limit)]


def adagraph_generate(model: LaneModel, h: LatentHierarchy, L: int, batch_limit: int | None = None,
                      scheme: Scheme = Scheme.HALFEDGE, threads: int | None = None,
                      hierarchy_s: float = 0.0, keep_logits: bool = False) -> GenerationResult:
    """Decode all M pathways in masked batches of at most ``batch_limit``.

    The latent keys/values are projected once and shared by every batch.
    """
    if batch_limit is None:
        batch_limit = hardware_threads()
    if threads is None:
        threads = min(hardware_threads(), batch_limit)
    specs = [PathwaySpec(m, L) for m in range(1, h.M + 1)]
    batches = plan_batches(specs, batch_limit)
    slots: list[np.ndarray | None] = [None] * h.M
    t0 = time.perf_counter()
    with ad.no_grad():
        kv = model.latent_kv(h)

    def run(batch: list[PathwaySpec]) -> None:
        with ad.no_grad():
            for s in batch:
                s.status = Status.RUNNING
            out = model.pathways(h, [s.m for s in batch], L, kv=kv, layout="mask").data
            for i, s in enumerate(batch):
                slots[s.m - 1] = out[i]
                s.status = Status.DONE

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, batches))
    else:
        for b in batches:
            run(b)
    timing = {"hierarchy_s": hierarchy_s, "decode_s": time.perf_counter() - t0,
              "mode": "adagraph", "batch_limit": batch_limit, "M": h.M, "L": L}
    return _finish(model, slots, L, scheme, timing, keep_logits)


@dataclass
class GeneratedMesh:
    mesh: Mesh
    result: GenerationResult
    decoded: DecodeResult
    cloud: PointCloudSet = field(repr=False, default=None)

    @property
    def partial(self) -> bool:
        return self.decoded.partial


def generate_mesh(model: LaneModel, source: Mesh | PointCloudSet, L: int, mode: str = "adagraph",
                  batch_limit: int | None = None, scheme: Scheme = Scheme.HALFEDGE, seed: int = 0,
                  corrupt_fraction: float | None = None) -> GeneratedMesh:
    """End to end from a mesh or point-cloud set to a decoded mesh.

    Detokenization is best effort; a grammar violation keeps the faces read
    so far and is flagged on the result.
    """
    if isinstance(source, Mesh):
        mesh = corrupt_mesh(source, corrupt_fraction, seed) if corrupt_fraction else source
        pcs = make_pointcloud_set(mesh, model.config.counts, seed)
    else:
        if corrupt_fraction:
            raise ValueError("corruption needs a mesh input, not a point cloud")
        pcs = source
    h, th = build_hierarchy(model, pcs, L)
    if mode == "serial":
        res = serial_generate(model, h, L, scheme, hierarchy_s=th)
    elif mode == "adagraph":
        res = adagraph_generate(model, h, L, batch_limit, scheme, hierarchy_s=th)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    dec = decode(res.tokens)
    return GeneratedMesh(dec.mesh, res, dec, pcs)
