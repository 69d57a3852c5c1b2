"""Closed-form FLOP and attention-memory accounting.

Counts forward matrix-product FLOPs (2*m*n*k per product, attention score
and mixing products included), the same quantity :func:`autodiff.count_flops`
records.  Memory is the bytes of attention-probability matrices kept for the
backward pass of one training step (float64), the term that grows
quadratically with context.

``LANE`` sums the extractor, the autoregressive block over M*T_sc latent
tokens, and every pathway m = 1..M (queries attend to l_sub + m*T_sc keys;
latent keys/values for spaces 1..m are projected per pathway).  Memory
counts one pathway, the worst case m = M, since training materializes a
single pathway per sample.

``FULL_HISTORY`` is a causal decoder over all L tokens with dense L x L
attention, sized like the LANE blocks (d_model, K layers, d_ff).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mesh import make_rng
from .model import ModelConfig

LANE = "LANE"
FULL_HISTORY = "FULL_HISTORY"
_F8 = 8


def _block(nq: int, nk: int, d: int, f: int) -> int:
    """Pre-norm attention block: q/o projections on nq rows, k/v on nk rows, FFN on nq."""
    return 4 * nq * d * d + 4 * nk * d * d + 4 * nq * nk * d + 4 * nq * d * f


@dataclass(frozen=True)
class CostBreakdown:
    extractor: int
    ar_block: int
    pathways: int
    head: int
    attention_scores: int  # the q k^T and p v products only
    activation_bytes: int

    @property
    def flops(self) -> int:
        return self.extractor + self.ar_block + self.pathways + self.head


def lane_cost(cfg: ModelConfig, L: int) -> CostBreakdown:
    d, f, T, l, H = cfg.d_model, cfg.d_ff, cfg.T_sc, cfg.l_sub, cfg.n_heads
    n1, n2, n3, n4 = cfg.counts
    M = math.ceil(L / l)
    feat_in = 3 + 6 * cfg.n_freq

    ext = 2 * feat_in * d * (n1 + n2 + n3 + n4)
    ext += _block(n2, n1, d, f) + (cfg.n_enc_layers - 1) * _block(n2, n2, d, f)
    ext += _block(n3, n2, d, f) + _block(n4, n3, d, f)
    ext += 2 * d * d  # length embedding
    s = T + 1
    ext += M * _block(s, s, d, f)
    # cross-attention onto Z: keys/values of Z projected once, shared by all slots
    ext += M * (4 * s * d * d + 4 * s * n4 * d + 4 * s * d * f) + 4 * n4 * d * d

    ar = cfg.n_ar_layers * _block(M * T, M * T, d, f)

    # pathway m: keys are l_sub + m*T_sc; sums over m use sum(m) = M(M+1)/2
    sm = M * (M + 1) // 2
    paths = M * (2 * d * d + cfg.K * 6 * d * d)  # length embedding + condition MLP d -> d -> 2d
    paths += cfg.K * (4 * sm * T * d * d  # latent keys/values of spaces 1..m
                      + M * (8 * l * d * d + 4 * l * l * d + 4 * l * d * f)
                      + 4 * l * sm * T * d)
    scores = cfg.K * 4 * l * d * (M * l + sm * T)
    head = M * 2 * l * d * cfg.vocab

    ext_probs = H * (n2 * n1 + (cfg.n_enc_layers - 1) * n2 * n2 + n3 * n2 + n4 * n3 + M * s * s + M * s * n4)
    mem = _F8 * (ext_probs + cfg.n_ar_layers * H * (M * T) ** 2 + cfg.K * H * l * (l + M * T))
    return CostBreakdown(ext, ar, paths, head, scores, mem)


def full_history_cost(cfg: ModelConfig, L: int) -> CostBreakdown:
    d, f, H = cfg.d_model, cfg.d_ff, cfg.n_heads
    layers = cfg.K * _block(L, L, d, f)
    head = 2 * L * d * cfg.vocab
    return CostBreakdown(0, 0, layers, head, cfg.K * 4 * L * L * d, _F8 * cfg.K * H * L * L)


def flops_account(cfg: ModelConfig, L: int, mode: str = LANE) -> dict:
    """{"flops", "activation_bytes", "attention_scores"} for one generation of length L."""
    if not 1 <= L <= cfg.capacity:
        raise ValueError(f"L={L} outside [1, {cfg.capacity}]")
    if mode == LANE:
        c = lane_cost(cfg, L)
    elif mode == FULL_HISTORY:
        c = full_history_cost(cfg, L)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return {"flops": c.flops, "activation_bytes": c.activation_bytes, "attention_scores": c.attention_scores}


# ---------------------------------------------------------------------------
# instrumented baseline


class FullHistoryDecoder:
    """Causal transformer decoder over the whole token sequence (forward only).

    Exists to check :func:`full_history_cost` against the op counter.
    """

    def __init__(self, cfg: ModelConfig, max_len: int, seed: int = 0):
        self.cfg = cfg
        rng = make_rng(seed)
        d, f = cfg.d_model, cfg.d_ff

        def w(i, o):
            return Tensor(rng.standard_normal((i, o)) / math.sqrt(i))

        self.tok = Tensor(rng.standard_normal((cfg.vocab, d)) * 0.02)
        self.pos = Tensor(rng.standard_normal((max_len, d)) * 0.02)
        self.layers = [{k: w(d, d) for k in "qkvo"} | {"fc1": w(d, f), "fc2": w(f, d)} for _ in range(cfg.K)]
        self.head = w(d, cfg.vocab)

    def _heads(self, x: Tensor) -> Tensor:
        n, d = x.shape
        H = self.cfg.n_heads
        return ad.transpose(ad.reshape(x, (n, H, d // H)), (1, 0, 2))

    def forward(self, tokens: np.ndarray) -> Tensor:
        L = len(tokens)
        x = ad.embedding(self.tok, tokens) + ad.getitem(self.pos, slice(0, L))
        mask = np.tril(np.ones((L, L), dtype=bool))
        for p in self.layers:
            h = ad.layer_norm(x)
            q, k, v = (self._heads(ad.linear(h, p[n])) for n in "qkv")
            o = ad.transpose(ad.attention(q, k, v, mask), (1, 0, 2))
            x = x + ad.linear(ad.reshape(ad.contiguous(o), (L, -1)), p["o"])
            x = x + ad.linear(ad.gelu(ad.linear(ad.layer_norm(x), p["fc1"])), p["fc2"])
        return ad.linear(ad.layer_norm(x), self.head)


# ---------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class SweepRow:
    L: int
    lane_flops: int
    baseline_flops: int
    lane_mem: int
    baseline_mem: int
    lane_scores: int
    baseline_scores: int

    @property
    def score_ratio(self) -> float:
        return self.lane_scores / self.baseline_scores


def sweep(cfg: ModelConfig, lengths: Iterable[int]) -> list[SweepRow]:
    rows = []
    for L in lengths:
        a, b = lane_cost(cfg, L), full_history_cost(cfg, L)
        rows.append(SweepRow(L, a.flops, b.flops, a.activation_bytes, b.activation_bytes,
                             a.attention_scores, b.attention_scores))
    return rows


def crossover(cfg: ModelConfig, L_max: int | None = None) -> int | None:
    """Smallest L such that LANE total FLOPs stay below the baseline for every
    length from L up to ``L_max`` (None if LANE is not cheaper at ``L_max``)."""
    L_max = cfg.capacity if L_max is None else L_max
    best = None
    for L in range(L_max, 0, -1):
        if lane_cost(cfg, L).flops >= full_history_cost(cfg, L).flops:
            break
        best = L
    return best


def write_sweep_csv(rows: list[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["L", "lane_flops", "baseline_flops", "lane_mem", "baseline_mem"])
        for r in rows:
            w.writerow([r.L, r.lane_flops, r.baseline_flops, r.lane_mem, r.baseline_mem])
