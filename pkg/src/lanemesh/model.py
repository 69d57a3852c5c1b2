"""Latent autoregressive network over token subsequences.

Forward pipeline for one point-cloud set and requested length ``L``:

1. point cloud encoder: cross-attention from X2 (queries) onto X1, then
   self-attention layers over the N2 tokens;
2. two upsamplers: X3 then X4 attend to the previous latent code, giving
   ``Z`` with N4 tokens;
3. latent space constructor: for each slot m the query stream
   ``[init_m ; L_e]`` mixes internally, then cross-attends to ``Z``; the
   ``T_sc`` slot tokens are kept (``sc_m^e``);
4. autoregressive block: block-causal self-attention over the M spaces, so
   space m only sees spaces 1..m;
5. LANE blocks (K of them): learnable queries plus the index embedding,
   adaptive LayerNorm driven by ``L_e + I_m^e``, attention whose keys and
   values are the query stream plus the tokens of spaces 1..m, then an FFN;
   a linear head gives logits for the whole subsequence in one pass.

Pathways are computed either with ``layout="gather"`` (keys hold exactly
spaces 1..m; used for training and cost accounting) or ``layout="mask"``
(keys hold all M spaces, later ones masked out; used for batched decoding
so every pathway has the same shapes).
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mesh import PointCloudSet, make_rng
from .tokenizer import PAD, VOCAB_SIZE


class ConfigError(ValueError):
    pass


class PathwayError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    K: int = 4
    T_sc: int = 16
    M_max: int = 32
    l_sub: int = 64
    vocab: int = VOCAB_SIZE
    d_ff: int = 512
    n_enc_layers: int = 2
    n_ar_layers: int = 2
    counts: tuple[int, int, int, int] = (8192, 512, 1024, 2048)
    n_freq: int = 6

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.d_model % self.n_heads:
            raise ConfigError("n_heads must divide d_model")
        if self.d_model % 4:
            raise ConfigError("d_model must be a multiple of 4 (length encoding)")
        if self.K < 1 or self.n_enc_layers < 1 or self.n_ar_layers < 1:
            raise ConfigError("K, n_enc_layers and n_ar_layers must be >= 1")
        n1, n2, n3, n4 = self.counts
        if not (n2 < n3 < n4 < n1):
            raise ConfigError(f"ordering N2<N3<N4<N1 violated: {self.counts}")

    @property
    def capacity(self) -> int:
        """Maximum generatable sequence length."""
        return self.M_max * self.l_sub

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = list(self.counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


TOY_CONFIG = ModelConfig()
MICRO_CONFIG = ModelConfig(d_model=16, n_heads=2, K=2, T_sc=4, M_max=3, l_sub=8, d_ff=32,
                           n_enc_layers=1, n_ar_layers=1, counts=(40, 8, 12, 16), n_freq=2)


# ---------------------------------------------------------------------------
# fixed (non-learned) features


def fourier_features(points: np.ndarray, n_freq: int) -> np.ndarray:
    """[p, sin(2^k pi p), cos(2^k pi p)] for p mapped from [0,1] to [-1,1]."""
    p = 2.0 * np.asarray(points, dtype=np.float64) - 1.0
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    ang = p[:, :, None] * freqs
    return np.concatenate([p, np.sin(ang).reshape(len(p), -1), np.cos(ang).reshape(len(p), -1)], axis=1)


def _sinusoid(value: float, dim: int) -> np.ndarray:
    i = np.arange(dim // 2)
    ang = value / (10000.0 ** (2.0 * i / dim))
    return np.concatenate([np.sin(ang), np.cos(ang)])


def length_features(L: int, l_sub: int, d_model: int) -> np.ndarray:
    """Sinusoids of floor(L / l_sub) and L mod l_sub, concatenated (d_model,)."""
    half = d_model // 2
    return np.concatenate([_sinusoid(L // l_sub, half), _sinusoid(L % l_sub, half)])


# ---------------------------------------------------------------------------
# hierarchy container


@dataclass
class LatentHierarchy:
    spaces: Tensor  # (M, T_sc, d_model)
    stage: str  # "encoded" | "autoregressed"
    L: int

    @property
    def M(self) -> int:
        return self.spaces.shape[0]


@dataclass
class CallCounter:
    counts: Counter = field(default_factory=Counter)

    def hit(self, name: str) -> None:
        self.counts[name] += 1


# ---------------------------------------------------------------------------
# model


def _heads_split(x: Tensor, H: int) -> Tensor:
    *lead, n, d = x.shape
    y = ad.reshape(x, (*lead, n, H, d // H))
    nd = y.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ad.transpose(y, axes)


def _heads_merge(x: Tensor) -> Tensor:
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    y = ad.transpose(x, axes)
    *lead, n, H, dh = y.shape
    return ad.reshape(ad.contiguous(y), (*lead, n, H * dh))


class LaneModel:
    """Parameters plus forward functions; ``params`` maps names to leaf Tensors."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.calls = CallCounter()
        if params is None:
            params = self._init_params(seed)
        expected = self._init_params(0, shapes_only=True)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch; missing={missing[:5]} extra={extra[:5]}")
        for n, shape in expected.items():
            if tuple(params[n].shape) != tuple(shape):
                raise ConfigError(f"parameter {n}: shape {params[n].shape} != {shape}")
        self.params = {n: Tensor(np.array(params[n], dtype=np.float64), requires_grad=True, name=n)
                       for n in expected}

    # -- parameters -----------------------------------------------------------

    def _param_shapes(self) -> dict[str, tuple]:
        c = self.config
        d, f = c.d_model, c.d_ff
        shapes: dict[str, tuple] = {}

        def lin(name, i, o):
            shapes[name + ".w"] = (i, o)
            shapes[name + ".b"] = (o,)

        def ln(name):
            shapes[name + ".g"] = (d,)
            shapes[name + ".b"] = (d,)

        def attn(name):
            for p in ("q", "k", "v", "o"):
                lin(f"{name}.{p}", d, d)

        def ffn(name):
            lin(name + ".fc1", d, f)
            lin(name + ".fc2", f, d)

        def block(name, cross: bool):
            ln(name + ".ln_q")
            if cross:
                ln(name + ".ln_kv")
            attn(name + ".attn")
            ln(name + ".ln_ff")
            ffn(name + ".ffn")

        lin("feat", 3 + 6 * c.n_freq, d)
        block("enc.0", cross=True)
        for i in range(1, c.n_enc_layers):
            block(f"enc.{i}", cross=False)
        block("up.0", cross=True)
        block("up.1", cross=True)
        lin("len", d, d)
        shapes["sc_init"] = (c.M_max, c.T_sc, d)
        block("lsc.self", cross=False)
        block("lsc.cross", cross=True)
        for i in range(c.n_ar_layers):
            block(f"ar.{i}", cross=False)
        ln("ar.ln_out")
        shapes["queries"] = (c.l_sub, d)
        shapes["index_emb"] = (c.M_max, d)
        for k in range(c.K):
            p = f"lane.{k}"
            lin(p + ".cond1", d, d)
            lin(p + ".cond2", d, 2 * d)
            ln(p + ".ln_lat")
            attn(p + ".attn")
            ln(p + ".ln_ff")
            ffn(p + ".ffn")
        ln("head.ln")
        lin("head", d, c.vocab)
        return shapes

    def _init_params(self, seed: int, shapes_only: bool = False):
        shapes = self._param_shapes()
        if shapes_only:
            return shapes
        rng = make_rng(seed)
        out = {}
        for name, shape in shapes.items():
            leaf = name.rsplit(".", 1)[-1]
            if name.startswith("head.") and not name.startswith("head.ln"):
                arr = rng.standard_normal(shape) * 0.02 if leaf == "w" else np.zeros(shape)
            elif ".cond2." in name:
                arr = np.zeros(shape)  # adaptive norm starts as identity
            elif name in ("sc_init", "queries", "index_emb"):
                arr = rng.standard_normal(shape) * 0.5
            elif leaf == "g":
                arr = np.ones(shape)
            elif leaf == "b":
                arr = np.zeros(shape)
            else:
                arr = rng.standard_normal(shape) / math.sqrt(shape[0])
            out[name] = arr
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- building blocks --------------------------------------------------------

    def _lin(self, x: Tensor, name: str) -> Tensor:
        P = self.params
        return ad.linear(x, P[name + ".w"], P[name + ".b"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        P = self.params
        return ad.layer_norm(x, P[name + ".g"], P[name + ".b"])

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        return self._lin(ad.gelu(self._lin(x, name + ".fc1")), name + ".fc2")

    def _mha(self, xq: Tensor, xkv: Tensor, name: str, mask=None) -> Tensor:
        H = self.config.n_heads
        q = _heads_split(self._lin(xq, name + ".q"), H)
        k = _heads_split(self._lin(xkv, name + ".k"), H)
        v = _heads_split(self._lin(xkv, name + ".v"), H)
        return self._lin(_heads_merge(ad.attention(q, k, v, mask)), name + ".o")

    def _block(self, x: Tensor, name: str, kv: Tensor | None = None, mask=None) -> Tensor:
        """Pre-norm attention block; self-attention when ``kv`` is None."""
        h = self._ln(x, name + ".ln_q")
        src = h if kv is None else self._ln(kv, name + ".ln_kv")
        x = x + self._mha(h, src, name + ".attn", mask)
        return x + self._ffn(self._ln(x, name + ".ln_ff"), name + ".ffn")

    def featurize(self, points: np.ndarray) -> Tensor:
        return self._lin(Tensor(fourier_features(points, self.config.n_freq)), "feat")

    def length_embedding(self, L: int) -> Tensor:
        c = self.config
        if not 1 <= L <= c.capacity:
            raise ConfigError(f"sequence length {L} outside [1, {c.capacity}]")
        feats = Tensor(length_features(L, c.l_sub, c.d_model)[None, :])
        return ad.reshape(self._lin(feats, "len"), (c.d_model,))

    # -- latent space extractor ------------------------------------------------

    def encode_point_cloud(self, pcs: PointCloudSet) -> Tensor:
        """Latent code with N2 tokens: X2 queries attend to X1, then self-attention."""
        self.calls.hit("encode")
        with ad.scope("extractor"):
            x = self._block(self.featurize(pcs.X2), "enc.0", kv=self.featurize(pcs.X1))
            for i in range(1, self.config.n_enc_layers):
                x = self._block(x, f"enc.{i}")
        return x

    def upsample(self, latent: Tensor, queries: np.ndarray, stage: int) -> Tensor:
        with ad.scope("extractor"):
            return self._block(self.featurize(queries), f"up.{stage}", kv=latent)

    def extract(self, pcs: PointCloudSet) -> Tensor:
        """Latent code Z (N4 tokens)."""
        z = self.encode_point_cloud(pcs)
        z = self.upsample(z, pcs.X3, 0)
        return self.upsample(z, pcs.X4, 1)

    def construct_latent_spaces(self, Z: Tensor, L: int, M: int) -> LatentHierarchy:
        c = self.config
        if not 1 <= M <= c.M_max:
            raise ConfigError(f"M={M} outside [1, {c.M_max}]")
        self.calls.hit("construct")
        with ad.scope("extractor"):
            le = self.length_embedding(L)
            init = ad.getitem(self.params["sc_init"], slice(0, M))
            stream = ad.concat([init, ad.broadcast_to(ad.reshape(le, (1, 1, c.d_model)), (M, 1, c.d_model))], axis=1)
            stream = self._block(stream, "lsc.self")
            stream = self._block(stream, "lsc.cross", kv=Z)
            spaces = ad.getitem(stream, (slice(None), slice(0, c.T_sc)))
        return LatentHierarchy(spaces, "encoded", L)

    def autoregress_latents(self, h: LatentHierarchy) -> LatentHierarchy:
        if h.stage != "encoded":
            raise PathwayError("autoregressive block expects encoded latent spaces")
        self.calls.hit("autoregress")
        c = self.config
        M, T = h.M, c.T_sc
        owner = np.repeat(np.arange(M), T)
        mask = owner[None, :] <= owner[:, None]
        with ad.scope("ar_block"):
            x = ad.reshape(h.spaces, (M * T, c.d_model))
            for i in range(c.n_ar_layers):
                x = self._block(x, f"ar.{i}", mask=mask)
            x = self._ln(x, "ar.ln_out")
        return LatentHierarchy(ad.reshape(x, (M, T, c.d_model)), "autoregressed", h.L)

    def build_hierarchy(self, pcs: PointCloudSet, L: int) -> LatentHierarchy:
        c = self.config
        if not 1 <= L <= c.capacity:
            raise ConfigError(f"L={L} exceeds capacity {c.capacity} (M_max*l_sub)")
        M = math.ceil(L / c.l_sub)
        Z = self.extract(pcs)
        return self.autoregress_latents(self.construct_latent_spaces(Z, L, M))

    # -- LANE blocks ---------------------------------------------------------------

    def latent_kv(self, h: LatentHierarchy, n_spaces: int | None = None) -> list[tuple[Tensor, Tensor]]:
        """Per-block keys/values of the first ``n_spaces`` latent spaces (default all)."""
        c = self.config
        n = h.M if n_spaces is None else n_spaces
        flat = ad.reshape(ad.getitem(h.spaces, slice(0, n)) if n != h.M else h.spaces, (n * c.T_sc, c.d_model))
        out = []
        for k in range(c.K):
            p = f"lane.{k}"
            lat = self._ln(flat, p + ".ln_lat")
            out.append((self._lin(lat, p + ".attn.k"), self._lin(lat, p + ".attn.v")))
        return out

    def condition(self, L: int, ms: Sequence[int]) -> tuple[Tensor, Tensor]:
        """(fused condition L_e + I_m^e, index embeddings), both (B, 1, d).

        The singleton row axis keeps every pathway's products the same shape
        whatever the batch size, which the bitwise serial/batched contract needs.
        """
        le = self.length_embedding(L)
        ids = np.asarray(ms, dtype=np.int64)[:, None] - 1
        idx = ad.embedding(self.params["index_emb"], ids)
        return idx + le, idx

    def lane_block(self, x: Tensor, kv: tuple[Tensor, Tensor], cond: Tensor, k: int,
                   mask: np.ndarray | None) -> Tensor:
        """One LANE block on ``x`` (B, l_sub, d) with latent keys/values ``kv``."""
        c = self.config
        p = f"lane.{k}"
        B = x.shape[0]
        ab = self._lin(ad.gelu(self._lin(cond, p + ".cond1")), p + ".cond2")
        alpha = ad.getitem(ab, (slice(None), slice(None), slice(0, c.d_model)))
        beta = ad.getitem(ab, (slice(None), slice(None), slice(c.d_model, None)))
        h = ad.layer_norm(x) * (alpha + 1.0) + beta
        k_lat, v_lat = kv
        n_lat = k_lat.shape[-2]
        lat_shape = (B, n_lat, c.d_model)
        if k_lat.ndim == 2:
            k_lat = ad.broadcast_to(k_lat, lat_shape)
            v_lat = ad.broadcast_to(v_lat, lat_shape)
        H = c.n_heads
        q = _heads_split(self._lin(h, p + ".attn.q"), H)
        kk = _heads_split(ad.concat([self._lin(h, p + ".attn.k"), k_lat], axis=1), H)
        vv = _heads_split(ad.concat([self._lin(h, p + ".attn.v"), v_lat], axis=1), H)
        att = self._lin(_heads_merge(ad.attention(q, kk, vv, mask)), p + ".attn.o")
        x = x + att
        return x + self._ffn(self._ln(x, p + ".ln_ff"), p + ".ffn")

    def pathway_mask(self, ms: Sequence[int], n_spaces: int) -> np.ndarray:
        """(B, 1, l_sub, l_sub + n_spaces*T_sc): own stream plus spaces 1..m."""
        c = self.config
        ms = np.asarray(ms)
        owner = np.repeat(np.arange(1, n_spaces + 1), c.T_sc)
        lat = owner[None, :] <= ms[:, None]
        full = np.concatenate([np.ones((len(ms), c.l_sub), dtype=bool), lat], axis=1)
        return np.broadcast_to(full[:, None, None, :], (len(ms), 1, c.l_sub, full.shape[1]))

    def pathways(self, h: LatentHierarchy, ms: Sequence[int], L: int,
                 kv: list[tuple[Tensor, Tensor]] | None = None, layout: str = "mask") -> Tensor:
        """Logits (B, l_sub, vocab) for the subsequence indices ``ms`` (1-based).

        ``layout="mask"`` attends over all spaces of ``h`` with spaces > m
        masked; ``kv`` may carry precomputed :meth:`latent_kv` output.
        ``layout="gather"`` (single pathway) uses exactly spaces 1..m.
        """
        c = self.config
        ms = [int(m) for m in ms]
        for m in ms:
            if not 1 <= m <= h.M:
                raise PathwayError(f"pathway {m} exceeds hierarchy of {h.M} spaces")
        if h.stage != "autoregressed":
            raise PathwayError("pathways need an autoregressed hierarchy")
        B = len(ms)
        if layout == "gather":
            if B != 1:
                raise PathwayError("gather layout decodes one pathway at a time")
            if kv is None:
                kv = self.latent_kv(h, ms[0])
            mask = None
        elif layout == "mask":
            if kv is None:
                kv = self.latent_kv(h)
            mask = self.pathway_mask(ms, h.M)
        else:
            raise ValueError(f"unknown layout {layout!r}")
        cond, idx = self.condition(L, ms)
        with ad.scope("lane_blocks"):
            x = ad.broadcast_to(self.params["queries"], (B, c.l_sub, c.d_model))
            x = x + idx
            for k in range(c.K):
                x = self.lane_block(x, kv[k], cond, k, mask)
        with ad.scope("head"):
            return self._lin(self._ln(x, "head.ln"), "head")

    def predict_subsequence(self, h: LatentHierarchy, m: int, L: int, layout: str = "gather") -> Tensor:
        """Logits (l_sub, vocab) for subsequence m in one forward pass."""
        out = self.pathways(h, [m], L, layout=layout)
        return ad.reshape(out, out.shape[1:])

    def forward(self, pcs: PointCloudSet, L: int, m: int, layout: str = "gather") -> Tensor:
        return self.predict_subsequence(self.build_hierarchy(pcs, L), m, L, layout)


def subsequence_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean cross-entropy over non-PAD positions."""
    return ad.cross_entropy(logits, target, ignore_id=PAD)
