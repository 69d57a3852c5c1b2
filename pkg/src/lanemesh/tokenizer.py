"""Mesh <-> token sequence conversion and subsequence partitioning.

Vocabulary: ids 0..511 are coordinate bins, followed by five control tokens.
Every vertex is emitted as three coordinate tokens in z, y, x order.

Two schemes are supported:

FLAT
    BOS, 9 coordinate tokens per face, EOS.  Faces are canonicalized: each
    face is rotated so its lexicographically smallest vertex comes first and
    faces are sorted by their vertex triples.

HALFEDGE
    Depth-first traversal over half-edges.  A component starts at its
    smallest unvisited face, written as 9 tokens (preceded by NEW_COMP for
    every component but the first); its half-edges (c,a), (b,c), (a,b) are
    pushed so (a,b) is popped first.  Popping half-edge (u,v):

    * the face across it is unvisited: emit the 3 tokens of its apex w, mark
      it visited, push (w,v) then (u,w);
    * the face across it is already visited: nothing is emitted (the decoder
      sees the twin half-edge in its own face set);
    * there is no face across it (mesh boundary): emit END_BRANCH.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import DEFAULT_GRID, Mesh, QuantizationGrid

N_COORD = 512
BOS, EOS, PAD, END_BRANCH, NEW_COMP = 512, 513, 514, 515, 516
VOCAB_SIZE = 517
CONTROL_NAMES = {BOS: "BOS", EOS: "EOS", PAD: "PAD", END_BRANCH: "END_BRANCH", NEW_COMP: "NEW_COMP"}

TOKEN_MAGIC = b"LANETOK1"


class Scheme(enum.IntEnum):
    FLAT = 0
    HALFEDGE = 1


class TokenizeError(ValueError):
    pass


class GrammarError(ValueError):
    def __init__(self, position: int, message: str):
        super().__init__(f"token {position}: {message}")
        self.position = position


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: np.ndarray
    scheme: Scheme
    true_length: int

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.int64).ravel()
        object.__setattr__(self, "tokens", t)
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not 0 <= self.true_length <= len(t):
            raise ValueError("true_length out of range")
        if (t[self.true_length:] != PAD).any():
            raise ValueError("tokens beyond true_length must be PAD")

    @property
    def real(self) -> np.ndarray:
        return self.tokens[: self.true_length]

    def __len__(self) -> int:
        return self.true_length

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return self.scheme == other.scheme and np.array_equal(self.real, other.real)

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        return (TOKEN_MAGIC + struct.pack("<BI", int(self.scheme), self.true_length)
                + self.real.astype("<u2").tobytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "TokenSequence":
        if data[:8] != TOKEN_MAGIC:
            raise ValueError("not a token file (bad magic)")
        scheme, n = struct.unpack_from("<BI", data, 8)
        body = np.frombuffer(data, dtype="<u2", count=n, offset=13)
        return cls(body.astype(np.int64), Scheme(scheme), n)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "TokenSequence":
        return cls.from_bytes(Path(path).read_bytes())

    def to_text(self) -> str:
        return " ".join(str(int(t)) for t in self.real)

    @classmethod
    def from_text(cls, text: str, scheme: Scheme) -> "TokenSequence":
        ids = np.array([int(s) for s in text.split()], dtype=np.int64)
        return cls(ids, scheme, len(ids))


# ---------------------------------------------------------------------------
# quantized mesh view


@dataclass(frozen=True, eq=False)
class QuantizedMesh:
    """Unique quantized vertices (rows in z, y, x order, lexicographically
    sorted so vertex-id order equals coordinate order) and canonical faces
    (smallest vertex first, winding kept, sorted, no duplicates)."""

    zyx: np.ndarray
    faces: np.ndarray


def quantize_mesh(mesh: Mesh, grid: QuantizationGrid = DEFAULT_GRID) -> QuantizedMesh:
    v = mesh.vertices
    if v.size and ((v < 0.0).any() or (v >= 1.0).any()):
        raise TokenizeError("mesh is not normalized: coordinates outside [0, 1)")
    q = grid.quantize(v)[:, ::-1] if len(v) else np.zeros((0, 3), np.int64)
    zyx, inverse = np.unique(q, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    f = inverse[mesh.faces] if mesh.n_faces else np.zeros((0, 3), np.int64)
    keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    f = f[keep]
    # rotate so the smallest id (= smallest zyx tuple) leads; winding preserved
    shift = np.argmin(f, axis=1)
    rows = np.arange(len(f))[:, None]
    f = f[rows, (shift[:, None] + np.arange(3)) % 3]
    f = np.unique(f, axis=0) if len(f) else f.reshape(0, 3)
    return QuantizedMesh(zyx.astype(np.int64), f.astype(np.int64))


def face_set(mesh: Mesh, grid: QuantizationGrid = DEFAULT_GRID) -> frozenset:
    """Set of quantized faces, each a rotation-canonical triple of zyx tuples."""
    qm = quantize_mesh(mesh, grid)
    return frozenset(tuple(tuple(int(c) for c in qm.zyx[i]) for i in face) for face in qm.faces)


def _canonical(face):
    k = min(range(3), key=lambda i: face[i])
    return tuple(face[(k + i) % 3] for i in range(3))


# ---------------------------------------------------------------------------
# encoders


def tokenize_flat(mesh: Mesh, grid: QuantizationGrid = DEFAULT_GRID) -> TokenSequence:
    qm = quantize_mesh(mesh, grid)
    body = qm.zyx[qm.faces].reshape(-1)
    tokens = np.concatenate([[BOS], body, [EOS]]).astype(np.int64)
    return TokenSequence(tokens, Scheme.FLAT, len(tokens))


def _halfedge_map(faces: np.ndarray, zyx: np.ndarray) -> dict[tuple[int, int], int]:
    he: dict[tuple[int, int], int] = {}
    for fi, (a, b, c) in enumerate(faces.tolist()):
        for e in ((a, b), (b, c), (c, a)):
            if e in he:
                u, v = e
                raise TokenizeError(
                    f"inconsistent winding: half-edge {tuple(zyx[u])}->{tuple(zyx[v])} "
                    f"used by faces {he[e]} and {fi}")
            he[e] = fi
    return he


def tokenize_halfedge(mesh: Mesh, grid: QuantizationGrid = DEFAULT_GRID) -> TokenSequence:
    qm = quantize_mesh(mesh, grid)
    faces = qm.faces.tolist()
    zyx = qm.zyx.tolist()
    he = _halfedge_map(qm.faces, qm.zyx)
    visited = [False] * len(faces)
    out = [BOS]
    first = True
    for start in range(len(faces)):
        if visited[start]:
            continue
        if not first:
            out.append(NEW_COMP)
        first = False
        a, b, c = faces[start]
        visited[start] = True
        out += zyx[a] + zyx[b] + zyx[c]
        stack = [(c, a), (b, c), (a, b)]
        while stack:
            u, v = stack.pop()
            nb = he.get((v, u))
            if nb is None:
                out.append(END_BRANCH)
                continue
            if visited[nb]:
                continue
            visited[nb] = True
            w = next(x for x in faces[nb] if x != u and x != v)
            out += zyx[w]
            stack.append((w, v))
            stack.append((u, w))
    out.append(EOS)
    return TokenSequence(np.array(out, dtype=np.int64), Scheme.HALFEDGE, len(out))


def tokenize(mesh: Mesh, scheme: Scheme | str = Scheme.FLAT,
             grid: QuantizationGrid = DEFAULT_GRID) -> TokenSequence:
    scheme = Scheme[scheme.upper()] if isinstance(scheme, str) else Scheme(scheme)
    return tokenize_flat(mesh, grid) if scheme == Scheme.FLAT else tokenize_halfedge(mesh, grid)


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecodeResult:
    mesh: Mesh
    partial: bool
    error: GrammarError | None = None


class _Builder:
    def __init__(self):
        self.index: dict[tuple[int, int, int], int] = {}
        self.faces: list[tuple[int, int, int]] = []
        self.halfedges: set[tuple[int, int]] = set()

    def vertex(self, zyx: tuple[int, int, int]) -> int:
        if zyx not in self.index:
            self.index[zyx] = len(self.index)
        return self.index[zyx]

    def add_face(self, a: int, b: int, c: int, pos: int) -> None:
        if a == b or b == c or a == c:
            raise GrammarError(pos, "degenerate face")
        edges = ((a, b), (b, c), (c, a))
        if any(e in self.halfedges for e in edges):
            raise GrammarError(pos, "half-edge used twice")
        self.halfedges.update(edges)
        self.faces.append((a, b, c))

    def mesh(self, grid: QuantizationGrid) -> Mesh:
        zyx = np.array(list(self.index), dtype=np.int64).reshape(-1, 3)
        return Mesh(grid.dequantize(zyx[:, ::-1]), np.array(self.faces, dtype=np.int64).reshape(-1, 3))


class _Reader:
    def __init__(self, tokens: np.ndarray):
        self.t = tokens.tolist()
        self.pos = 1

    def peek(self) -> int | None:
        return self.t[self.pos] if self.pos < len(self.t) else None

    def take(self) -> int:
        if self.pos >= len(self.t):
            raise GrammarError(self.pos, "unexpected end of sequence (missing EOS)")
        tok = self.t[self.pos]
        if not 0 <= tok < VOCAB_SIZE:
            raise GrammarError(self.pos, f"unknown token {tok}")
        self.pos += 1
        return tok

    def vertex(self) -> tuple[int, int, int]:
        start = self.pos
        group = []
        while len(group) < 3:
            if self.pos < len(self.t) and 0 <= self.t[self.pos] < N_COORD:
                group.append(self.take())
                continue
            if self.pos < len(self.t) and not 0 <= self.t[self.pos] < VOCAB_SIZE:
                raise GrammarError(self.pos, f"unknown token {self.t[self.pos]}")
            raise GrammarError(start, f"coordinate group of length {len(group)}")
        return tuple(group)


def _decode_flat(r: _Reader, b: _Builder) -> None:
    while True:
        tok = r.peek()
        if tok == EOS:
            r.take()
            return
        if tok is not None and 0 <= tok < N_COORD:
            pos = r.pos
            vs = [b.vertex(r.vertex()) for _ in range(3)]
            b.add_face(*vs, pos)
            continue
        if tok is None:
            raise GrammarError(r.pos, "unexpected end of sequence (missing EOS)")
        r.take()  # raises on unknown ids
        raise GrammarError(r.pos - 1, f"unexpected control token {CONTROL_NAMES[tok]}")


def _decode_halfedge(r: _Reader, b: _Builder) -> None:
    first = True
    while True:
        tok = r.peek()
        if tok == EOS:
            r.take()
            return
        if tok is None:
            raise GrammarError(r.pos, "unexpected end of sequence (missing EOS)")
        if first:
            if not 0 <= tok < N_COORD:
                r.take()
                raise GrammarError(r.pos - 1, "component must start with a face")
        else:
            if tok != NEW_COMP:
                if tok == END_BRANCH:
                    raise GrammarError(r.pos, "stack underflow")
                r.take()
                raise GrammarError(r.pos - 1, "expected NEW_COMP or EOS")
            r.take()
        first = False
        pos = r.pos
        a, bb, c = (b.vertex(r.vertex()) for _ in range(3))
        b.add_face(a, bb, c, pos)
        stack = [(c, a), (bb, c), (a, bb)]
        while stack:
            u, v = stack.pop()
            if (v, u) in b.halfedges:
                continue
            pos = r.pos
            tok = r.take()
            if tok == END_BRANCH:
                continue
            if 0 <= tok < N_COORD:
                r.pos -= 1
                w = b.vertex(r.vertex())
                b.add_face(v, u, w, pos)
                stack.append((w, v))
                stack.append((u, w))
                continue
            raise GrammarError(pos, f"unexpected {CONTROL_NAMES[tok]} inside a component")


def decode(seq: TokenSequence, grid: QuantizationGrid = DEFAULT_GRID) -> DecodeResult:
    """Best-effort decode: on a grammar violation keep the faces completed so far."""
    tokens = seq.real
    b = _Builder()
    err = None
    if len(tokens) == 0 or tokens[0] != BOS:
        err = GrammarError(0, "sequence must start with BOS")
    else:
        r = _Reader(tokens)
        try:
            (_decode_flat if seq.scheme == Scheme.FLAT else _decode_halfedge)(r, b)
            if r.pos != len(tokens):
                raise GrammarError(r.pos, "tokens after EOS")
        except GrammarError as e:
            err = e
    # a face is committed only once complete, so the builder never holds a partial face
    return DecodeResult(b.mesh(grid), err is not None, err)


def detokenize(seq: TokenSequence, grid: QuantizationGrid = DEFAULT_GRID,
               best_effort: bool = False) -> Mesh | DecodeResult:
    """Strict mode returns a Mesh or raises GrammarError; best-effort returns a DecodeResult."""
    res = decode(seq, grid)
    if best_effort:
        return res
    if res.error is not None:
        raise res.error
    return res.mesh


# ---------------------------------------------------------------------------
# subsequences and statistics


@dataclass(frozen=True, eq=False)
class SubsequenceBatch:
    subsequences: np.ndarray  # (M, l_sub)
    l_sub: int
    true_length: int

    @property
    def M(self) -> int:
        return len(self.subsequences)

    def concatenate(self) -> np.ndarray:
        return self.subsequences.reshape(-1)[: self.true_length]


def split_subsequences(seq: TokenSequence, l_sub: int) -> SubsequenceBatch:
    if l_sub < 1:
        raise ValueError("l_sub must be >= 1")
    L = seq.true_length
    M = math.ceil(L / l_sub)
    buf = np.full(M * l_sub, PAD, dtype=np.int64)
    buf[:L] = seq.real
    return SubsequenceBatch(buf.reshape(M, l_sub), l_sub, L)


def seq_stats(seq: TokenSequence, grid: QuantizationGrid = DEFAULT_GRID) -> dict:
    mesh = detokenize(seq, grid)
    real = seq.real
    faces = mesh.n_faces
    n_control = int(((real >= N_COORD) & (real != BOS) & (real != EOS)).sum())
    return {
        "length": int(seq.true_length),
        "faces": int(faces),
        "tokens_per_face": (seq.true_length - 2) / faces if faces else 0.0,
        "tpf_undefined": faces == 0,
        "control_tokens": n_control,
    }
