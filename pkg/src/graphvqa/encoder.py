"""Word embeddings and a GRU question encoder with an analytic backward pass.

Gate convention (z gates the candidate)::

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    c = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * c

Sequences are folded from a zero state and stop at their true length, so
any padding past it never touches the encoding.
"""

from __future__ import annotations

import logging
import re
import string
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import DTYPE, DimensionError, InputError, StateError, glorot, sigmoid

log = logging.getLogger(__name__)

OOV_TOKEN = "<unk>"
OOV_INDEX = 0

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass
class EmbeddingTable:
    vocab: dict[str, int]
    vectors: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        if self.vocab.get(OOV_TOKEN) != OOV_INDEX:
            raise InputError(f"embedding vocab must map {OOV_TOKEN!r} to row {OOV_INDEX}")
        if max(self.vocab.values()) >= self.vectors.shape[0]:
            raise DimensionError("vocab index beyond embedding rows")

    @property
    def d_w(self) -> int:
        return self.vectors.shape[1]

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    def lookup(self, tokens: Sequence[str]) -> list[int]:
        return [self.vocab.get(t, OOV_INDEX) for t in tokens]


def build_vocab(words: Sequence[str]) -> dict[str, int]:
    vocab = {OOV_TOKEN: OOV_INDEX}
    for w in words:
        if w not in vocab:
            vocab[w] = len(vocab)
    return vocab


def random_table(vocab: dict[str, int], d_w: int, rng: np.random.Generator) -> EmbeddingTable:
    vecs = rng.standard_normal((max(vocab.values()) + 1, d_w)) * (1.0 / np.sqrt(d_w))
    return EmbeddingTable(vocab, vecs.astype(DTYPE), trainable=True)


def load_embedding_text(path, vocab: Mapping[str, int] | None = None) -> EmbeddingTable:
    """Read ``token v1 ... v_d`` lines (the usual pretrained-vector text format).

    With ``vocab`` given, only those words are kept, rows follow ``vocab`` and
    words missing from the file get zero vectors. The result is frozen.
    """
    rows: dict[str, np.ndarray] = {}
    d_w = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if len(parts) < 2:
                continue
            word, vals = parts[0], parts[1:]
            if d_w is None:
                d_w = len(vals)
            elif len(vals) != d_w:
                raise InputError(f"{path}:{lineno}: expected {d_w} values, got {len(vals)}")
            if vocab is not None and word not in vocab:
                continue
            rows[word] = np.asarray(vals, dtype=DTYPE)
    if d_w is None:
        raise InputError(f"{path}: no vectors found")
    if vocab is None:
        vocab = build_vocab(sorted(w for w in rows if w != OOV_TOKEN))
    vocab = dict(vocab)
    vectors = np.zeros((max(vocab.values()) + 1, d_w), dtype=DTYPE)
    missing = 0
    for w, i in vocab.items():
        if w in rows:
            vectors[i] = rows[w]
        elif w != OOV_TOKEN:
            missing += 1
    if missing:
        log.warning("%d vocabulary words have no pretrained vector; using zeros", missing)
    return EmbeddingTable(vocab, vectors, trainable=False)


def save_embedding_cache(table: EmbeddingTable, path) -> None:
    """Binary cache: an ``.npz`` with ``vectors`` (float64) and ``words`` ordered by row."""
    words = [""] * table.size
    for w, i in table.vocab.items():
        words[i] = w
    np.savez(path, vectors=table.vectors, words=np.asarray(words))


def load_embedding_cache(path) -> EmbeddingTable:
    with np.load(path, allow_pickle=False) as z:
        words = [str(w) for w in z["words"]]
        vectors = z["vectors"].astype(DTYPE)
    vocab = {w: i for i, w in enumerate(words) if w}
    return EmbeddingTable(vocab, vectors, trainable=False)


@dataclass
class GruParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def init(cls, d_w: int, d_q: int, rng: np.random.Generator, dtype=DTYPE) -> "GruParams":
        W = [glorot(rng, d_q, d_w, dtype) for _ in range(3)]
        U = [glorot(rng, d_q, d_q, dtype) for _ in range(3)]
        b = [np.zeros(d_q, dtype=dtype) for _ in range(3)]
        return cls(*W, *U, *b)

    @classmethod
    def from_mapping(cls, p: Mapping[str, np.ndarray], prefix: str = "gru.") -> "GruParams":
        return cls(**{n: p[prefix + n] for n in cls.names()})

    def as_dict(self, prefix: str = "gru.") -> dict[str, np.ndarray]:
        return {prefix + n: getattr(self, n) for n in self.names()}

    @property
    def d_q(self) -> int:
        return self.U_z.shape[0]

    @property
    def d_w(self) -> int:
        return self.W_z.shape[1]


def _check_step_shapes(x: np.ndarray, h: np.ndarray, p: GruParams) -> None:
    if x.shape[-1] != p.d_w or h.shape[-1] != p.d_q:
        raise DimensionError(
            f"gru_step got x width {x.shape[-1]} and h width {h.shape[-1]}, "
            f"expected {p.d_w} and {p.d_q}"
        )


def _step(x, h, p: GruParams):
    z = sigmoid(x @ p.W_z.T + h @ p.U_z.T + p.b_z)
    r = sigmoid(x @ p.W_r.T + h @ p.U_r.T + p.b_r)
    rh = r * h
    c = np.tanh(x @ p.W_h.T + rh @ p.U_h.T + p.b_h)
    return (1.0 - z) * h + z * c, (z, r, c, rh)


def gru_step(x, h_prev, p: GruParams) -> np.ndarray:
    x = np.asarray(x, dtype=p.W_z.dtype)
    h_prev = np.asarray(h_prev, dtype=p.W_z.dtype)
    _check_step_shapes(x, h_prev, p)
    return _step(x, h_prev, p)[0]


def encode_question(tokens: Sequence[int], table: EmbeddingTable, p: GruParams) -> np.ndarray:
    if len(tokens) == 0:
        raise InputError("cannot encode an empty question")
    h = np.zeros(p.d_q, dtype=p.W_z.dtype)
    for t in tokens:
        t = int(t)
        row = t if 0 <= t < table.size else OOV_INDEX
        h = gru_step(table.vectors[row], h, p)
    return h


@dataclass
class GruCache:
    tokens: np.ndarray
    lengths: np.ndarray
    xs: list
    hs: list
    gates: list
    masks: list


def gru_forward(tokens: np.ndarray, lengths: np.ndarray, emb: np.ndarray, p: GruParams):
    """Batched dynamic GRU. ``tokens`` is (B, T) padded, ``lengths`` is (B,)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if tokens.ndim != 2 or lengths.shape != (tokens.shape[0],):
        raise DimensionError(f"tokens {tokens.shape} and lengths {lengths.shape} disagree")
    if np.any(lengths < 1):
        raise InputError("every question needs at least one token")
    if emb.shape[1] != p.d_w:
        raise DimensionError(f"embedding width {emb.shape[1]} != GRU input width {p.d_w}")
    B = tokens.shape[0]
    T = int(lengths.max())
    h = np.zeros((B, p.d_q), dtype=p.W_z.dtype)
    cache = GruCache(tokens, lengths, [], [h], [], [])
    for t in range(T):
        m = (t < lengths).astype(h.dtype)[:, None]
        x = emb[tokens[:, t]]
        h_new, g = _step(x, h, p)
        h = m * h_new + (1.0 - m) * h
        cache.xs.append(x)
        cache.gates.append(g)
        cache.masks.append(m)
        cache.hs.append(h)
    return h, cache


def gru_backward(dh: np.ndarray, cache: GruCache | None, p: GruParams, emb_rows: int):
    """Gradients of a scalar loss given dL/dq for each batch row.

    Returns ``(grads, d_emb)`` where ``grads`` maps GruParams field names to
    arrays and ``d_emb`` has ``emb_rows`` rows.
    """
    if cache is None:
        raise StateError("gru_backward called without a cached forward pass")
    g = {n: np.zeros_like(getattr(p, n)) for n in GruParams.names()}
    d_emb = np.zeros((emb_rows, p.d_w), dtype=p.W_z.dtype)
    dh = np.array(dh, dtype=p.W_z.dtype, copy=True)
    for t in range(len(cache.xs) - 1, -1, -1):
        x, m, h_prev = cache.xs[t], cache.masks[t], cache.hs[t]
        z, r, c, rh = cache.gates[t]
        dstep = dh * m
        dh_prev = dh * (1.0 - m) + dstep * (1.0 - z)
        dz = dstep * (c - h_prev)
        da_h = dstep * z * (1.0 - c * c)
        g["W_h"] += da_h.T @ x
        g["U_h"] += da_h.T @ rh
        g["b_h"] += da_h.sum(0)
        drh = da_h @ p.U_h
        dh_prev += drh * r
        da_r = drh * h_prev * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        g["W_z"] += da_z.T @ x
        g["U_z"] += da_z.T @ h_prev
        g["b_z"] += da_z.sum(0)
        g["W_r"] += da_r.T @ x
        g["U_r"] += da_r.T @ h_prev
        g["b_r"] += da_r.sum(0)
        dh_prev += da_z @ p.U_z + da_r @ p.U_r
        dx = da_h @ p.W_h + da_z @ p.W_z + da_r @ p.W_r
        np.add.at(d_emb, cache.tokens[:, t], dx)
        dh = dh_prev
    return g, d_emb


def pad_sequences(seqs: Sequence[Sequence[int]], pad: int = OOV_INDEX) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.asarray([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max()) if len(seqs) else 0
    out = np.full((len(seqs), T), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def write_embedding_text(table: EmbeddingTable, path) -> None:
    words = [""] * table.size
    for w, i in table.vocab.items():
        words[i] = w
    with open(Path(path), "w", encoding="utf-8") as fh:
        for w, vec in zip(words, table.vectors):
            if w:
                fh.write(w + " " + " ".join(repr(float(v)) for v in vec) + "\n")
