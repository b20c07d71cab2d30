"""Question-to-object soft attention, the no-graph ablation.

Scores ``s_n = w . ReLU(W [v_n || q] + b)`` are softmaxed over objects and the
pooled image vector is ``sum_n a_n W_v v_n``. The kNN-graph ablation lives in
:mod:`graphvqa.data` since it depends only on box geometry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import DTYPE, DimensionError, StateError, glorot, he, relu, softmax_lastaxis


@dataclass
class AttentionParams:
    W: np.ndarray  # (d_a, d_v + d_q)
    b: np.ndarray
    w: np.ndarray  # (d_a,)
    Wv: np.ndarray  # (d_q, d_v)

    NAMES = ("W", "b", "w", "Wv")

    @classmethod
    def init(cls, d_v: int, d_q: int, d_a: int, rng: np.random.Generator, dtype=DTYPE) -> "AttentionParams":
        return cls(
            he(rng, d_a, d_v + d_q, dtype),
            np.zeros(d_a, dtype=dtype),
            glorot(rng, 1, d_a, dtype)[0],
            glorot(rng, d_q, d_v, dtype),
        )

    @classmethod
    def from_mapping(cls, p: Mapping[str, np.ndarray], prefix: str = "att.") -> "AttentionParams":
        return cls(*(p[prefix + n] for n in cls.NAMES))

    def as_dict(self, prefix: str = "att.") -> dict[str, np.ndarray]:
        return {prefix + n: getattr(self, n) for n in self.NAMES}


@dataclass
class AttentionCache:
    V: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Hh: np.ndarray
    a: np.ndarray
    P: np.ndarray


def attention_forward(V: np.ndarray, q: np.ndarray, p: AttentionParams):
    """V (B, N, d_v), q (B, d_q) -> pooled (B, d_q), cache."""
    if V.shape[-1] + q.shape[-1] != p.W.shape[1] or V.shape[-1] != p.Wv.shape[1]:
        raise DimensionError(
            f"attention expects object width {p.Wv.shape[1]} and total {p.W.shape[1]}, "
            f"got {V.shape[-1]} + {q.shape[-1]}"
        )
    Q = np.broadcast_to(q[:, None, :], V.shape[:-1] + (q.shape[-1],))
    X = np.concatenate([V, Q], axis=-1)
    Z = X @ p.W.T + p.b
    Hh = relu(Z)
    a = softmax_lastaxis(Hh @ p.w)
    P = V @ p.Wv.T
    out = np.einsum("bn,bnd->bd", a, P)
    return out, AttentionCache(V, X, Z, Hh, a, P)


def attention_backward(d_out: np.ndarray, cache: AttentionCache | None, p: AttentionParams):
    """Returns (grads, dq)."""
    if cache is None:
        raise StateError("attention backward called without a cached forward pass")
    a = cache.a
    dP = a[..., None] * d_out[:, None, :]
    da = np.einsum("bnd,bd->bn", cache.P, d_out)
    ds = a * (da - (a * da).sum(-1, keepdims=True))
    dZ = ds[..., None] * p.w * (cache.Z > 0)
    grads = {
        "Wv": np.einsum("bnd,bnv->dv", dP, cache.V),
        "w": np.einsum("bn,bng->g", ds, cache.Hh),
        "W": np.einsum("bng,bnx->gx", dZ, cache.X),
        "b": dZ.sum((0, 1)),
    }
    dX = dZ @ p.W
    d_v = cache.V.shape[-1]
    return grads, dX[..., d_v:].sum(1)


def attention_baseline(V, q, p: AttentionParams) -> np.ndarray:
    """Pooled image vector for one scene: V (N, d_v), q (d_q) -> (d_q,)."""
    out, _ = attention_forward(np.asarray(V, dtype=DTYPE)[None], np.asarray(q, dtype=DTYPE)[None], p)
    return out[0]


def attention_weights(V, q, p: AttentionParams) -> np.ndarray:
    _, cache = attention_forward(np.asarray(V, dtype=DTYPE)[None], np.asarray(q, dtype=DTYPE)[None], p)
    return cache.a[0]
