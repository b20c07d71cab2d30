"""Question-conditioned graph learner.

Each object feature is concatenated with the question encoding and passed
through a two-layer ReLU network F. The adjacency is the Gram matrix of those
joint embeddings, every row keeps its m largest entries, and the kept entries
are softmax-normalised into edge weights alpha.

The top-m selection is a routing decision: backward treats it as constant and
only the selected adjacency values receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import DTYPE, ConfigError, DimensionError, InputError, StateError, he, relu, softmax_masked


@dataclass
class JointEmbedF:
    W1: np.ndarray  # (d_g, d_v + d_q)
    b1: np.ndarray
    W2: np.ndarray  # (d_e, d_g)
    b2: np.ndarray

    NAMES = ("W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, d_in: int, d_g: int, d_e: int, rng: np.random.Generator, dtype=DTYPE) -> "JointEmbedF":
        return cls(
            he(rng, d_g, d_in, dtype),
            np.full(d_g, 0.1, dtype=dtype),
            he(rng, d_e, d_g, dtype),
            np.full(d_e, 0.1, dtype=dtype),
        )

    @classmethod
    def from_mapping(cls, p: Mapping[str, np.ndarray], prefix: str = "F.") -> "JointEmbedF":
        return cls(*(p[prefix + n] for n in cls.NAMES))

    def as_dict(self, prefix: str = "F.") -> dict[str, np.ndarray]:
        return {prefix + n: getattr(self, n) for n in self.NAMES}

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def d_e(self) -> int:
        return self.W2.shape[0]


@dataclass
class LearnedGraph:
    A: np.ndarray  # (N, N)
    neighborhoods: np.ndarray  # (N, m) int, ascending per row
    alpha: np.ndarray  # (N, m)
    m: int

    @property
    def n_nodes(self) -> int:
        return self.neighborhoods.shape[0]

    def dense_alpha(self) -> np.ndarray:
        return scatter_rows(self.neighborhoods, self.alpha, self.n_nodes)


def _concat_q(V: np.ndarray, q: np.ndarray) -> np.ndarray:
    Q = np.broadcast_to(q[..., None, :], V.shape[:-1] + (q.shape[-1],))
    return np.concatenate([V, Q], axis=-1)


def joint_embed(v, q, f: JointEmbedF) -> np.ndarray:
    """e = ReLU(W2 ReLU(W1 [v || q] + b1) + b2); ``v`` may hold several rows."""
    v = np.asarray(v, dtype=f.W1.dtype)
    q = np.asarray(q, dtype=f.W1.dtype)
    if v.shape[-1] + q.shape[-1] != f.d_in:
        raise DimensionError(
            f"joint embedding expects {f.d_in} input features, got {v.shape[-1]} + {q.shape[-1]}"
        )
    x = _concat_q(v, q) if v.ndim > 1 else np.concatenate([v, q])
    return relu(relu(x @ f.W1.T + f.b1) @ f.W2.T + f.b2)


def build_adjacency(E) -> np.ndarray:
    E = np.asarray(E)
    if E.ndim < 2 or E.shape[-2] < 1:
        raise InputError(f"adjacency needs at least one node, got embeddings of shape {E.shape}")
    A = E @ np.swapaxes(E, -1, -2)
    # BLAS may sum (i, j) and (j, i) in different orders
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def top_m(a, m: int) -> np.ndarray:
    """Indices of the m largest entries, ties to the lower index, sorted ascending."""
    a = np.asarray(a)
    if m > a.shape[-1] or m < 1:
        raise ConfigError(f"neighbourhood size m={m} must lie in [1, {a.shape[-1]}]")
    order = np.argsort(-a, axis=-1, kind="stable")[..., :m]
    return np.sort(order, axis=-1)


def force_self_loops(nbr: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Put node i into its own neighbourhood, evicting its weakest neighbour."""
    nbr = nbr.copy()
    N = A.shape[-1]
    self_idx = np.arange(N)
    flat_n = nbr.reshape(-1, N, nbr.shape[-1])
    flat_a = A.reshape(-1, N, N)
    for b in range(flat_n.shape[0]):
        for i in range(N):
            row = flat_n[b, i]
            if i in row:
                continue
            vals = flat_a[b, i, row]
            # weakest = smallest value, ties to the larger index
            weakest = len(row) - 1 - int(np.argmin(vals[::-1]))
            row[weakest] = self_idx[i]
            flat_n[b, i] = np.sort(row)
    return flat_n.reshape(nbr.shape)


def edge_weights(a_i, neighborhood) -> np.ndarray:
    return softmax_masked(a_i, neighborhood)


def gather_rows(A: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    return np.take_along_axis(A, nbr, axis=-1)


def scatter_rows(nbr: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(nbr.shape[:-1] + (n,), dtype=vals.dtype)
    np.put_along_axis(out, nbr, vals, axis=-1)
    return out


def _alpha(A_sel: np.ndarray) -> np.ndarray:
    ex = np.exp(A_sel - A_sel.max(axis=-1, keepdims=True))
    return ex / ex.sum(axis=-1, keepdims=True)


def learn_graph(V, q, f: JointEmbedF, m: int, force_self_loop: bool = False) -> LearnedGraph:
    V = np.asarray(V, dtype=f.W1.dtype)
    N = V.shape[0]
    if not (1 <= m <= N):
        raise ConfigError(f"neighbourhood size m={m} must lie in [1, N={N}]")
    E = joint_embed(V, q, f)
    A = build_adjacency(E)
    nbr = top_m(A, m)
    if force_self_loop:
        nbr = force_self_loops(nbr, A)
    alpha = np.stack([edge_weights(A[i], nbr[i]) for i in range(N)])
    return LearnedGraph(A, nbr, alpha, m)


@dataclass
class GraphCache:
    X: np.ndarray
    Z1: np.ndarray
    H1: np.ndarray
    Z2: np.ndarray
    E: np.ndarray
    A: np.ndarray
    nbr: np.ndarray
    alpha: np.ndarray
    d_v: int


def graph_forward(V: np.ndarray, q: np.ndarray, f: JointEmbedF, m: int, force_self_loop: bool = False):
    """Batched learner: V (B, N, d_v), q (B, d_q) -> (A, nbr, alpha, cache)."""
    if V.shape[-1] + q.shape[-1] != f.d_in:
        raise DimensionError(
            f"joint embedding expects {f.d_in} input features, got {V.shape[-1]} + {q.shape[-1]}"
        )
    N = V.shape[-2]
    if not (1 <= m <= N):
        raise ConfigError(f"neighbourhood size m={m} must lie in [1, N={N}]")
    X = _concat_q(V, q)
    Z1 = X @ f.W1.T + f.b1
    H1 = relu(Z1)
    Z2 = H1 @ f.W2.T + f.b2
    E = relu(Z2)
    A = build_adjacency(E)
    nbr = top_m(A, m)
    if force_self_loop:
        nbr = force_self_loops(nbr, A)
    alpha = _alpha(gather_rows(A, nbr))
    return A, nbr, alpha, GraphCache(X, Z1, H1, Z2, E, A, nbr, alpha, V.shape[-1])


def graph_backward(d_alpha: np.ndarray, cache: GraphCache | None, f: JointEmbedF):
    """Backprop dL/dalpha (B, N, m) to F's parameters, V and q."""
    if cache is None:
        raise StateError("graph_learner backward called without a cached forward pass")
    alpha = cache.alpha
    d_sel = alpha * (d_alpha - (alpha * d_alpha).sum(-1, keepdims=True))
    dA = scatter_rows(cache.nbr, d_sel, cache.A.shape[-1])
    dE = (dA + np.swapaxes(dA, -1, -2)) @ cache.E
    dZ2 = dE * (cache.Z2 > 0)
    grads = {
        "W2": np.einsum("bng,bnh->gh", dZ2, cache.H1),
        "b2": dZ2.sum((0, 1)),
    }
    dZ1 = (dZ2 @ f.W2) * (cache.Z1 > 0)
    grads["W1"] = np.einsum("bng,bnh->gh", dZ1, cache.X)
    grads["b1"] = dZ1.sum((0, 1))
    dX = dZ1 @ f.W1
    dV = dX[..., : cache.d_v]
    dq = dX[..., cache.d_v :].sum(-2)
    return grads, dV, dq


def top_m_gap(A: np.ndarray, m: int) -> float:
    """Smallest gap between the m-th and (m+1)-th largest value over all rows."""
    N = A.shape[-1]
    if m >= N:
        return np.inf
    s = -np.sort(-A, axis=-1)
    return float(np.min(s[..., m - 1] - s[..., m]))
