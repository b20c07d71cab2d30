"""Spatial graph convolutions over polar pseudo-coordinates.

For node i and kernel k the patch operator aggregates

    f_k(i) = sum_{j in N(i)} w_k(u(i, j)) * alpha_ij * v_j

with an unnormalised diagonal Gaussian ``w_k`` over u = (rho, theta). The layer
output concatenates ``G_k f_k(i)`` over kernels and applies ReLU.

Batched code works on dense (B, N, N) edge-weight matrices where entries
outside a node's neighbourhood are zero; with N in the tens this is cheaper
than gathering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .core import DTYPE, ConfigError, DimensionError, InputError, StateError, he, relu

SIGMA_MIN, SIGMA_MAX = 1e-3, 10.0
RHO_EPS = 1e-9


class PseudoCoord(NamedTuple):
    rho: float
    theta: float


def _check_box(box) -> np.ndarray:
    b = np.asarray(box, dtype=DTYPE)
    if b.shape != (4,) or not np.all(np.isfinite(b)):
        raise InputError(f"box must be 4 finite corners, got {box!r}")
    x1, y1, x2, y2 = b
    if not (0.0 <= x1 <= x2 <= 1.0 and 0.0 <= y1 <= y2 <= 1.0):
        raise InputError(f"box corners must be ordered and inside [0, 1]: {box!r}")
    return b


def box_centres(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=DTYPE)
    return 0.5 * (boxes[..., 0:2] + boxes[..., 2:4])


def _polar(d: np.ndarray) -> np.ndarray:
    rho = np.hypot(d[..., 0], d[..., 1])
    theta = np.arctan2(d[..., 1], d[..., 0])
    theta = np.where(theta <= -math.pi, math.pi, theta)
    theta = np.where(rho < RHO_EPS, 0.0, theta)
    return np.stack([rho, theta], axis=-1)


def pseudo_coords(box_i, box_j) -> PseudoCoord:
    """Polar position of box j's centre in a frame centred on box i (y points down)."""
    ci = box_centres(_check_box(box_i))
    cj = box_centres(_check_box(box_j))
    rho, theta = _polar(cj - ci)
    return PseudoCoord(float(rho), float(theta))


def pseudo_coord_grid(boxes: np.ndarray, system: str = "polar") -> np.ndarray:
    """All pairwise u(i, j) for boxes (..., N, 4) -> (..., N, N, 2)."""
    c = box_centres(boxes)
    d = c[..., None, :, :] - c[..., :, None, :]
    if system == "polar":
        return _polar(d)
    if system == "cartesian":
        return d
    raise ConfigError(f"unknown pseudo-coordinate system {system!r}")


@dataclass
class GaussianKernel:
    mu: np.ndarray  # (2,)
    log_sigma: np.ndarray  # (2,)

    @property
    def sigma(self) -> np.ndarray:
        return clamp_sigma(self.log_sigma)


def clamp_sigma(log_sigma) -> np.ndarray:
    return np.clip(np.exp(log_sigma), SIGMA_MIN, SIGMA_MAX)


def kernel_weight(u, k: GaussianKernel) -> float:
    s = (np.asarray(u, dtype=DTYPE) - k.mu) / k.sigma
    return float(np.exp(-0.5 * np.sum(s * s)))


def kernel_weight_grad(u, k: GaussianKernel) -> tuple[np.ndarray, np.ndarray]:
    """(dw/dmu, dw/dlog_sigma) for one kernel at one pseudo-coordinate."""
    sig = k.sigma
    s = (np.asarray(u, dtype=DTYPE) - k.mu) / sig
    w = np.exp(-0.5 * np.sum(s * s))
    live = (np.exp(k.log_sigma) > SIGMA_MIN) & (np.exp(k.log_sigma) < SIGMA_MAX)
    return w * s / sig, w * s * s * live


def kernel_weights(U: np.ndarray, mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
    """Weights for every pseudo-coordinate and kernel: U (..., 2) -> (..., K)."""
    S = (U[..., None, :] - mu) / clamp_sigma(log_sigma)
    return np.exp(-0.5 * np.sum(S * S, axis=-1))


@dataclass
class ConvLayer:
    mu: np.ndarray  # (K, 2)
    log_sigma: np.ndarray  # (K, 2)
    G: np.ndarray  # (K, d_h // K, d_in)

    NAMES = ("mu", "log_sigma", "G")

    @classmethod
    def init(cls, d_in: int, d_h: int, K: int, rng: np.random.Generator, dtype=DTYPE) -> "ConvLayer":
        if d_h % K:
            raise ConfigError(f"conv width {d_h} is not divisible by K={K}")
        mu = np.empty((K, 2), dtype=dtype)
        mu[:, 0] = rng.uniform(0.0, 0.5, size=K)
        mu[:, 1] = -math.pi + 2.0 * math.pi * (np.arange(K) + 1) / K
        log_sigma = np.empty((K, 2), dtype=dtype)
        log_sigma[:, 0] = math.log(0.25)
        log_sigma[:, 1] = math.log(math.pi / K)
        # each kernel passes roughly sigma_rho * sigma_theta of a neighbour's
        # features, so scale He init back up to keep activations O(1)
        gain = 1.0 / math.exp(log_sigma[0].sum())
        G = np.stack([he(rng, d_h // K, d_in, dtype) * gain for _ in range(K)])
        return cls(mu, log_sigma, G)

    @classmethod
    def from_mapping(cls, p: Mapping[str, np.ndarray], prefix: str) -> "ConvLayer":
        return cls(*(p[prefix + n] for n in cls.NAMES))

    def as_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {prefix + n: getattr(self, n) for n in self.NAMES}

    @property
    def K(self) -> int:
        return self.G.shape[0]

    @property
    def d_in(self) -> int:
        return self.G.shape[2]

    @property
    def d_h(self) -> int:
        return self.G.shape[0] * self.G.shape[1]

    def kernel(self, k: int) -> GaussianKernel:
        return GaussianKernel(self.mu[k], self.log_sigma[k])


def patch_operator(i: int, V_in, g, coords, kernels) -> np.ndarray:
    """The K aggregated neighbour vectors f_k(i) for one node, shape (K, d_in)."""
    V_in = np.asarray(V_in, dtype=DTYPE)
    out = np.zeros((len(kernels), V_in.shape[1]), dtype=V_in.dtype)
    for a, j in zip(g.alpha[i], g.neighborhoods[i]):
        u = coords[i, j]
        for k, ker in enumerate(kernels):
            out[k] += kernel_weight(u, ker) * a * V_in[j]
    return out


def conv_forward(V_in, g, layer: ConvLayer, coords: np.ndarray) -> np.ndarray:
    """One layer on a single graph: V_in (N, d_in) -> H (N, d_h)."""
    V_in = np.asarray(V_in, dtype=layer.G.dtype)
    if V_in.shape[1] != layer.d_in:
        raise DimensionError(f"conv layer expects width {layer.d_in}, got {V_in.shape[1]}")
    H, _ = conv_layer_forward(V_in[None], g.dense_alpha()[None], coords[None], layer)
    return H[0]


@dataclass
class ConvCache:
    X: np.ndarray
    alpha: np.ndarray
    U: np.ndarray
    Wk: np.ndarray
    C: np.ndarray
    F: np.ndarray
    O: np.ndarray


def conv_layer_forward(X: np.ndarray, alpha: np.ndarray, U: np.ndarray, layer: ConvLayer):
    """Batched layer. X (B, N, d_in), dense alpha (B, N, N), U (B, N, N, 2)."""
    if X.shape[-1] != layer.d_in:
        raise DimensionError(f"conv layer expects width {layer.d_in}, got {X.shape[-1]}")
    B, N, _ = X.shape
    K = layer.K
    Wk = kernel_weights(U, layer.mu, layer.log_sigma)  # (B, N, N, K)
    C = Wk * alpha[..., None]
    # f[b, i, k] = sum_j C[b, i, j, k] X[b, j]
    F = (C.transpose(0, 1, 3, 2).reshape(B, N * K, N) @ X).reshape(B, N, K, -1)
    # O[b, i, k] = G_k f[b, i, k]
    O = np.matmul(F.transpose(2, 0, 1, 3).reshape(K, B * N, -1), layer.G.transpose(0, 2, 1))
    O = O.reshape(K, B, N, -1).transpose(1, 2, 0, 3).reshape(B, N, -1)
    return relu(O), ConvCache(X, alpha, U, Wk, C, F, O)


def conv_layer_backward(dH: np.ndarray, cache: ConvCache | None, layer: ConvLayer):
    """Returns (grads for mu/log_sigma/G, dX, d_alpha dense)."""
    if cache is None:
        raise StateError("conv backward called without a cached forward pass")
    B, N, _ = cache.X.shape
    K, o, d_in = layer.G.shape
    dO = (dH * (cache.O > 0)).reshape(B, N, K, o)
    dOk = dO.transpose(2, 0, 1, 3).reshape(K, B * N, o)
    Fk = cache.F.transpose(2, 0, 1, 3).reshape(K, B * N, d_in)
    dG = np.matmul(dOk.transpose(0, 2, 1), Fk)
    dF = np.matmul(dOk, layer.G).reshape(K, B, N, d_in).transpose(1, 2, 0, 3)
    # dC[b, i, j, k] = <dF[b, i, k], X[b, j]>
    dC = (dF.reshape(B, N * K, d_in) @ cache.X.transpose(0, 2, 1)).reshape(B, N, K, N).transpose(0, 1, 3, 2)
    # dX[b, j] = sum_{i, k} C[b, i, j, k] dF[b, i, k]
    Ct = cache.C.transpose(0, 2, 1, 3).reshape(B, N, N * K)
    dX = Ct @ dF.reshape(B, N * K, d_in)
    d_alpha = np.sum(dC * cache.Wk, axis=-1)
    dWk = dC * cache.alpha[..., None]
    sig = clamp_sigma(layer.log_sigma)
    S = (cache.U[..., None, :] - layer.mu) / sig  # (B, N, N, K, 2)
    gw = (dWk * cache.Wk)[..., None] * S
    d_mu = gw.sum((0, 1, 2)) / sig
    live = (np.exp(layer.log_sigma) > SIGMA_MIN) & (np.exp(layer.log_sigma) < SIGMA_MAX)
    d_log_sigma = (gw * S).sum((0, 1, 2)) * live
    return {"mu": d_mu, "log_sigma": d_log_sigma, "G": dG}, dX, d_alpha
