"""Array helpers, parameters and seeded randomness shared by every layer.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. float64 is
the default; float32 is accepted for speed but never for gradient checks.
Randomness always goes through ``numpy.random.Generator`` on the PCG64 bit
generator, whose output stream is specified and platform independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64


class GraphVQAError(Exception):
    """Base class for library errors."""


class DimensionError(GraphVQAError, ValueError):
    pass


class ConfigError(GraphVQAError, ValueError):
    pass


class InputError(GraphVQAError, ValueError):
    pass


class StateError(GraphVQAError, RuntimeError):
    pass


class TrainingError(GraphVQAError, RuntimeError):
    pass


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    trainable: bool = True

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape} for {self.name}"
            )

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sub_seed(seed: int, *keys: int) -> int:
    """Derive a child seed from ``seed`` and integer keys (e.g. an image id)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def as_matrix(x, dtype=DTYPE) -> np.ndarray:
    a = np.asarray(x, dtype=dtype)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-d array, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_masked(values: Sequence[float], selected: Iterable[int]) -> np.ndarray:
    """Softmax of ``values`` restricted to the ``selected`` indices.

    Returns one weight per selected index, in the order given.
    """
    idx = np.asarray(list(selected), dtype=np.int64)
    if idx.size == 0:
        raise InputError("softmax over an empty selection")
    v = np.asarray(values, dtype=DTYPE)[idx]
    if not np.all(np.isfinite(v)):
        raise InputError("softmax input contains non-finite values")
    ex = np.exp(v - v.max())
    return ex / ex.sum()


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    ex = np.exp(x - x.max(axis=-1, keepdims=True))
    return ex / ex.sum(axis=-1, keepdims=True)


def check_dropout_p(p: float) -> None:
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=DTYPE) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    check_dropout_p(p)
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    check_dropout_p(p)
    x = np.asarray(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    return x * dropout_mask(x.shape, p, rng, dtype=x.dtype)


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=DTYPE) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in)).astype(dtype)


def he(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=DTYPE) -> np.ndarray:
    return (rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)).astype(dtype)
