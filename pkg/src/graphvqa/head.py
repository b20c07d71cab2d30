"""Prediction head, soft-target loss and the VQA accuracy metric."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import DTYPE, ConfigError, DimensionError, InputError, glorot, relu, sigmoid


@dataclass
class Mlp2:
    W1: np.ndarray  # (hidden, d_q)
    b1: np.ndarray
    W2: np.ndarray  # (C, hidden)
    b2: np.ndarray

    NAMES = ("W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, d_q: int, hidden: int, n_classes: int, rng: np.random.Generator, dtype=DTYPE) -> "Mlp2":
        return cls(
            glorot(rng, hidden, d_q, dtype),
            np.zeros(hidden, dtype=dtype),
            glorot(rng, n_classes, hidden, dtype),
            np.zeros(n_classes, dtype=dtype),
        )

    @classmethod
    def from_mapping(cls, p: Mapping[str, np.ndarray], prefix: str = "mlp.") -> "Mlp2":
        return cls(*(p[prefix + n] for n in cls.NAMES))

    def as_dict(self, prefix: str = "mlp.") -> dict[str, np.ndarray]:
        return {prefix + n: getattr(self, n) for n in self.NAMES}


def max_pool_nodes(H) -> np.ndarray:
    H = np.asarray(H)
    if H.shape[-2] == 0:
        raise InputError("cannot max-pool a graph with no nodes")
    return H.max(axis=-2)


def fuse(h_max, q) -> np.ndarray:
    h_max = np.asarray(h_max)
    q = np.asarray(q)
    if h_max.shape[-1] != q.shape[-1]:
        raise ConfigError(f"fusion needs equal widths, got {h_max.shape[-1]} and {q.shape[-1]}")
    return h_max * q


def classify(fused, mlp: Mlp2) -> np.ndarray:
    fused = np.asarray(fused, dtype=mlp.W1.dtype)
    if fused.shape[-1] != mlp.W1.shape[1]:
        raise DimensionError(f"classifier expects width {mlp.W1.shape[1]}, got {fused.shape[-1]}")
    return relu(fused @ mlp.W1.T + mlp.b1) @ mlp.W2.T + mlp.b2


def _check_lengths(t, y):
    dt = np.result_type(np.asarray(t).dtype, np.asarray(y).dtype, DTYPE)
    t = np.asarray(t, dtype=dt)
    y = np.asarray(y, dtype=dt)
    if t.shape != y.shape:
        raise DimensionError(f"targets {t.shape} and logits {y.shape} differ in shape")
    return t, y


def soft_bce_terms(t, y) -> np.ndarray:
    """Per-class BCE with logits, max(y, 0) - y t + log(1 + exp(-|y|))."""
    t, y = _check_lengths(t, y)
    return np.maximum(y, 0.0) - y * t + np.log1p(np.exp(-np.abs(y)))


def soft_bce_loss(t, y) -> float:
    return float(np.sum(soft_bce_terms(t, y)))


def soft_bce_grad(t, y) -> np.ndarray:
    t, y = _check_lengths(t, y)
    return sigmoid(y) - t


def make_soft_targets(answers: Sequence[str], class_index: Mapping[str, int], n: int | None = None) -> np.ndarray:
    """t_c = votes for class c / n; answers outside ``class_index`` are dropped."""
    n = len(answers) if n is None else n
    if n < 1:
        raise InputError("soft targets need at least one annotator")
    t = np.zeros(len(class_index), dtype=DTYPE)
    for a, votes in Counter(answers).items():
        c = class_index.get(a)
        if c is not None:
            t[c] = votes / n
    return t


def vqa_accuracy(predicted: str, answers: Sequence[str]) -> float:
    """min(#annotators who gave ``predicted`` / 3, 1)."""
    return min(sum(1 for a in answers if a == predicted) / 3.0, 1.0)


def answer_accuracy(predicted: str, answers: Sequence[str]) -> float:
    """VQA accuracy for multi-annotator items, exact match for single-answer ones."""
    if len(answers) == 1:
        return float(predicted == answers[0])
    return vqa_accuracy(predicted, answers)


def top_answers(answer_lists: Sequence[Sequence[str]], k: int = 3000) -> list[str]:
    """The k most frequent answers, ties broken alphabetically."""
    counts = Counter(a for answers in answer_lists for a in answers)
    return [a for a, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]
