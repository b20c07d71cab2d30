"""Central finite-difference checks of the analytic backward passes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .core import GraphVQAError, InputError, Parameter, make_rng, sub_seed
from .data import Batch
from .graph import top_m_gap
from .model import Model, ModelConfig, tiny_config

TIE_GAP = 1e-6
DENOM_FLOOR = 1e-8


class OracleError(GraphVQAError, RuntimeError):
    pass


class TieError(GraphVQAError, RuntimeError):
    pass


def fd_gradient(loss_fn: Callable[[], float], p: Parameter | np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """(L(p + eps) - L(p - eps)) / (2 eps) element by element, perturbing ``p`` in place."""
    if not (1e-7 <= eps <= 1e-3):
        raise InputError(f"finite-difference step {eps} outside [1e-7, 1e-3]")
    value = p.value if isinstance(p, Parameter) else p
    if value.dtype != np.float64:
        raise InputError("finite differences need float64 parameters")
    out = np.zeros_like(value)
    flat = value.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = loss_fn()
        flat[i] = orig - eps
        lm = loss_fn()
        flat[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise OracleError(f"non-finite loss while perturbing element {i}")
        g[i] = (lp - lm) / (2.0 * eps)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), DENOM_FLOOR)


@dataclass
class GroupReport:
    max_rel: float
    max_abs: float
    eps: float
    precision: str
    n_elements: int


@dataclass
class GradReport:
    groups: dict[str, GroupReport] = field(default_factory=dict)
    tol: float = 1e-4
    seed: int = 0
    reseeds: int = 0

    @property
    def max_rel(self) -> float:
        return max((g.max_rel for g in self.groups.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tol

    def to_dict(self) -> dict:
        return {
            "passed": self.passed, "tol": self.tol, "seed": self.seed, "reseeds": self.reseeds,
            "max_rel": self.max_rel, "groups": {k: asdict(v) for k, v in self.groups.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def param_group(name: str) -> str:
    if name == "embed":
        return "embed"
    prefix, _, leaf = name.partition(".")
    if prefix.startswith("conv"):
        return leaf  # mu, log_sigma, G
    return prefix  # gru, F, mlp, att


def random_batch(cfg: ModelConfig, rng: np.random.Generator, n_objects: int = 5, batch: int = 2,
                 seq_len: int = 3) -> Batch:
    side = rng.uniform(0.1, 0.3, size=(batch, n_objects, 2))
    lo = rng.uniform(0.0, 1.0 - side)
    boxes = np.concatenate([lo, lo + side], axis=-1)
    feats = np.concatenate([rng.standard_normal((batch, n_objects, cfg.d_v_raw)), boxes], axis=-1)
    lengths = rng.integers(1, seq_len + 1, size=batch)
    lengths[0] = seq_len
    tokens = rng.integers(0, cfg.vocab_size, size=(batch, seq_len))
    targets = rng.uniform(0.0, 1.0, size=(batch, cfg.C))
    return Batch(feats, boxes, tokens, lengths, targets)


def _tie_free(model: Model, batch: Batch) -> bool:
    _, tr = model.forward(batch)
    if tr.graph is not None and top_m_gap(tr.graph.A, model.cfg.m) <= TIE_GAP:
        return False
    if tr.H is not None:
        s = -np.sort(-tr.H, axis=1)
        live = s[:, 0] > 0  # all-zero columns are dead ReLUs; their ties are stable
        if np.any((s[:, 0] - s[:, 1])[live] <= TIE_GAP):
            return False
    return True


def check_model(cfg: ModelConfig | None = None, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
                mutate: str | None = None, n_objects: int = 5, batch_size: int = 2,
                loss_precision: str = "longdouble") -> GradReport:
    """Compare analytic and finite-difference gradients for every trainable group.

    Parameters stay float64 and are perturbed by ``eps``; the perturbed loss is
    evaluated in ``loss_precision``. Extended precision keeps roundoff in the
    differences (about 1e-11 in float64) from swamping gradient entries of
    order 1e-7 and below.
    """
    cfg = cfg or tiny_config()
    if cfg.dtype != "float64":
        raise InputError("gradient checks run in float64 only")
    for attempt in range(11):
        s = seed if attempt == 0 else sub_seed(seed, attempt)
        model = Model.init(cfg, seed=s)
        batch = random_batch(cfg, make_rng(sub_seed(s, 1)), n_objects=n_objects, batch=batch_size)
        if not _tie_free(model, batch):
            continue
        report = _compare(model, batch, eps, tol, mutate, np.dtype(loss_precision))
        if report is not None:
            report.seed, report.reseeds = seed, attempt
            return report
    raise TieError(f"top-m or max-pool ties persist after 10 reseeds of seed {seed}")


def _routing(tr) -> tuple:
    """Every discrete decision in a forward pass: top-m sets, max-pool winners, ReLU masks."""
    out = [tr.nbr, tr.argmax, tr.z1 > 0]
    if tr.graph is not None:
        out += [tr.graph.Z1 > 0, tr.graph.Z2 > 0]
    out += [c.O > 0 for c in tr.convs]
    if tr.att is not None:
        out.append(tr.att.Z > 0)
    return tuple(None if x is None else np.array(x, copy=True) for x in out)


def _same_routing(a: tuple, b: tuple) -> bool:
    return all((x is None and y is None) or np.array_equal(x, y) for x, y in zip(a, b))


def _compare(model: Model, batch: Batch, eps: float, tol: float, mutate: str | None, loss_dt) -> GradReport | None:
    """None if some perturbation flips a routing decision or crosses a ReLU kink."""
    _, tr = model.forward(batch)
    base = _routing(tr)
    flipped = False

    def loss_fn():
        nonlocal flipped
        logits, t = model.forward(batch, dtype=loss_dt)
        flipped = flipped or not _same_routing(base, _routing(t))
        return Model.loss(logits, batch.targets)

    model.mutate = mutate
    _, analytic = model.backward(tr, accumulate=False)
    report = GradReport(tol=tol)
    per_group: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for name, p in model.params.items():
        if not p.trainable:
            continue
        num = fd_gradient(loss_fn, p, eps)
        per_group.setdefault(param_group(name), []).append((analytic[name].ravel(), num.ravel()))
    if flipped:
        return None
    for group, pairs in per_group.items():
        a = np.concatenate([x for x, _ in pairs])
        b = np.concatenate([y for _, y in pairs])
        report.groups[group] = GroupReport(
            float(rel_error(a, b).max()), float(np.abs(a - b).max()), eps,
            f"float64 params, {loss_dt.name} loss", int(a.size)
        )
    return report
