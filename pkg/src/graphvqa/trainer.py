"""Adam training loop, evaluation and checkpoints.

Checkpoints are directories holding ``manifest.json`` (format version, model
and training config, epoch, optimiser step, RNG state, and for every array
its name, shape, dtype and byte offset) plus ``arrays.bin`` with the raw
little-endian arrays back to back.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import ConfigError, Parameter, TrainingError, make_rng, restore_rng, sub_seed
from .data import QUESTION_TYPES, Dataset, iter_batches
from .head import answer_accuracy
from .model import Model, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "graphvqa-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    lr_halve_epoch: int = 40
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    train_split: str = "train"
    eval_split: str = "val"

    def validate(self) -> None:
        for name in ("lr", "batch_size", "epochs", "lr_halve_epoch", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.lr_halve_epoch > self.epochs:
            raise ConfigError(f"lr_halve_epoch={self.lr_halve_epoch} exceeds epochs={self.epochs}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def full_scale_train_config(**overrides) -> TrainConfig:
    base = dict(lr=1e-4, batch_size=64, epochs=35, lr_halve_epoch=30)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: halved once after ``lr_halve_epoch``."""
    return cfg.lr * (0.5 if epoch > cfg.lr_halve_epoch else 1.0)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Sequence[Parameter], lr: float) -> None:
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for parameter {p.name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in params:
            g = p.grad
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: Sequence[Parameter], opt: Adam, lr: float) -> None:
    opt.step(params, lr)


# -- evaluation -------------------------------------------------------------------

def evaluate(model: Model, ds: Dataset, indices: Sequence[int] | None = None, batch_size: int = 256) -> dict:
    """Accuracy overall and per question type / template, in eval mode."""
    if indices is None:
        indices = list(range(len(ds.items)))
    by_type: dict[str, list[float]] = defaultdict(list)
    by_template: dict[str, list[float]] = defaultdict(list)
    scores = []
    for chunk in iter_batches(indices, batch_size):
        batch = ds.batch(chunk)
        pred = model.predict(batch).argmax(axis=1)
        for it, c in zip(batch.items, pred):
            acc = answer_accuracy(ds.answers[c], it.answers)
            scores.append(acc)
            by_type[it.qtype].append(acc)
            by_template[it.template or it.qtype].append(acc)
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return {
        "overall": mean(scores),
        "n": len(scores),
        "by_type": {t: mean(by_type[t]) for t in QUESTION_TYPES if by_type[t]},
        "by_template": {t: mean(v) for t, v in sorted(by_template.items())},
    }


# -- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: dict[str, np.ndarray]
    train_cfg: TrainConfig | None = None
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: Model, opt: Adam | None = None, train_cfg: TrainConfig | None = None,
                epoch: int = 0, rng: np.random.Generator | None = None, meta: dict | None = None) -> "Checkpoint":
        return cls(
            model.cfg, {k: p.value.copy() for k, p in model.params.items()}, train_cfg,
            {k: v.copy() for k, v in (opt.m if opt else {}).items()},
            {k: v.copy() for k, v in (opt.v if opt else {}).items()},
            opt.t if opt else 0, epoch, rng.bit_generator.state if rng is not None else None, dict(meta or {}),
        )

    def model(self) -> Model:
        m = Model.init(self.model_cfg, seed=0)
        for k, p in m.params.items():
            if k not in self.params:
                raise ConfigError(f"checkpoint lacks parameter {k}")
            if self.params[k].shape != p.value.shape:
                raise ConfigError(f"checkpoint parameter {k} has shape {self.params[k].shape}, expected {p.value.shape}")
            p.value[...] = self.params[k]
        return m

    def optimizer(self) -> Adam:
        tc = self.train_cfg or TrainConfig()
        opt = Adam(tc.beta1, tc.beta2, tc.adam_eps)
        opt.m = {k: v.copy() for k, v in self.adam_m.items()}
        opt.v = {k: v.copy() for k, v in self.adam_v.items()}
        opt.t = self.adam_t
        return opt

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries, chunks, offset = [], [], 0
        groups = [("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v)]
        for kind, arrays in groups:
            for name in sorted(arrays):
                a = np.ascontiguousarray(arrays[name], dtype=arrays[name].dtype.newbyteorder("<"))
                raw = a.tobytes()
                entries.append({"kind": kind, "name": name, "shape": list(a.shape), "dtype": a.dtype.str,
                                "offset": offset, "nbytes": len(raw)})
                chunks.append(raw)
                offset += len(raw)
        manifest = {
            "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "model": self.model_cfg.to_dict(),
            "train": asdict(self.train_cfg) if self.train_cfg else None,
            "epoch": self.epoch, "adam_t": self.adam_t, "rng_state": self.rng_state,
            "meta": self.meta, "arrays": entries,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        (path / "arrays.bin").write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
        raw = (path / "arrays.bin").read_bytes()
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for e in manifest["arrays"]:
            a = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                              offset=e["offset"]).reshape(e["shape"])
            groups[e["kind"]][e["name"]] = a.astype(a.dtype.newbyteorder("="))
        train = manifest.get("train")
        return cls(
            ModelConfig.from_dict(manifest["model"]), groups["param"],
            TrainConfig.from_dict(train) if train else None,
            groups["adam_m"], groups["adam_v"], manifest["adam_t"], manifest["epoch"],
            manifest.get("rng_state"), manifest.get("meta", {}),
        )


# -- training -----------------------------------------------------------------------

def _record_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True) + "\n"


def train(model: Model, ds: Dataset, cfg: TrainConfig, log_path=None, checkpoint_dir=None,
          resume: Checkpoint | None = None, on_epoch: Callable[[dict], None] | None = None,
          eval_indices: Sequence[int] | None = None) -> tuple[list[dict], Checkpoint]:
    """Train with Adam, halving the learning rate once; return per-epoch records and the final checkpoint.

    Shuffling uses a sub-seed per epoch and dropout draws from one RNG stream
    saved in checkpoints, so resuming reproduces the uninterrupted run.
    """
    cfg.validate()
    train_idx = ds.split(cfg.train_split)
    if not train_idx:
        raise ConfigError(f"split {cfg.train_split!r} is empty")
    if eval_indices is None:
        eval_indices = ds.split(cfg.eval_split)
    if resume is not None:
        opt = resume.optimizer()
        start = resume.epoch
        drop_rng = restore_rng(resume.rng_state) if resume.rng_state else make_rng(sub_seed(cfg.seed, 1))
    else:
        opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
        start = 0
        drop_rng = make_rng(sub_seed(cfg.seed, 1))
    records: list[dict] = []
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume is not None else "w", encoding="utf-8")
    last_good = Checkpoint.capture(model, opt, cfg, start, drop_rng)
    try:
        for epoch in range(start + 1, cfg.epochs + 1):
            lr = lr_at(cfg, epoch)
            order = make_rng(sub_seed(cfg.seed, 2, epoch)).permutation(np.asarray(train_idx))
            total, count, steps = 0.0, 0, 0
            for chunk in iter_batches(order.tolist(), cfg.batch_size):
                batch = ds.batch(chunk)
                model.zero_grad()
                _, trace = model.forward(batch, training=True, rng=drop_rng)
                loss, _ = model.backward(trace)
                if not math.isfinite(loss):
                    if checkpoint_dir is not None:
                        last_good.save(Path(checkpoint_dir))
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {steps}")
                opt.step(model.trainable(), lr)
                total += loss * len(chunk)
                count += len(chunk)
                steps += 1
            rec = {"epoch": epoch, "lr": lr, "steps": steps, "train_loss": total / count}
            if eval_indices:
                ev = evaluate(model, ds, eval_indices)
                rec["eval_acc"] = ev["overall"]
                rec["eval_by_type"] = ev["by_type"]
                rec["eval_by_template"] = ev["by_template"]
            records.append(rec)
            if log_fh:
                log_fh.write(_record_line(rec))
                log_fh.flush()
            log.info("epoch %d lr %.3g loss %.4f acc %s", epoch, lr, rec["train_loss"], rec.get("eval_acc"))
            last_good = Checkpoint.capture(model, opt, cfg, epoch, drop_rng)
            if checkpoint_dir is not None:
                last_good.save(Path(checkpoint_dir))
            if on_epoch:
                on_epoch(rec)
    finally:
        if log_fh:
            log_fh.close()
    return records, last_good
