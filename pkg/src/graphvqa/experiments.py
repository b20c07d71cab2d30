"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, SynthConfig, gen_synthetic
from .model import Model, ModelConfig
from .trainer import TrainConfig, evaluate, train

#: Model widths used for every desk experiment; vocabulary, classes and
#: feature width come from the dataset.
DESK_MODEL = dict(d_w=32, d_q=64, d_g=64, K=8, m=4, d_h=[128, 64], dropout_p=0.3)


def desk_model_config(ds: Dataset, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=len(ds.tokens), C=len(ds.answers), d_v_raw=ds.d_v - 4,
                       **{**DESK_MODEL, **overrides})


@dataclass
class RunResult:
    pathway: str
    seed: int
    val: dict
    train_acc: float
    seconds: float
    history: list = field(default_factory=list)

    def template(self, name: str) -> float:
        return self.val["by_template"].get(name, float("nan"))


def fit(ds: Dataset, pathway: str, seed: int, train_cfg: TrainConfig, **model_overrides) -> RunResult:
    """Train one model on ``ds`` and evaluate it on the validation split."""
    t0 = time.perf_counter()
    model = Model.init(desk_model_config(ds, pathway=pathway, **model_overrides), seed=seed)
    recs, _ = train(model, ds, replace(train_cfg, seed=seed), eval_indices=[])
    val = evaluate(model, ds, ds.split("val"))
    tr = evaluate(model, ds, ds.split("train"))["overall"]
    hist = [{"epoch": r["epoch"], "train_loss": r["train_loss"]} for r in recs]
    return RunResult(pathway, seed, val, tr, time.perf_counter() - t0, hist)


def learning_sanity(n_scenes: int = 2000, epochs: int = 20, seed: int = 0) -> RunResult:
    """Graph model on existence and attribute questions."""
    ds = gen_synthetic(SynthConfig(n_scenes=n_scenes, templates={"exist": 1.0, "attribute": 1.0}, seed=seed))
    cfg = TrainConfig(epochs=epochs, lr_halve_epoch=epochs)
    return fit(ds, "graph", seed, cfg)


def ablation(seeds=(0, 1, 2), n_scenes: int = 2000, epochs: int = 20,
             pathways=("graph", "knn", "attention")) -> dict:
    """Relation-only split; every pathway trained on the same data per seed.

    Returns per-pathway lists of validation accuracies and their means.
    """
    runs: dict[str, list[RunResult]] = {p: [] for p in pathways}
    for s in seeds:
        ds = gen_synthetic(SynthConfig(n_scenes=n_scenes, templates={"relation": 1.0}, seed=s))
        cfg = TrainConfig(epochs=epochs, lr_halve_epoch=epochs)
        for p in pathways:
            runs[p].append(fit(ds, p, s, cfg))
    return {
        "runs": runs,
        "mean": {p: float(np.mean([r.val["overall"] for r in rs])) for p, rs in runs.items()},
    }
