"""Command line interface: gen, train, eval, sweep, explain, gradcheck.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error,
3 gradient check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .core import ConfigError, GraphVQAError, InputError
from .data import QUESTION_TYPES, Dataset, SynthConfig, gen_synthetic, read_dataset, write_dataset
from .explain import explain, to_dot
from .gradcheck import check_model
from .model import PATHWAYS, Model, ModelConfig, tiny_config
from .trainer import Checkpoint, TrainConfig, evaluate, train

log = logging.getLogger("graphvqa")

CONFIG_ENV = "GRAPHVQA_CONFIG"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK_FAILED = 0, 1, 2, 3
DATA_DERIVED = ("vocab_size", "C", "d_v_raw")


class UsageError(GraphVQAError):
    pass


def _from_dict(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class RunConfig:
    """Data, model and training settings as one document.

    ``model`` holds overrides on ``ModelConfig``; vocabulary size, class count
    and feature width are filled in from the dataset.
    """

    data: SynthConfig = field(default_factory=SynthConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("run config must be a mapping")
        unknown = set(d) - {"data", "model", "train"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = dict(d.get("model") or {})
        _from_dict(ModelConfig, model, "model")  # key check only
        rc = cls(
            _from_dict(SynthConfig, dict(d.get("data") or {}), "data"),
            model,
            _from_dict(TrainConfig, dict(d.get("train") or {}), "train"),
        )
        rc.validate()
        return rc

    def validate(self) -> None:
        self.data.validate()
        self.train.validate()
        self.model_config(vocab_size=1, C=1, d_v_raw=1, check=False).validate()

    def to_dict(self) -> dict:
        return {"data": asdict(self.data), "model": dict(self.model), "train": asdict(self.train)}

    def model_config(self, vocab_size: int, C: int, d_v_raw: int, check: bool = True) -> ModelConfig:
        derived = {"vocab_size": vocab_size, "C": C, "d_v_raw": d_v_raw}
        for k, v in derived.items():
            if check and k in self.model and self.model[k] != v:
                raise ConfigError(f"model.{k}={self.model[k]} does not match the dataset ({v})")
        return ModelConfig(**{**self.model, **derived})

    def model_for(self, ds: Dataset) -> ModelConfig:
        return self.model_config(len(ds.tokens), len(ds.answers), ds.d_v - 4)


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    """Read YAML or JSON; with no path fall back to $GRAPHVQA_CONFIG, then defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig.from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: {e}") from None
    return RunConfig.from_dict(doc)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _apply_overrides(rc: RunConfig, args) -> RunConfig:
    if getattr(args, "model", None):
        rc.model["pathway"] = args.model
    for name in ("epochs", "lr", "batch_size"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(rc.train, name, v)
    if getattr(args, "epochs", None) is not None and rc.train.lr_halve_epoch > rc.train.epochs:
        rc.train.lr_halve_epoch = rc.train.epochs
    if getattr(args, "seed", None) is not None:
        rc.train.seed = args.seed
    rc.validate()
    return rc


def _dataset(rc: RunConfig, data_dir) -> Dataset:
    if data_dir:
        if not Path(data_dir).is_dir():
            raise ConfigError(f"dataset directory not found: {data_dir}")
        return read_dataset(data_dir)
    return gen_synthetic(rc.data)


def _format_eval(ev: dict) -> str:
    cols = ["overall", *QUESTION_TYPES]
    vals = [ev["overall"], *(ev["by_type"].get(t, float("nan")) for t in QUESTION_TYPES)]
    head = "\t".join(cols)
    return head + "\n" + "\t".join(f"{v:.4f}" for v in vals)


# -- commands -----------------------------------------------------------------------

def cmd_gen(args) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc.data.seed = args.seed
    if args.n_scenes is not None:
        rc.data.n_scenes = args.n_scenes
    rc.validate()
    ds = gen_synthetic(rc.data)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.scenes)} scenes, {len(ds.items)} questions to {args.out}")
    return EXIT_OK


def run_training(rc: RunConfig, ds: Dataset, out: Path, resume: Path | None = None) -> tuple[list[dict], Checkpoint]:
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoint"
    log_path = out / "train.jsonl"
    ckpt = None
    if resume is not None:
        ckpt = Checkpoint.load(resume)
        model = ckpt.model()
        if ckpt.model_cfg != rc.model_for(ds):
            raise ConfigError("checkpoint model config differs from the run config")
        # drop log lines written after the checkpoint
        if log_path.exists():
            kept = [l for l in log_path.read_text().splitlines(keepends=True)
                    if json.loads(l)["epoch"] <= ckpt.epoch]
            log_path.write_text("".join(kept))
    else:
        model = Model.init(rc.model_for(ds), seed=rc.train.seed)
    _write_json(out / "run.json", {
        "version": __version__, "config": rc.to_dict(), "model": model.cfg.to_dict(),
        "n_params": model.n_params(), "n_items": len(ds.items), "n_scenes": len(ds.scenes),
    })
    return train(model, ds, rc.train, log_path=log_path, checkpoint_dir=ckpt_dir, resume=ckpt,
                 on_epoch=lambda r: print(json.dumps(r, sort_keys=True), flush=True))


def cmd_train(args) -> int:
    rc = _apply_overrides(load_run_config(args.config), args)
    ds = _dataset(rc, args.data)
    recs, ck = run_training(rc, ds, Path(args.out), Path(args.resume) if args.resume else None)
    print(f"finished epoch {ck.epoch}; checkpoint in {Path(args.out) / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    model = ck.model()
    ds = read_dataset(args.data)
    idx = ds.split(args.split) if args.split != "all" else None
    if idx is not None and not idx:
        raise ConfigError(f"split {args.split!r} is empty")
    ev = evaluate(model, ds, idx)
    if args.json:
        _write_json(Path(args.json), ev)
    print(_format_eval(ev))
    return EXIT_OK


SWEEP_COLUMNS = ("K", "m", "overall", *QUESTION_TYPES, "relation")


def sweep_cell_path(out: Path, K: int, m: int) -> Path:
    return out / f"cell_K{K}_m{m}.json"


def run_sweep(rc: RunConfig, ds: Dataset, out: Path, Ks: Sequence[int], ms: Sequence[int]) -> list[dict]:
    """Train and evaluate each (K, m); finished cells on disk are reused."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for K in Ks:
        for m in ms:
            path = sweep_cell_path(out, K, m)
            if path.exists():
                rows.append(json.loads(path.read_text()))
                continue
            cell = RunConfig(rc.data, {**rc.model, "K": K, "m": m}, rc.train)
            model = Model.init(cell.model_for(ds), seed=rc.train.seed)
            recs, _ = train(model, ds, rc.train, eval_indices=[])
            ev = evaluate(model, ds, ds.split(rc.train.eval_split))
            row = {"K": K, "m": m, "overall": ev["overall"], "n": ev["n"], "epochs": len(recs)}
            row.update({t: ev["by_type"].get(t) for t in QUESTION_TYPES})
            row["relation"] = ev["by_template"].get("relation")
            _write_json(path, row)
            rows.append(row)
    lines = ["\t".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append("\t".join(str(r[c]) if c in ("K", "m") else
                               ("nan" if r.get(c) is None else f"{r[c]:.4f}") for c in SWEEP_COLUMNS))
    (out / "sweep.tsv").write_text("\n".join(lines) + "\n")
    return rows


def cmd_sweep(args) -> int:
    rc = _apply_overrides(load_run_config(args.config), args)
    ds = _dataset(rc, args.data)
    run_sweep(rc, ds, Path(args.out), args.K, args.m)
    print((Path(args.out) / "sweep.tsv").read_text(), end="")
    return EXIT_OK


def cmd_explain(args) -> int:
    model = Checkpoint.load(args.checkpoint).model()
    ds = read_dataset(args.data)
    try:
        ex = explain(model, ds, args.qid)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    Path(args.out).write_text(ex.to_json(), encoding="utf-8")
    if args.dot:
        Path(args.dot).write_text(to_dot(ex), encoding="utf-8")
    print(f"{ex.question} -> {ex.predicted} ({ex.score:.3f}); top-degree nodes {ex.top_degree()}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = tiny_config(pathway=args.model or "graph")
    rep = check_model(cfg, seed=args.seed, eps=args.eps, tol=args.tol, mutate=args.mutate)
    if args.json:
        Path(args.json).write_text(rep.to_json(), encoding="utf-8")
    for name, g in sorted(rep.groups.items()):
        print(f"{name:12s} max_rel={g.max_rel:.3e} max_abs={g.max_abs:.3e} n={g.n_elements}")
    print(f"{'PASS' if rep.passed else 'FAIL'} max_rel={rep.max_rel:.3e} tol={args.tol:g}")
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphvqa", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"graphvqa {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help=f"YAML/JSON run config (default: ${CONFIG_ENV})")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-scenes", type=int)
    p.set_defaults(fn=cmd_gen)

    def train_flags(p):
        with_config(p)
        p.add_argument("--data", help="dataset directory (default: generate from the config)")
        p.add_argument("--model", choices=PATHWAYS)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model")
    train_flags(p)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="grid over kernel count K and neighbourhood size m")
    train_flags(p)
    p.add_argument("--K", type=_int_list, default=[2, 4, 8])
    p.add_argument("--m", type=_int_list, default=[2, 4, 8])
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("explain", help="export the learned graph for one question")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--qid", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dot")
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--model", choices=PATHWAYS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--mutate", choices=["sign-flip"])
    p.add_argument("--json")
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError, InputError, TypeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except GraphVQAError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
