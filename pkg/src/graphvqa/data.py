"""Scenes, questions, a synthetic scene-QA generator and on-disk formats.

Synthetic scenes hold N objects with a colour, shape and size. Each object's
raw feature is one-hot attribute blocks plus Gaussian noise, padded with
noise-only channels up to ``d_feat``; the model input appends the four
normalised box corners.

Dataset directory layout (all little-endian, all headers versioned)::

    scenes.bin     one JSON header line, then image ids (<i8, S), boxes
                   (<f8, S x N x 4), features (<f8, S x N x d) and, for
                   synthetic data, attribute indices (<i8, S x N x 3)
    questions.txt  JSON header line, then one JSON record per question
    vocab.txt      header line, then ``token <word>`` / ``answer <word>``
                   lines; indices follow line order within each kind
"""

from __future__ import annotations

import base64
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import DTYPE, ConfigError, GraphVQAError, InputError, make_rng, sub_seed
from .encoder import OOV_TOKEN, build_vocab, pad_sequences
from .graph import LearnedGraph, top_m
from .head import make_soft_targets

log = logging.getLogger(__name__)

SCENES_FORMAT = "graphvqa-scenes"
QUESTIONS_FORMAT = "graphvqa-questions"
VOCAB_FORMAT = "graphvqa-vocab"
FORMAT_VERSION = 1

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("cube", "sphere", "cylinder", "cone")
SIZES = ("small", "large")
RELATIONS = ("left", "above")
TEMPLATES = ("count", "exist", "attribute", "relation")
QTYPE = {"count": "number", "exist": "yes/no", "attribute": "other", "relation": "other"}
QUESTION_TYPES = ("yes/no", "number", "other")

MARGIN = 0.05


class ParseError(GraphVQAError, ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class GenerationError(GraphVQAError, RuntimeError):
    pass


@dataclass
class Scene:
    image_id: int
    boxes: np.ndarray  # (N, 4) normalised x1, y1, x2, y2
    features: np.ndarray  # (N, d_feat)
    attrs: np.ndarray | None = None  # (N, 3) colour, shape, size indices

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=DTYPE)
        self.features = np.asarray(self.features, dtype=DTYPE)
        validate_boxes(self.boxes)
        if self.features.ndim != 2 or self.features.shape[0] != self.boxes.shape[0]:
            raise InputError(
                f"scene {self.image_id}: {self.boxes.shape[0]} boxes but features of shape {self.features.shape}"
            )

    @property
    def n_objects(self) -> int:
        return self.boxes.shape[0]

    def node_features(self) -> np.ndarray:
        return np.concatenate([self.features, self.boxes], axis=1)

    def centres(self) -> np.ndarray:
        return 0.5 * (self.boxes[:, :2] + self.boxes[:, 2:])


@dataclass
class QAItem:
    qid: int
    image_id: int
    tokens: list[str]
    qtype: str
    answers: list[str]
    template: str = ""
    split: str = "train"

    def __post_init__(self):
        if not self.tokens:
            raise InputError(f"question {self.qid} is empty")
        if not self.answers:
            raise InputError(f"question {self.qid} has no answers")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class SynthConfig:
    n_scenes: int = 2000
    n_objects: int = 8
    d_feat: int = 32
    colors: list = field(default_factory=lambda: list(COLORS))
    shapes: list = field(default_factory=lambda: list(SHAPES))
    sizes: list = field(default_factory=lambda: list(SIZES))
    relations: list = field(default_factory=lambda: list(RELATIONS))
    feature_noise: float = 0.02
    templates: dict = field(default_factory=lambda: {t: 1.0 for t in TEMPLATES})
    questions_per_scene: int = 8
    val_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_scenes < 1 or self.n_objects < 2:
            raise ConfigError("need at least one scene and two objects per scene")
        n_onehot = len(self.colors) + len(self.shapes) + len(self.sizes)
        if self.d_feat < n_onehot:
            raise ConfigError(f"d_feat={self.d_feat} cannot hold {n_onehot} attribute channels")
        unknown = set(self.templates) - set(TEMPLATES)
        if unknown:
            raise ConfigError(f"unknown question templates: {sorted(unknown)}")
        if not any(w > 0 for w in self.templates.values()):
            raise ConfigError("at least one question template must be enabled")
        if any(w < 0 for w in self.templates.values()):
            raise ConfigError("template weights must be non-negative")
        if set(self.relations) - set(RELATIONS) or not self.relations:
            raise ConfigError(f"relations must be a non-empty subset of {RELATIONS}")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.questions_per_scene < 1:
            raise ConfigError("questions_per_scene must be positive")
        if self.feature_noise < 0:
            raise ConfigError("feature_noise must be non-negative")


@dataclass
class Dataset:
    scenes: list[Scene]
    items: list[QAItem]
    tokens: list[str]  # question vocabulary, index 0 is the OOV token
    answers: list[str]  # answer classes

    def __post_init__(self):
        self.token_index = build_vocab(self.tokens[1:]) if self.tokens else {OOV_TOKEN: 0}
        self.answer_index = {a: i for i, a in enumerate(self.answers)}
        self.scene_row = {s.image_id: i for i, s in enumerate(self.scenes)}
        if self.scenes:
            self.node_feats = np.stack([s.node_features() for s in self.scenes])
            self.boxes = np.stack([s.boxes for s in self.scenes])
        else:
            self.node_feats = np.zeros((0, 0, 0))
            self.boxes = np.zeros((0, 0, 4))

    @property
    def n_objects(self) -> int:
        return self.boxes.shape[1]

    @property
    def d_v(self) -> int:
        return self.node_feats.shape[2]

    def split(self, name: str) -> list[int]:
        return [i for i, it in enumerate(self.items) if it.split == name]

    def item_by_qid(self, qid: int) -> int:
        for i, it in enumerate(self.items):
            if it.qid == qid:
                return i
        raise KeyError(qid)

    def encode_tokens(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_index.get(t, 0) for t in tokens]

    def batch(self, indices: Sequence[int]) -> "Batch":
        items = [self.items[i] for i in indices]
        rows = np.asarray([self.scene_row[it.image_id] for it in items], dtype=np.int64)
        tok, lengths = pad_sequences([self.encode_tokens(it.tokens) for it in items])
        targets = np.stack([make_soft_targets(it.answers, self.answer_index) for it in items])
        return Batch(self.node_feats[rows], self.boxes[rows], tok, lengths, targets, items)


@dataclass
class Batch:
    feats: np.ndarray  # (B, N, d_v) with corners appended
    boxes: np.ndarray  # (B, N, 4)
    tokens: np.ndarray  # (B, T)
    lengths: np.ndarray  # (B,)
    targets: np.ndarray  # (B, C)
    items: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.feats.shape[0]

    def permute_objects(self, perm: np.ndarray) -> "Batch":
        return Batch(self.feats[:, perm], self.boxes[:, perm], self.tokens, self.lengths, self.targets, self.items)


def validate_boxes(boxes: np.ndarray) -> None:
    b = np.asarray(boxes)
    if b.ndim != 2 or b.shape[1] != 4:
        raise InputError(f"boxes must have shape (N, 4), got {b.shape}")
    if not np.all(np.isfinite(b)):
        raise InputError("box corners must be finite")
    bad = np.where((b < 0.0) | (b > 1.0))
    if bad[0].size:
        i, c = int(bad[0][0]), int(bad[1][0])
        raise InputError(f"box {i} corner {c} = {b[i, c]} lies outside [0, 1]")
    if np.any(b[:, 0] > b[:, 2]) or np.any(b[:, 1] > b[:, 3]):
        raise InputError("box corners must satisfy x1 <= x2 and y1 <= y2")


def normalise_boxes(boxes_px, width: float, height: float) -> np.ndarray:
    b = np.asarray(boxes_px, dtype=DTYPE).copy()
    b[:, [0, 2]] /= float(width)
    b[:, [1, 3]] /= float(height)
    return b


def synthetic_vocab(cfg: SynthConfig) -> tuple[list[str], list[str]]:
    words = ["how", "many", "objects", "are", "there", "is", "a", "what", "color", "shape", "size",
             "the", "object", "of"] + ["left", "above"]
    attrs = list(cfg.colors) + list(cfg.shapes) + list(cfg.sizes)
    tokens = [OOV_TOKEN] + sorted(set(words + attrs))
    answers = sorted(set(attrs)) + [str(d) for d in range(10)] + ["no", "yes"]
    return tokens, answers


# -- scene sampling ---------------------------------------------------------------

def _sample_boxes(rng: np.random.Generator, sizes: np.ndarray) -> np.ndarray:
    n = len(sizes)
    side = np.where(sizes == 0, rng.uniform(0.08, 0.12, n), rng.uniform(0.16, 0.22, n))
    aspect = rng.uniform(0.8, 1.25, n)
    w, h = side * np.sqrt(aspect), side / np.sqrt(aspect)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def _features(rng: np.random.Generator, attrs: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    n = attrs.shape[0]
    nc, ns = len(cfg.colors), len(cfg.shapes)
    f = np.zeros((n, cfg.d_feat))
    f[np.arange(n), attrs[:, 0]] = 1.0
    f[np.arange(n), nc + attrs[:, 1]] = 1.0
    f[np.arange(n), nc + ns + attrs[:, 2]] = 1.0
    return f + cfg.feature_noise * rng.standard_normal(f.shape)


def _sample_scene(rng: np.random.Generator, cfg: SynthConfig, image_id: int) -> Scene:
    n = cfg.n_objects
    attrs = np.stack([
        rng.integers(0, len(cfg.colors), n),
        rng.integers(0, len(cfg.shapes), n),
        rng.integers(0, len(cfg.sizes), n),
    ], axis=1)
    boxes = _sample_boxes(rng, attrs[:, 2])
    return Scene(image_id, boxes, _features(rng, attrs, cfg), attrs)


# -- question construction ----------------------------------------------------------

def _rel_coord(rel: str) -> int:
    return 0 if rel == "left" else 1


def _rel_phrase(rel: str) -> list[str]:
    return ["left", "of"] if rel == "left" else ["above"]


def _q_count(rng, scene: Scene, cfg: SynthConfig):
    kind = int(rng.integers(0, 3))
    vocab = (cfg.colors, cfg.shapes, cfg.sizes)[kind]
    v = int(rng.integers(0, len(vocab)))
    n = int(np.sum(scene.attrs[:, kind] == v))
    return ["how", "many", vocab[v], "objects", "are", "there"], str(n)


def _q_exist(rng, scene: Scene, cfg: SynthConfig):
    present = {(int(c), int(s)) for c, s, _ in scene.attrs}
    if rng.random() < 0.5:
        c, s = sorted(present)[int(rng.integers(0, len(present)))]
    else:
        absent = [(c, s) for c in range(len(cfg.colors)) for s in range(len(cfg.shapes)) if (c, s) not in present]
        if not absent:
            return None
        c, s = absent[int(rng.integers(0, len(absent)))]
    ans = "yes" if (c, s) in present else "no"
    return ["is", "there", "a", cfg.colors[c], cfg.shapes[s]], ans


def _q_attribute(rng, scene: Scene, cfg: SynthConfig):
    names = (cfg.colors, cfg.shapes, cfg.sizes)
    order = rng.permutation(scene.n_objects)
    # ask the remaining attribute of an object picked out by the other two
    for ask in rng.permutation(3):
        k1, k2 = [k for k in range(3) if k != ask]
        for o in order:
            a = scene.attrs[o]
            same = np.sum((scene.attrs[:, k1] == a[k1]) & (scene.attrs[:, k2] == a[k2]))
            if same != 1:
                continue
            ans = names[ask][a[ask]]
            if ask == 0:
                toks = ["what", "color", "is", "the", cfg.sizes[a[2]], cfg.shapes[a[1]]]
            elif ask == 2:
                toks = ["what", "size", "is", "the", cfg.colors[a[0]], cfg.shapes[a[1]]]
            else:
                toks = ["what", "shape", "is", "the", cfg.sizes[a[2]], cfg.colors[a[0]], "object"]
            return toks, ans
    return None


def _q_relation(rng, scene: Scene, cfg: SynthConfig):
    """'what color is the <shape> left of / above the <shape>' with a unique referent.

    The referent's shape must also appear on the far side of the reference
    object in a different colour, so shape alone never answers the question.
    """
    c = scene.centres()
    shapes, colors = scene.attrs[:, 1], scene.attrs[:, 0]
    options = []
    for rel in cfg.relations:
        ax = _rel_coord(rel)
        for ref in range(scene.n_objects):
            if np.sum(shapes == shapes[ref]) != 1:
                continue
            d = c[:, ax] - c[ref, ax]
            for s1 in range(len(cfg.shapes)):
                if s1 == shapes[ref]:
                    continue
                cand = np.where(shapes == s1)[0]
                before = cand[d[cand] < -MARGIN]
                after = cand[d[cand] > MARGIN]
                if len(before) != 1 or len(before) + len(after) != len(cand) or len(after) == 0:
                    continue
                if np.any(colors[after] == colors[before[0]]):
                    continue
                options.append((rel, ref, s1, int(before[0])))
    if not options:
        return None
    rel, ref, s1, tgt = options[int(rng.integers(0, len(options)))]
    toks = ["what", "color", "is", "the", cfg.shapes[s1], *_rel_phrase(rel), "the", cfg.shapes[shapes[ref]]]
    return toks, cfg.colors[colors[tgt]]


_BUILDERS = {"count": _q_count, "exist": _q_exist, "attribute": _q_attribute, "relation": _q_relation}


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    tokens, answers = synthetic_vocab(cfg)
    names = [t for t in TEMPLATES if cfg.templates.get(t, 0) > 0]
    weights = np.asarray([cfg.templates[t] for t in names], dtype=float)
    weights /= weights.sum()
    n_val = int(round(cfg.n_scenes * cfg.val_fraction))
    scenes, items = [], []
    for image_id in range(cfg.n_scenes):
        rng = make_rng(sub_seed(cfg.seed, image_id))
        wanted = [names[i] for i in rng.choice(len(names), size=cfg.questions_per_scene, p=weights)]
        for _ in range(1000):
            scene = _sample_scene(rng, cfg, image_id)
            qs = [_BUILDERS[t](rng, scene, cfg) for t in wanted]
            if all(q is not None for q in qs):
                break
        else:
            raise GenerationError(f"scene {image_id}: no valid layout for {wanted} after 1000 tries")
        split = "val" if image_id >= cfg.n_scenes - n_val else "train"
        scenes.append(scene)
        for t, (toks, ans) in zip(wanted, qs):
            items.append(QAItem(len(items), image_id, toks, QTYPE[t], [ans], t, split))
    return Dataset(scenes, items, tokens, answers)


# -- brute-force answer re-derivation ----------------------------------------------------

def derive_answer(tokens: Sequence[str], boxes: np.ndarray, attrs: np.ndarray, cfg: SynthConfig) -> str:
    """Recompute a synthetic answer from raw boxes and attributes.

    Raises ``ValueError`` if the question has no unique referent.
    """
    names = (list(cfg.colors), list(cfg.shapes), list(cfg.sizes))

    def kind_of(word):
        for k, vocab in enumerate(names):
            if word in vocab:
                return k, vocab.index(word)
        raise ValueError(f"unknown attribute word {word!r}")

    def matching(words):
        keep = np.ones(len(attrs), dtype=bool)
        for w in words:
            k, v = kind_of(w)
            keep &= attrs[:, k] == v
        return np.where(keep)[0]

    t = list(tokens)
    if t[:2] == ["how", "many"]:
        return str(len(matching([t[2]])))
    if t[:2] == ["is", "there"]:
        return "yes" if len(matching(t[3:5])) else "no"
    if t[0] == "what":
        ask = {"color": 0, "shape": 1, "size": 2}[t[1]]
        rest = t[4:]
        if "left" in rest or "above" in rest:
            rel = "left" if "left" in rest else "above"
            head_shape = rest[0]
            ref_shape = rest[-1]
            refs = matching([ref_shape])
            if len(refs) != 1:
                raise ValueError("reference object is not unique")
            c = 0.5 * (boxes[:, :2] + boxes[:, 2:])
            ax = _rel_coord(rel)
            d = c[:, ax] - c[refs[0], ax]
            cand = matching([head_shape])
            if np.any(np.abs(d[cand]) <= MARGIN):
                raise ValueError("candidate inside the ambiguity margin")
            hits = cand[d[cand] < 0]
            if len(hits) != 1:
                raise ValueError("relation referent is not unique")
            return names[ask][attrs[hits[0], ask]]
        desc = [w for w in rest if w != "object"]
        hits = matching(desc)
        if len(hits) != 1:
            raise ValueError("attribute referent is not unique")
        return names[ask][attrs[hits[0], ask]]
    raise ValueError(f"unrecognised question {' '.join(t)!r}")


def validate_dataset(ds: Dataset, cfg: SynthConfig) -> list[str]:
    """Re-derive every answer; return a list of human-readable mismatches."""
    problems = []
    for it in ds.items:
        s = ds.scenes[ds.scene_row[it.image_id]]
        try:
            a = derive_answer(it.tokens, s.boxes, s.attrs, cfg)
        except ValueError as e:
            problems.append(f"q{it.qid}: {e}")
            continue
        if a != it.answers[0]:
            problems.append(f"q{it.qid}: stored {it.answers[0]!r}, derived {a!r}")
    return problems


# -- kNN baseline graph ---------------------------------------------------------------

def knn_neighbourhoods(boxes: np.ndarray, m: int) -> np.ndarray:
    """m nearest box centres per node (self first at distance 0), ties to the lower index."""
    c = 0.5 * (boxes[..., :2] + boxes[..., 2:])
    d = np.linalg.norm(c[..., None, :, :] - c[..., :, None, :], axis=-1)
    return top_m(-d, m)


def knn_graph(scene: Scene, m: int) -> LearnedGraph:
    N = scene.n_objects
    if m > N:
        raise ConfigError(f"m={m} exceeds the {N} objects in scene {scene.image_id}")
    c = scene.centres()
    d = np.linalg.norm(c[None, :, :] - c[:, None, :], axis=-1)
    nbr = top_m(-d, m)
    return LearnedGraph(-d, nbr, np.full((N, m), 1.0 / m), m)


# -- on-disk formats --------------------------------------------------------------------

def _header_line(obj: dict) -> bytes:
    return (json.dumps(obj, sort_keys=True) + "\n").encode("utf-8")


def write_scenes(scenes: Sequence[Scene], path) -> None:
    path = Path(path)
    has_attrs = bool(scenes) and all(s.attrs is not None for s in scenes)
    n = scenes[0].n_objects if scenes else 0
    d = scenes[0].features.shape[1] if scenes else 0
    for s in scenes:
        if s.n_objects != n or s.features.shape[1] != d:
            raise InputError("all scenes in one file must share object count and feature width")
    header = {
        "format": SCENES_FORMAT, "version": FORMAT_VERSION, "n_scenes": len(scenes),
        "n_objects": n, "d_feat": d, "has_attrs": has_attrs, "byteorder": "little",
    }
    with open(path, "wb") as fh:
        fh.write(_header_line(header))
        if not scenes:
            return
        fh.write(np.asarray([s.image_id for s in scenes], dtype="<i8").tobytes())
        fh.write(np.stack([s.boxes for s in scenes]).astype("<f8").tobytes())
        fh.write(np.stack([s.features for s in scenes]).astype("<f8").tobytes())
        if has_attrs:
            fh.write(np.stack([s.attrs for s in scenes]).astype("<i8").tobytes())


def _read_scenes_bin(raw: bytes) -> list[Scene]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError("missing header line", 0)
    try:
        h = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"bad header: {e}", 0) from None
    if h.get("format") != SCENES_FORMAT:
        raise ParseError(f"not a {SCENES_FORMAT} file", 0)
    if h.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported version {h.get('version')}", 0)
    S, N, d = int(h["n_scenes"]), int(h["n_objects"]), int(h["d_feat"])
    pos = nl + 1
    blocks = [("image_ids", "<i8", (S,)), ("boxes", "<f8", (S, N, 4)), ("features", "<f8", (S, N, d))]
    if h.get("has_attrs"):
        blocks.append(("attrs", "<i8", (S, N, 3)))
    arrays = {}
    for name, dt, shape in blocks:
        nbytes = int(np.prod(shape)) * 8
        if pos + nbytes > len(raw):
            raise ParseError(f"truncated {name} block: need {nbytes} bytes, have {len(raw) - pos}", pos)
        arrays[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape)
        pos += nbytes
    if pos != len(raw):
        raise ParseError(f"{len(raw) - pos} trailing bytes", pos)
    out = []
    for s in range(S):
        attrs = arrays["attrs"][s].astype(np.int64) if "attrs" in arrays else None
        out.append(Scene(int(arrays["image_ids"][s]), arrays["boxes"][s].astype(DTYPE),
                         arrays["features"][s].astype(DTYPE), attrs))
    return out


def write_features_jsonl(scenes: Sequence[Scene], path) -> None:
    """Structured-text fixture format: one JSON object per scene."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            rec = {"image_id": s.image_id, "boxes": s.boxes.tolist(), "features": s.features.tolist()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _read_scenes_jsonl(raw: bytes) -> list[Scene]:
    out = []
    offset = 0
    for line in raw.splitlines(keepends=True):
        start, offset = offset, offset + len(line)
        if not line.strip():
            continue
        try:
            rec = json.loads(line.decode("utf-8"))
            boxes = np.asarray(rec["boxes"], dtype=DTYPE)
            feats = np.asarray(rec["features"], dtype=DTYPE)
            image_id = int(rec["image_id"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"malformed scene record: {e}", start) from None
        if "image_size" in rec:
            w, hgt = rec["image_size"]
            boxes = normalise_boxes(boxes, w, hgt)
        out.append(Scene(image_id, boxes, feats))
    return out


def _is_scenes_bin(raw: bytes) -> bool:
    nl = raw.find(b"\n")
    try:
        head = json.loads(raw[: nl if nl >= 0 else len(raw)].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return False
    return isinstance(head, dict) and head.get("format") == SCENES_FORMAT


def load_features(path) -> list[Scene]:
    """Read scenes from ``scenes.bin`` or the JSON-lines fixture format.

    JSON-lines records may carry ``image_size: [w, h]`` to have pixel boxes
    normalised. Every scene must have the same object count.
    """
    raw = Path(path).read_bytes()
    if not raw.strip():
        log.warning("%s is empty; returning no scenes", path)
        return []
    if _is_scenes_bin(raw):
        scenes = _read_scenes_bin(raw)
    else:
        scenes = _read_scenes_jsonl(raw)
    if len({s.n_objects for s in scenes}) > 1:
        raise InputError("scenes in one dataset must all have the same number of objects")
    return scenes


def convert_bottom_up_tsv(tsv_path, out_path, n_boxes: int = 36) -> int:
    """Convert the public bottom-up-attention TSV dump into ``scenes.bin``.

    Expects the usual columns (image_id, image_w, image_h, num_boxes, boxes,
    features) with base64 float32 payloads. Returns the number of scenes.
    """
    csv.field_size_limit(sys.maxsize)
    cols = ["image_id", "image_w", "image_h", "num_boxes", "boxes", "features"]
    scenes = []
    with open(tsv_path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t", fieldnames=cols):
            nb = int(row["num_boxes"])
            if nb != n_boxes:
                raise InputError(f"image {row['image_id']} has {nb} boxes, expected {n_boxes}")
            boxes = np.frombuffer(base64.b64decode(row["boxes"]), dtype=np.float32).reshape(nb, 4)
            feats = np.frombuffer(base64.b64decode(row["features"]), dtype=np.float32).reshape(nb, -1)
            boxes = np.clip(normalise_boxes(boxes, float(row["image_w"]), float(row["image_h"])), 0.0, 1.0)
            scenes.append(Scene(int(row["image_id"]), boxes, feats.astype(DTYPE)))
    write_scenes(scenes, out_path)
    return len(scenes)


def write_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_scenes(ds.scenes, out / "scenes.bin")
    with open(out / "questions.txt", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": QUESTIONS_FORMAT, "version": FORMAT_VERSION, "count": len(ds.items)},
                            sort_keys=True) + "\n")
        for it in ds.items:
            fh.write(json.dumps(asdict(it), sort_keys=True) + "\n")
    with open(out / "vocab.txt", "w", encoding="utf-8") as fh:
        fh.write(f"# {VOCAB_FORMAT} v{FORMAT_VERSION} tokens={len(ds.tokens)} answers={len(ds.answers)}\n")
        for t in ds.tokens:
            fh.write(f"token {t}\n")
        for a in ds.answers:
            fh.write(f"answer {a}\n")


def read_dataset(in_dir) -> Dataset:
    d = Path(in_dir)
    scenes = load_features(d / "scenes.bin")
    with open(d / "questions.txt", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != QUESTIONS_FORMAT or header.get("version") != FORMAT_VERSION:
            raise InputError(f"{d / 'questions.txt'}: unsupported header {header}")
        items = [QAItem(**json.loads(line)) for line in fh if line.strip()]
    if len(items) != header["count"]:
        raise InputError(f"questions.txt declares {header['count']} records but holds {len(items)}")
    tokens, answers = [], []
    with open(d / "vocab.txt", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith(f"# {VOCAB_FORMAT} v{FORMAT_VERSION}"):
            raise InputError(f"{d / 'vocab.txt'}: unsupported header {first.strip()!r}")
        for line in fh:
            kind, _, word = line.rstrip("\n").partition(" ")
            (tokens if kind == "token" else answers).append(word)
    return Dataset(scenes, items, tokens, answers)


def read_scenes_header(path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.readline())


def iter_batches(indices: Sequence[int], batch_size: int) -> Iterable[list[int]]:
    for s in range(0, len(indices), batch_size):
        yield list(indices[s : s + batch_size])
