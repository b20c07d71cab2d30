"""Export the learned graph behind one prediction, as JSON or Graphviz DOT."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .core import ConfigError, sigmoid
from .data import Dataset
from .model import Model


@dataclass
class GraphExport:
    image_id: int
    qid: int
    question: str
    predicted: str
    score: float
    pathway: str
    nodes: list  # {"index", "box", "degree"}
    edges: list  # {"i", "j", "weight"}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GraphExport":
        return cls(**json.loads(text))

    def top_degree(self, k: int = 3) -> list[int]:
        order = sorted(self.nodes, key=lambda n: (-n["degree"], n["index"]))
        return sorted(n["index"] for n in order[:k])


def node_degrees(nbr: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Outgoing plus incoming alpha mass per node for one graph (N, m)."""
    N = nbr.shape[0]
    deg = alpha.sum(axis=1).astype(float)
    np.add.at(deg, nbr.ravel(), alpha.ravel())
    return deg[:N]


def explain(model: Model, ds: Dataset, qid: int) -> GraphExport:
    if model.cfg.pathway == "attention":
        raise ConfigError("the attention pathway has no graph to export")
    try:
        row = ds.item_by_qid(qid)
    except KeyError:
        raise KeyError(f"unknown question id {qid}") from None
    batch = ds.batch([row])
    logits, tr = model.forward(batch)
    c = int(np.argmax(logits[0]))
    nbr, alpha = tr.nbr[0], tr.alpha[0]
    deg = node_degrees(nbr, alpha)
    boxes = batch.boxes[0]
    item = batch.items[0]
    nodes = [{"index": i, "box": [float(x) for x in boxes[i]], "degree": float(deg[i])} for i in range(len(boxes))]
    edges = [
        {"i": i, "j": int(nbr[i, s]), "weight": float(alpha[i, s])}
        for i in range(nbr.shape[0])
        for s in range(nbr.shape[1])
    ]
    return GraphExport(item.image_id, item.qid, item.text, ds.answers[c], float(sigmoid(logits[0, c])),
                       model.cfg.pathway, nodes, edges)


def to_dot(ex: GraphExport, scale: float = 6.0) -> str:
    """Nodes sit at their box centres (y flipped), sized by degree; edge pen width follows alpha."""
    lines = [
        "digraph G {",
        f'  label="{ex.question} -> {ex.predicted} ({ex.score:.3f})";',
        "  node [shape=circle, style=filled, fillcolor=lightblue, fixedsize=true];",
    ]
    for n in ex.nodes:
        x1, y1, x2, y2 = n["box"]
        cx, cy = 0.5 * (x1 + x2) * scale, (1.0 - 0.5 * (y1 + y2)) * scale
        size = 0.2 + 0.3 * n["degree"]
        lines.append(f'  n{n["index"]} [pos="{cx:.4f},{cy:.4f}!", width={size:.4f}, label="{n["index"]}"];')
    for e in ex.edges:
        if e["i"] == e["j"]:
            continue
        lines.append(f'  n{e["i"]} -> n{e["j"]} [penwidth={0.5 + 5.0 * e["weight"]:.4f}, weight={e["weight"]:.6f}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
