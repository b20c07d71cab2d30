"""The full model: question encoder, image pathway and classification head.

Three image pathways share the encoder and head so that switching between
them is a controlled ablation:

* ``graph``: question-conditioned graph learner feeding L spatial convolutions
* ``knn``: the same convolutions over a fixed kNN graph with uniform weights
* ``attention``: soft attention pooling with no pairwise structure
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .baselines import AttentionParams, attention_backward, attention_forward
from .conv import ConvLayer, conv_layer_backward, conv_layer_forward, pseudo_coord_grid
from .core import ConfigError, DimensionError, GraphVQAError, Parameter, StateError, dropout_mask, make_rng
from .data import Batch, knn_neighbourhoods
from .encoder import GruParams, gru_backward, gru_forward
from .graph import JointEmbedF, gather_rows, graph_backward, graph_forward, scatter_rows
from .head import Mlp2, soft_bce_grad, soft_bce_terms

PATHWAYS = ("graph", "knn", "attention")


@dataclass
class ModelConfig:
    vocab_size: int = 40
    d_w: int = 32
    d_q: int = 64
    d_v_raw: int = 32
    d_g: int = 64
    d_e: int | None = None  # defaults to d_g
    K: int = 8
    m: int = 4
    d_h: list = field(default_factory=lambda: [128, 64])
    C: int = 30
    mlp_hidden: int | None = None  # defaults to d_q
    dropout_p: float = 0.0
    force_self_loop: bool = False
    pathway: str = "graph"
    coords: str = "polar"
    dtype: str = "float64"
    train_embeddings: bool = True

    @property
    def L(self) -> int:
        return len(self.d_h)

    @property
    def d_v(self) -> int:
        return self.d_v_raw + 4

    @property
    def embed_width(self) -> int:
        return self.d_e if self.d_e is not None else self.d_g

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else self.d_q

    def validate(self) -> None:
        if self.pathway not in PATHWAYS:
            raise ConfigError(f"pathway must be one of {PATHWAYS}, got {self.pathway!r}")
        if self.coords not in ("polar", "cartesian"):
            raise ConfigError(f"coords must be 'polar' or 'cartesian', got {self.coords!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if not self.d_h:
            raise ConfigError("need at least one convolution layer")
        if self.d_h[-1] != self.d_q:
            raise ConfigError(f"last conv width d_h[-1]={self.d_h[-1]} must equal d_q={self.d_q} for fusion")
        for i, w in enumerate(self.d_h):
            if w % self.K:
                raise ConfigError(f"conv width d_h[{i}]={w} is not divisible by K={self.K}")
        if self.m < 1:
            raise ConfigError("neighbourhood size m must be positive")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        for name in ("vocab_size", "d_w", "d_q", "d_v_raw", "d_g", "K", "C"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """The gradient-check configuration (N=5 objects are supplied by the caller)."""
    base = dict(vocab_size=6, d_w=5, d_q=6, d_v_raw=3, d_g=6, d_e=4, K=3, m=3, d_h=[6], C=4)
    base.update(overrides)
    return ModelConfig(**base)


def full_scale_config(**overrides) -> ModelConfig:
    """Full-size settings: 300-d word vectors, 1024-d GRU, 2048 + 4 object features."""
    base = dict(vocab_size=20000, d_w=300, d_q=1024, d_v_raw=2048, d_g=512, K=8, m=16,
                d_h=[2048, 1024], C=3000, dropout_p=0.5, train_embeddings=False)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ForwardTrace:
    batch: Batch
    q: np.ndarray
    gru: Any
    V: np.ndarray
    v_mask: np.ndarray | None
    graph: Any = None
    nbr: np.ndarray | None = None
    alpha: np.ndarray | None = None  # (B, N, m)
    U: np.ndarray | None = None
    convs: list = field(default_factory=list)
    H: np.ndarray | None = None
    argmax: np.ndarray | None = None
    att: Any = None
    h: np.ndarray | None = None
    fused: np.ndarray | None = None
    z1: np.ndarray | None = None
    a1: np.ndarray | None = None
    mlp_mask: np.ndarray | None = None
    logits: np.ndarray | None = None

    @property
    def A(self) -> np.ndarray | None:
        return None if self.graph is None else self.graph.A

    @property
    def E(self) -> np.ndarray | None:
        return None if self.graph is None else self.graph.E


class StageError(GraphVQAError, RuntimeError):
    pass


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except GraphVQAError as e:
                if isinstance(e, StageError):
                    raise
                raise type(e)(f"[{name}] {e}") from e
        return inner
    return wrap


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, Parameter]):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.mutate: str | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, embeddings: np.ndarray | None = None) -> "Model":
        cfg.validate()
        dt = np.dtype(cfg.dtype)
        rng = make_rng(seed)
        vals: dict[str, np.ndarray] = {}
        if embeddings is None:
            # unit variance, roughly the scale of pretrained word vectors
            embeddings = rng.standard_normal((cfg.vocab_size, cfg.d_w))
        elif embeddings.shape != (cfg.vocab_size, cfg.d_w):
            raise DimensionError(f"embeddings {embeddings.shape} != ({cfg.vocab_size}, {cfg.d_w})")
        vals["embed"] = embeddings.astype(dt)
        vals.update(GruParams.init(cfg.d_w, cfg.d_q, rng, dt).as_dict())
        if cfg.pathway == "graph":
            vals.update(JointEmbedF.init(cfg.d_v + cfg.d_q, cfg.d_g, cfg.embed_width, rng, dt).as_dict())
        if cfg.pathway in ("graph", "knn"):
            d_in = cfg.d_v
            for l, d_h in enumerate(cfg.d_h):
                vals.update(ConvLayer.init(d_in, d_h, cfg.K, rng, dt).as_dict(f"conv{l}."))
                d_in = d_h
        else:
            vals.update(AttentionParams.init(cfg.d_v, cfg.d_q, cfg.d_g, rng, dt).as_dict())
        vals.update(Mlp2.init(cfg.d_q, cfg.hidden, cfg.C, rng, dt).as_dict())
        params = {
            k: Parameter(k, v, trainable=(k != "embed" or cfg.train_embeddings)) for k, v in vals.items()
        }
        return cls(cfg, params)

    # -- parameter access ---------------------------------------------------------

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def conv_layers(self) -> list[ConvLayer]:
        v = self.values()
        return [ConvLayer.from_mapping(v, f"conv{l}.") for l in range(self.cfg.L)]

    # -- forward ------------------------------------------------------------------

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None,
                dtype=None):
        """Logits (B, C) and the trace needed by :meth:`backward` and graph export.

        ``dtype`` evaluates the pass in another precision (the gradient
        checker uses ``np.longdouble``) without touching the parameters.
        """
        cfg = self.cfg
        dt = np.dtype(dtype or cfg.dtype)
        v = self.values()
        if any(a.dtype != dt for a in v.values()):
            v = {k: a.astype(dt) for k, a in v.items()}
        if batch.feats.shape[-1] != cfg.d_v:
            raise DimensionError(f"[input] object features have width {batch.feats.shape[-1]}, expected {cfg.d_v}")
        use_dropout = training and cfg.dropout_p > 0.0
        if use_dropout and rng is None:
            raise ConfigError("training with dropout needs an rng")
        q, gcache = _stage("question_encoder")(gru_forward)(
            batch.tokens, batch.lengths, v["embed"], GruParams.from_mapping(v)
        )
        V = batch.feats.astype(dt, copy=False)
        v_mask = dropout_mask(V.shape, cfg.dropout_p, rng, dt) if use_dropout else None
        if v_mask is not None:
            V = V * v_mask
        tr = ForwardTrace(batch, q, gcache, V, v_mask)
        if cfg.pathway in ("graph", "knn"):
            N = V.shape[1]
            if cfg.m > N:
                raise ConfigError(f"[graph_learner] m={cfg.m} exceeds the {N} objects per scene")
            if cfg.pathway == "graph":
                _, nbr, alpha, tr.graph = _stage("graph_learner")(graph_forward)(
                    V, q, JointEmbedF.from_mapping(v), cfg.m, cfg.force_self_loop
                )
            else:
                nbr = knn_neighbourhoods(batch.boxes, cfg.m)
                alpha = np.full(nbr.shape, 1.0 / cfg.m, dtype=dt)
            tr.nbr, tr.alpha = nbr, alpha
            alpha_dense = scatter_rows(nbr, alpha, N)
            tr.U = pseudo_coord_grid(batch.boxes, cfg.coords).astype(dt, copy=False)
            X = V
            for layer in [ConvLayer.from_mapping(v, f"conv{l}.") for l in range(cfg.L)]:
                X, cache = _stage("graph_conv")(conv_layer_forward)(X, alpha_dense, tr.U, layer)
                tr.convs.append(cache)
            tr.H = X
            tr.argmax = X.argmax(axis=1)
            h = np.take_along_axis(X, tr.argmax[:, None, :], axis=1)[:, 0]
        else:
            h, tr.att = _stage("attention")(attention_forward)(V, q, AttentionParams.from_mapping(v))
        mlp = Mlp2.from_mapping(v)
        tr.h = h
        tr.fused = h * q
        tr.z1 = tr.fused @ mlp.W1.T + mlp.b1
        a1 = np.maximum(tr.z1, 0.0)
        if use_dropout:
            tr.mlp_mask = dropout_mask(a1.shape, cfg.dropout_p, rng, dt)
            a1 = a1 * tr.mlp_mask
        tr.a1 = a1
        tr.logits = a1 @ mlp.W2.T + mlp.b2
        return tr.logits, tr

    def predict(self, batch: Batch) -> np.ndarray:
        return self.forward(batch, training=False)[0]

    # -- loss and backward --------------------------------------------------------

    @staticmethod
    def loss(logits: np.ndarray, targets: np.ndarray) -> float:
        """Mean over questions of the per-class BCE sum, in the logits' precision."""
        return np.sum(soft_bce_terms(targets, logits)) / logits.shape[0]

    def backward(self, trace: ForwardTrace | None, targets: np.ndarray | None = None, accumulate: bool = True):
        """Gradient of the batch-mean loss for every parameter.

        Returns ``(loss, grads)``; with ``accumulate`` the grads are also added
        into each trainable ``Parameter.grad``.
        """
        if trace is None or trace.logits is None:
            raise StateError("backward needs the trace of a forward pass")
        cfg = self.cfg
        v = self.values()
        t = trace.batch.targets if targets is None else targets
        B = trace.logits.shape[0]
        loss = float(self.loss(trace.logits, t))
        grads: dict[str, np.ndarray] = {}

        mlp = Mlp2.from_mapping(v)
        dy = soft_bce_grad(t, trace.logits) / B
        grads["mlp.W2"] = dy.T @ trace.a1
        grads["mlp.b2"] = dy.sum(0)
        da1 = dy @ mlp.W2
        if trace.mlp_mask is not None:
            da1 = da1 * trace.mlp_mask
        dz1 = da1 * (trace.z1 > 0)
        grads["mlp.W1"] = dz1.T @ trace.fused
        grads["mlp.b1"] = dz1.sum(0)
        dfused = dz1 @ mlp.W1
        dh = dfused * trace.q
        dq = dfused * trace.h

        if cfg.pathway in ("graph", "knn"):
            dX = np.zeros_like(trace.H)
            np.put_along_axis(dX, trace.argmax[:, None, :], dh[:, None, :], axis=1)
            d_alpha = np.zeros(trace.H.shape[:2] + (trace.H.shape[1],), dtype=dX.dtype)
            layers = self.conv_layers()
            for l in range(cfg.L - 1, -1, -1):
                g, dX, da = conv_layer_backward(dX, trace.convs[l], layers[l])
                for k, val in g.items():
                    grads[f"conv{l}.{k}"] = val
                d_alpha += da
            if cfg.pathway == "graph":
                d_sel = gather_rows(d_alpha, trace.nbr)
                if self.mutate == "sign-flip":
                    d_sel = -d_sel
                gF, _, dq_graph = graph_backward(d_sel, trace.graph, JointEmbedF.from_mapping(v))
                for k, val in gF.items():
                    grads[f"F.{k}"] = val
                dq = dq + dq_graph
        else:
            g, dq_att = attention_backward(dh, trace.att, AttentionParams.from_mapping(v))
            for k, val in g.items():
                grads[f"att.{k}"] = val
            dq = dq + dq_att

        if self.mutate == "sign-flip" and cfg.pathway != "graph":
            dq = -dq
        g, d_emb = gru_backward(dq, trace.gru, GruParams.from_mapping(v), v["embed"].shape[0])
        for k, val in g.items():
            grads[f"gru.{k}"] = val
        grads["embed"] = d_emb

        if accumulate:
            for k, p in self.params.items():
                if p.trainable and k in grads:
                    p.grad += grads[k]
        return loss, grads
