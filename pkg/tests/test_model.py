import numpy as np
import pytest
from hypothesis import given, strategies as st

from graphvqa.baselines import AttentionParams, attention_baseline, attention_weights
from graphvqa.core import ConfigError, DimensionError, StateError, make_rng
from graphvqa.data import Batch
from graphvqa.gradcheck import random_batch
from graphvqa.graph import top_m_gap
from graphvqa.model import Model, ModelConfig, full_scale_config, tiny_config
from oracles import oracle_logits

PATHWAYS = ["graph", "knn", "attention"]


def case(pathway, seed, **kw):
    cfg = tiny_config(pathway=pathway, **kw)
    model = Model.init(cfg, seed=seed)
    return model, random_batch(cfg, make_rng(seed + 1000), n_objects=5, batch=3)


def sub_batch(b: Batch, i: int) -> Batch:
    s = slice(i, i + 1)
    return Batch(b.feats[s], b.boxes[s], b.tokens[s], b.lengths[s], b.targets[s])


@pytest.mark.parametrize("pathway", PATHWAYS)
@pytest.mark.parametrize("seed", range(4))
def test_forward_matches_straight_line_oracle(pathway, seed):
    model, batch = case(pathway, seed, d_h=[6, 6] if pathway != "attention" else [6])
    logits = model.predict(batch)
    assert logits.shape == (3, model.cfg.C)
    np.testing.assert_allclose(logits, oracle_logits(model, batch), atol=1e-10, rtol=0)


@pytest.mark.parametrize("pathway", PATHWAYS)
def test_eval_forward_is_deterministic(pathway):
    model, batch = case(pathway, 0, dropout_p=0.5)
    assert model.predict(batch).tobytes() == model.predict(batch).tobytes()


@given(st.integers(0, 10**5), st.sampled_from(PATHWAYS))
def test_logits_invariant_to_object_order(seed, pathway):
    model, batch = case(pathway, seed)
    logits, tr = model.forward(batch)
    if tr.graph is not None and top_m_gap(tr.graph.A, model.cfg.m) <= 1e-6:
        return
    perm = make_rng(seed).permutation(5)
    np.testing.assert_allclose(model.predict(batch.permute_objects(perm)), logits, atol=1e-9, rtol=0)


@pytest.mark.parametrize("pathway", PATHWAYS)
def test_batch_gradient_is_mean_of_per_sample(pathway):
    model, batch = case(pathway, 5)
    _, full = model.backward(model.forward(batch)[1], accumulate=False)
    per = [model.backward(model.forward(sub_batch(batch, i))[1], accumulate=False)[1] for i in range(3)]
    for k, g in full.items():
        np.testing.assert_allclose(g, sum(p[k] for p in per) / 3, atol=1e-12, rtol=1e-10)


def test_knn_pathway_has_no_graph_learner_gradients():
    model, batch = case("knn", 0)
    _, grads = model.backward(model.forward(batch)[1])
    assert not any(k.startswith("F.") for k in model.params)
    assert not any(k.startswith("F.") for k in grads)
    assert any(g.any() for k, g in grads.items() if k.startswith("conv"))


def test_backward_accumulates_into_parameters():
    model, batch = case("graph", 0)
    loss, grads = model.backward(model.forward(batch)[1])
    assert loss > 0
    for k, p in model.params.items():
        np.testing.assert_array_equal(p.grad, grads[k])
    model.backward(model.forward(batch)[1])
    np.testing.assert_allclose(model.params["mlp.W1"].grad, 2 * grads["mlp.W1"])
    model.zero_grad()
    assert not any(p.grad.any() for p in model.params.values())


def test_backward_without_trace_is_state_error():
    model, _ = case("graph", 0)
    with pytest.raises(StateError):
        model.backward(None)


def test_frozen_embeddings_are_not_trainable():
    model = Model.init(tiny_config(train_embeddings=False))
    assert "embed" not in {p.name for p in model.trainable()}


@pytest.mark.parametrize("bad", [dict(d_h=[6, 5]), dict(d_h=[4]), dict(pathway="mlp"), dict(m=0),
                                 dict(dropout_p=1.0), dict(d_h=[])])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        tiny_config(**bad).validate()
    with pytest.raises(ConfigError):
        Model.init(tiny_config(**bad))


def test_unknown_config_key_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig.from_dict({"bogus": 1})


def test_stage_names_in_errors():
    model, batch = case("graph", 0, m=6)
    with pytest.raises(ConfigError, match=r"\[graph_learner\]"):
        model.forward(batch)
    model, batch = case("graph", 0)
    bad = Batch(batch.feats[..., :-1], batch.boxes, batch.tokens, batch.lengths, batch.targets)
    with pytest.raises(DimensionError, match=r"\[input\]"):
        model.forward(bad)


def test_dropout_needs_rng_and_changes_training_pass():
    model, batch = case("graph", 0, dropout_p=0.5)
    with pytest.raises(ConfigError):
        model.forward(batch, training=True)
    a = model.forward(batch, training=True, rng=make_rng(1))[0]
    assert not np.allclose(a, model.predict(batch))


def test_full_scale_config_is_consistent():
    cfg = full_scale_config()
    cfg.validate()
    assert (cfg.K, cfg.m, cfg.d_v, cfg.d_h) == (8, 16, 2052, [2048, 1024])


def test_attention_baseline_properties(rng):
    p = AttentionParams.init(4, 3, 5, rng)
    V = np.tile(rng.standard_normal(4), (6, 1))
    q = rng.standard_normal(3)
    np.testing.assert_allclose(attention_weights(V, q, p), np.full(6, 1 / 6), atol=1e-15)
    V = rng.standard_normal((6, 4))
    a = attention_weights(V, q, p)
    assert abs(a.sum() - 1) < 1e-12 and np.all(a > 0)
    np.testing.assert_allclose(attention_baseline(V, q, p), a @ (V @ p.Wv.T), atol=1e-12)
