import hashlib
import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from graphvqa.core import ConfigError, InputError, make_rng
from graphvqa.data import (
    MARGIN,
    QTYPE,
    ParseError,
    QAItem,
    Scene,
    SynthConfig,
    derive_answer,
    gen_synthetic,
    iter_batches,
    knn_graph,
    knn_neighbourhoods,
    load_features,
    read_dataset,
    read_scenes_header,
    validate_dataset,
    write_dataset,
    write_features_jsonl,
    write_scenes,
)


def small_cfg(**kw):
    base = dict(n_scenes=12, questions_per_scene=4, seed=3)
    base.update(kw)
    return SynthConfig(**base)


def digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def test_generation_is_byte_identical(tmp_path):
    write_dataset(gen_synthetic(small_cfg()), tmp_path / "a")
    write_dataset(gen_synthetic(small_cfg()), tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    write_dataset(gen_synthetic(small_cfg(seed=4)), tmp_path / "c")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_generated_answers_survive_brute_force_check():
    cfg = small_cfg(n_scenes=40)
    ds = gen_synthetic(cfg)
    assert validate_dataset(ds, cfg) == []
    assert {it.template for it in ds.items} == set(QTYPE)
    for it in ds.items:
        assert it.qtype == QTYPE[it.template]
        assert it.answers[0] in ds.answer_index
        assert all(t in ds.token_index for t in it.tokens)


def test_relation_referent_unique_and_outside_margin():
    cfg = small_cfg(n_scenes=30, templates={"relation": 1.0})
    ds = gen_synthetic(cfg)
    assert validate_dataset(ds, cfg) == []
    assert all(it.template == "relation" and it.qtype == "other" for it in ds.items)


def test_validator_flags_corrupted_answer():
    cfg = small_cfg()
    ds = gen_synthetic(cfg)
    it = ds.items[0]
    it.answers = ["no"] if it.answers[0] != "no" else ["yes"]
    assert any(p.startswith(f"q{it.qid}:") for p in validate_dataset(ds, cfg))


def test_count_template_three_red_objects():
    cfg = SynthConfig()
    attrs = np.array([[0, 0, 0], [0, 1, 1], [0, 2, 0], [1, 0, 0], [2, 3, 1]])
    boxes = np.tile([0.1, 0.1, 0.2, 0.2], (5, 1))
    assert derive_answer("how many red objects are there".split(), boxes, attrs, cfg) == "3"


def test_relation_answer_from_geometry():
    cfg = SynthConfig()
    # sphere (ref) in the middle, a blue cube to its left, a red cube to its right
    boxes = np.array([[0.45, 0.4, 0.55, 0.5], [0.1, 0.4, 0.2, 0.5], [0.8, 0.4, 0.9, 0.5]])
    attrs = np.array([[0, 1, 0], [2, 0, 0], [0, 0, 1]])
    q = "what color is the cube left of the sphere".split()
    assert derive_answer(q, boxes, attrs, cfg) == "blue"
    boxes[2, [0, 2]] = [0.47, 0.57]  # right cube now inside the margin
    assert abs(0.52 - 0.5) <= MARGIN
    with pytest.raises(ValueError):
        derive_answer(q, boxes, attrs, cfg)


@pytest.mark.parametrize("bad", [dict(templates={}), dict(templates={"count": 0}), dict(templates={"nope": 1}),
                                 dict(d_feat=4), dict(n_objects=1), dict(val_fraction=1.0)])
def test_synth_config_rejects(bad):
    with pytest.raises(ConfigError):
        small_cfg(**bad).validate()


def test_splits_follow_val_fraction():
    ds = gen_synthetic(small_cfg(n_scenes=10, val_fraction=0.2))
    val_scenes = {it.image_id for it in ds.items if it.split == "val"}
    assert val_scenes == {8, 9}


def test_load_features_fixture(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text('{"image_id": 7, "boxes": [[0, 0, 0.5, 0.5], [0.5, 0.5, 1, 1]], '
                 '"features": [[1, 2, 3, 4], [5, 6, 7, 8]]}\n')
    (scene,) = load_features(p)
    assert scene.image_id == 7 and scene.n_objects == 2
    assert scene.node_features().shape == (2, 8)
    np.testing.assert_array_equal(scene.node_features()[1], [5, 6, 7, 8, 0.5, 0.5, 1, 1])


def test_load_features_pixel_boxes_normalised(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text('{"image_id": 1, "image_size": [200, 100], "boxes": [[0, 0, 100, 50]], "features": [[1]]}\n')
    np.testing.assert_array_equal(load_features(p)[0].boxes, [[0, 0, 0.5, 0.5]])


def test_load_features_rejects_out_of_range_corner(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text('{"image_id": 1, "boxes": [[0, 0, 1.25, 0.5]], "features": [[1]]}\n')
    with pytest.raises(InputError):
        load_features(p)


def test_load_features_parse_error_offset(tmp_path):
    good = '{"image_id": 1, "boxes": [[0, 0, 1, 1]], "features": [[1]]}\n'
    p = tmp_path / "f.jsonl"
    p.write_text(good + "{not json\n")
    with pytest.raises(ParseError) as e:
        load_features(p)
    assert e.value.offset == len(good)


def test_load_features_truncated_binary(tmp_path):
    ds = gen_synthetic(small_cfg(n_scenes=2))
    write_scenes(ds.scenes, tmp_path / "s.bin")
    raw = (tmp_path / "s.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(ParseError, match="truncated"):
        load_features(tmp_path / "t.bin")


def test_empty_file_warns(tmp_path, caplog):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with caplog.at_level(logging.WARNING):
        assert load_features(p) == []
    assert "empty" in caplog.text


def test_feature_files_round_trip(tmp_path):
    ds = gen_synthetic(small_cfg(n_scenes=3))
    write_scenes(ds.scenes, tmp_path / "s.bin")
    hdr = read_scenes_header(tmp_path / "s.bin")
    assert hdr["n_scenes"] == 3 and hdr["n_objects"] == 8
    again = load_features(tmp_path / "s.bin")
    write_scenes(again, tmp_path / "s2.bin")
    assert (tmp_path / "s.bin").read_bytes() == (tmp_path / "s2.bin").read_bytes()
    write_features_jsonl(again, tmp_path / "s.jsonl")
    write_features_jsonl(load_features(tmp_path / "s.jsonl"), tmp_path / "s2.jsonl")
    assert (tmp_path / "s.jsonl").read_text() == (tmp_path / "s2.jsonl").read_text()


def test_dataset_round_trip(tmp_path):
    ds = gen_synthetic(small_cfg())
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert back.items == ds.items and back.tokens == ds.tokens and back.answers == ds.answers
    np.testing.assert_array_equal(back.node_feats, ds.node_feats)
    b1, b2 = ds.batch([0, 5]), back.batch([0, 5])
    assert np.array_equal(b1.tokens, b2.tokens) and np.array_equal(b1.targets, b2.targets)


def test_qaitem_rejects_empty():
    with pytest.raises(InputError):
        QAItem(0, 0, [], "other", ["x"])
    with pytest.raises(InputError):
        QAItem(0, 0, ["x"], "other", [])


def test_knn_examples():
    xs = np.arange(5) * 0.125  # exact in binary, so the ties are real
    boxes = np.stack([xs, np.full(5, 0.5), xs, np.full(5, 0.5)], axis=1)
    s = Scene(0, boxes, np.zeros((5, 1)))
    g = knn_graph(s, 2)
    # middle nodes are equidistant from both sides; the tie goes to the lower index
    assert g.neighborhoods.tolist() == [[0, 1], [0, 1], [1, 2], [2, 3], [3, 4]]
    assert np.all(g.alpha == 0.5)
    assert all(r.tolist() == list(range(5)) for r in knn_graph(s, 5).neighborhoods)
    with pytest.raises(ConfigError):
        knn_graph(s, 6)


@given(st.integers(0, 10**6))
def test_knn_matches_brute_force_sort(seed):
    rng = make_rng(seed)
    xy = rng.uniform(0, 0.8, (10, 2))
    boxes = np.concatenate([xy, xy + 0.1], axis=1)
    c = xy + 0.05
    nbr = knn_neighbourhoods(boxes, 4)
    for i in range(10):
        ref = sorted(sorted(range(10), key=lambda j: (math.dist(c[i], c[j]), j))[:4])
        assert nbr[i].tolist() == ref


@given(st.integers(0, 10**6))
def test_knn_permutation_equivariant(seed):
    rng = make_rng(seed)
    xy = rng.uniform(0, 0.8, (7, 2))
    boxes = np.concatenate([xy, xy + 0.1], axis=1)
    pi = rng.permutation(7)
    inv = np.argsort(pi)
    nbr, nbr_p = knn_neighbourhoods(boxes, 3), knn_neighbourhoods(boxes[pi], 3)
    for i in range(7):
        assert sorted(inv[nbr[pi[i]]].tolist()) == nbr_p[i].tolist()


def test_iter_batches_keeps_short_tail():
    assert [len(b) for b in iter_batches(list(range(10)), 4)] == [4, 4, 2]
