import json

import numpy as np
import pytest

from graphvqa.core import ConfigError, Parameter, TrainingError
from graphvqa.data import SynthConfig, gen_synthetic
from graphvqa.model import Model, ModelConfig
from graphvqa.trainer import Adam, Checkpoint, TrainConfig, adam_step, evaluate, lr_at, full_scale_train_config, train


@pytest.fixture(scope="module")
def ds():
    return gen_synthetic(SynthConfig(n_scenes=6, questions_per_scene=4, val_fraction=0.34, seed=2))


def small_model(ds, seed=0, **kw):
    base = dict(vocab_size=len(ds.tokens), C=len(ds.answers), d_w=8, d_q=8, d_g=8, K=2, m=3, d_h=[8, 8])
    base.update(kw)
    return Model.init(ModelConfig(**base), seed=seed)


def test_adam_first_step_moves_by_lr():
    p = Parameter("w", np.array([1.0, -2.0, 0.5]))
    p.grad[...] = 1.0
    adam_step([p], Adam(), 0.1)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    np.testing.assert_allclose(p.value, np.array([1.0, -2.0, 0.5]) - 0.1 / (1 + 1e-8), rtol=0, atol=1e-15)


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    p = Parameter("w", np.ones(2))
    opt = Adam()
    p.grad[...] = 2.0
    opt.step([p], 0.1)
    before = p.value.copy()
    m0, v0 = opt.m["w"].copy(), opt.v["w"].copy()
    p.grad[...] = 0.0
    opt.step([p], 0.1)
    np.testing.assert_array_equal(opt.m["w"], 0.9 * m0)
    np.testing.assert_array_equal(opt.v["w"], 0.999 * v0)
    # bias-corrected momentum still carries the step
    assert np.all(p.value < before)
    p.grad[...] = 0.0
    q = Parameter("fresh", np.ones(2))
    Adam().step([q], 0.1)
    np.testing.assert_array_equal(q.value, np.ones(2))


def test_adam_names_bad_parameter():
    p = Parameter("conv0.G", np.ones(2))
    p.grad[0] = np.nan
    with pytest.raises(TrainingError, match="conv0.G"):
        Adam().step([p], 0.1)


def test_lr_schedule_halves_once():
    cfg = TrainConfig(lr=0.2, epochs=6, lr_halve_epoch=4)
    assert [lr_at(cfg, e) for e in range(1, 7)] == [0.2] * 4 + [0.1] * 2
    p = full_scale_train_config()
    assert (p.lr, p.batch_size, p.epochs, p.lr_halve_epoch) == (1e-4, 64, 35, 30)


@pytest.mark.parametrize("bad", [dict(lr=0), dict(batch_size=0), dict(lr_halve_epoch=9, epochs=8), dict(beta1=1.0)])
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()
    with pytest.raises(ConfigError, match="nope"):
        TrainConfig.from_dict({"nope": 1})


def test_ten_samples_batch_four_is_three_steps(ds, tmp_path):
    idx = ds.split("train")[:10]
    sub = type(ds)(ds.scenes, [ds.items[i] for i in idx], ds.tokens, ds.answers)
    recs, _ = train(small_model(ds), sub, TrainConfig(batch_size=4, epochs=3, lr_halve_epoch=2),
                    log_path=tmp_path / "log.jsonl", eval_indices=[])
    assert [r["steps"] for r in recs] == [3, 3, 3]
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["lr"] for r in lines] == [1e-3, 1e-3, 5e-4]


def test_memorises_eight_questions():
    tiny = gen_synthetic(SynthConfig(n_scenes=2, questions_per_scene=4, val_fraction=0.0, seed=1))
    assert len(tiny.items) == 8
    model = small_model(tiny, d_w=16, d_q=16, d_g=16, K=4, d_h=[16, 16])
    recs, _ = train(model, tiny, TrainConfig(lr=1e-2, batch_size=4, epochs=200, lr_halve_epoch=200))
    assert min(r["train_loss"] for r in recs) < 0.01
    assert evaluate(model, tiny)["overall"] == 1.0


def test_evaluate_does_not_touch_params_and_ignores_batch_size(ds):
    model = small_model(ds)
    before = {k: v.copy() for k, v in model.values().items()}
    a = evaluate(model, ds, batch_size=256)
    b = evaluate(model, ds, batch_size=3)
    assert a == b
    assert all(np.array_equal(before[k], v) for k, v in model.values().items())
    assert set(a["by_type"]) <= {"yes/no", "number", "other"} and a["n"] == len(ds.items)


def test_checkpoint_round_trip_is_bit_identical(ds, tmp_path):
    model = small_model(ds, dropout_p=0.3)
    _, ck = train(model, ds, TrainConfig(epochs=2, lr_halve_epoch=1, batch_size=4))
    ck.save(tmp_path / "ck")
    back = Checkpoint.load(tmp_path / "ck")
    batch = ds.batch(list(range(len(ds.items))))
    assert back.model().predict(batch).tobytes() == model.predict(batch).tobytes()
    assert back.epoch == 2 and back.adam_t == ck.adam_t
    for k in ck.adam_m:
        assert back.adam_m[k].tobytes() == ck.adam_m[k].tobytes()
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["version"] == 1 and all(e["dtype"] == "<f8" for e in manifest["arrays"])


def test_resume_reproduces_uninterrupted_run(ds, tmp_path):
    cfg = TrainConfig(epochs=4, lr_halve_epoch=3, batch_size=4, seed=5)
    full_model = small_model(ds, dropout_p=0.3)
    full, _ = train(full_model, ds, cfg)
    part_model = small_model(ds, dropout_p=0.3)
    train(part_model, ds, TrainConfig(**{**cfg.__dict__, "epochs": 2, "lr_halve_epoch": 2}),
          checkpoint_dir=tmp_path / "ck")
    ck = Checkpoint.load(tmp_path / "ck")
    resumed_model = ck.model()
    rest, _ = train(resumed_model, ds, cfg, resume=ck)
    assert [r["epoch"] for r in rest] == [3, 4]
    assert rest == full[2:]
    for k, v in full_model.values().items():
        assert resumed_model.values()[k].tobytes() == v.tobytes()


def test_training_is_deterministic(ds, tmp_path):
    cfg = TrainConfig(epochs=5, lr_halve_epoch=4, batch_size=4)
    for run in ("a", "b"):
        train(small_model(ds, dropout_p=0.2), ds, cfg, log_path=tmp_path / f"{run}.jsonl",
              checkpoint_dir=tmp_path / run)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for f in ("manifest.json", "arrays.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_non_finite_loss_aborts_with_last_good_checkpoint(ds, tmp_path, monkeypatch):
    model = small_model(ds)
    real = model.backward
    calls = {"n": 0}

    def flaky(trace, *a, **kw):
        calls["n"] += 1
        loss, g = real(trace, *a, **kw)
        return (float("nan") if calls["n"] > 3 else loss), g

    monkeypatch.setattr(model, "backward", flaky)
    with pytest.raises(TrainingError, match="non-finite loss at epoch 2"):
        train(model, ds, TrainConfig(epochs=3, lr_halve_epoch=3, batch_size=8), checkpoint_dir=tmp_path / "ck")
    assert Checkpoint.load(tmp_path / "ck").epoch == 1


def test_empty_training_split_rejected(ds):
    with pytest.raises(ConfigError):
        train(small_model(ds), ds, TrainConfig(train_split="test", epochs=1, lr_halve_epoch=1))
