import csv

import numpy as np
import pytest

from dereverb.checkpoint import Checkpoint, save_checkpoint
from dereverb.errors import ConfigError, ContractError, NumericError
from dereverb.model import Model, ModelConfig, StackedFrames
from dereverb.tensor import Tensor
from dereverb.train import (
    AdamState,
    TrainConfig,
    adam_step,
    clip_grad_norm,
    l2_loss,
    lr_at,
    mask_consecutive,
    prepare_corpus,
    sample_batch,
    train_loop,
)

TINY = ModelConfig.reduced(p_dim=16, a_num=2, f_dim=16, c_num=8, cnn_channels=2)


# ------------------------------------------------------------------ loss


def test_l2_loss_basic_values():
    a = np.random.default_rng(0).standard_normal((5, 240))
    assert l2_loss(a, a).data == 0.0
    assert l2_loss(a + 1.0, a).data == pytest.approx(1.0, abs=1e-12)


def test_l2_loss_two_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    acc = 0.0
    for i in range(4):
        for j in range(6):
            acc += (a[i, j] - b[i, j]) ** 2
    assert abs(float(l2_loss(a, b).data) - acc / 24) < 1e-12


def test_l2_loss_shape_mismatch():
    with pytest.raises(ContractError):
        l2_loss(np.zeros((2, 3)), np.zeros((3, 2)))


# -------------------------------------------------------------- schedule


def test_lr_schedule_anchor_points():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.0
    assert lr_at(750, cfg) == pytest.approx(3e-4)
    assert lr_at(375, cfg) == pytest.approx(1.5e-4)
    assert lr_at(75_000, cfg) == 0.0
    assert lr_at(37_875, cfg) == pytest.approx(1.5e-4)


def test_lr_schedule_out_of_range():
    with pytest.raises(ContractError):
        lr_at(-1, TrainConfig())
    with pytest.raises(ContractError):
        lr_at(75_001, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_frac=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"learning_rate": 1})
    cfg = TrainConfig(total_steps=10, mask_half_width=4)
    assert TrainConfig.from_flat(cfg.to_flat()) == cfg


# ------------------------------------------------------------------ Adam


def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState.zeros(p)
    state.m["w"][:] = 0.5
    state.v["w"][:] = 0.25
    p["w"].grad = np.zeros(2)
    before = p["w"].data.copy()
    adam_step(p, state, lr=0.1)
    np.testing.assert_array_equal(state.m["w"], 0.45)
    np.testing.assert_allclose(state.v["w"], 0.25 * 0.999)
    # the moment estimate still moves the parameter; with fresh state nothing moves
    fresh = {"w": Tensor(before.copy(), requires_grad=True)}
    fresh["w"].grad = np.zeros(2)
    adam_step(fresh, AdamState.zeros(fresh), lr=0.1)
    np.testing.assert_array_equal(fresh["w"].data, before)


def test_adam_first_step_closed_form():
    p = {"x": Tensor(np.array(0.0), requires_grad=True)}
    p["x"].grad = np.array(1.0)
    adam_step(p, AdamState.zeros(p), lr=0.1)
    assert p["x"].data == pytest.approx(-0.1, abs=1e-8)


def test_adam_rejects_non_finite_gradient():
    p = {"bad": Tensor(np.zeros(2), requires_grad=True)}
    p["bad"].grad = np.array([0.0, np.inf])
    with pytest.raises(NumericError, match="bad"):
        adam_step(p, AdamState.zeros(p), lr=0.1)


def test_clip_grad_norm():
    a, b = Tensor(np.zeros(2), True), Tensor(np.zeros(1), True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.r_[a.grad, b.grad], [0.6, 0.0, 0.8])


# --------------------------------------------------------------- masking


def stacked(n=10, d_rate=3, seed=0):
    s = -(-n // d_rate)
    return StackedFrames(np.random.default_rng(seed).standard_normal((s, 240)) + 5.0, n, d_rate)


def test_mask_single_frame():
    d = stacked()
    out, idx = mask_consecutive(d, 4, half_width=0)
    assert list(idx) == [4]
    raw = out.frames.reshape(-1, 80)
    assert np.all(raw[4] == 0) and np.count_nonzero(np.all(raw == 0, axis=1)) == 1


def test_mask_clipped_at_edges():
    d = stacked(10)
    _, idx = mask_consecutive(d, 0, half_width=4)
    assert list(idx) == [0, 1, 2, 3, 4]
    _, idx = mask_consecutive(d, 9, half_width=4)
    assert list(idx) == [5, 6, 7, 8, 9]


def test_mask_leaves_input_untouched_and_zeroes_cells():
    d = stacked(12)
    before = d.frames.copy()
    out, idx = mask_consecutive(d, 6)
    assert np.array_equal(d.frames, before)
    raw = out.frames.reshape(-1, 80)
    assert np.all(raw[idx] == 0.0)
    keep = np.setdiff1d(np.arange(12), idx)
    np.testing.assert_array_equal(raw[keep], before.reshape(-1, 80)[keep])


def test_mask_centre_out_of_range():
    with pytest.raises(ContractError):
        mask_consecutive(stacked(10), 10)


# ------------------------------------------------------------------ loop


@pytest.fixture(scope="module")
def corpus(tiny_dataset):
    return prepare_corpus(tiny_dataset[1])


def test_corpus_stats_from_train_only(corpus):
    assert len(corpus.train) == 4 and len(corpus.valid) == 1
    allx = np.concatenate([u.x.reshape(-1, 80)[: u.orig_len] for u in corpus.train])
    np.testing.assert_allclose(allx.mean(axis=0), 0.0, atol=1e-9)


def test_sample_batch_keyed_on_step(corpus):
    cfg = TrainConfig(total_steps=10, batch_size=3)
    a = sample_batch(corpus, 5, cfg)
    b = sample_batch(corpus, 5, cfg)
    c = sample_batch(corpus, 6, cfg)
    assert np.array_equal(a[0], b[0]) and a[0].shape[0] == 3
    assert not (a[0].shape == c[0].shape and np.array_equal(a[0], c[0]))


def test_loss_csv_matches_schedule(corpus, tmp_path):
    cfg = TrainConfig(total_steps=12, batch_size=2, valid_every=5, checkpoint_every=6)
    train_loop(corpus, TINY, cfg, out_dir=tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "loss.csv")))
    assert [int(r["step"]) for r in rows] == list(range(1, 13))
    for r in rows:
        assert float(r["lr"]) == lr_at(int(r["step"]), cfg)
    assert [r["step"] for r in rows if r["valid_loss"]] == ["5", "10", "12"]
    for name in ("last.ckpt", "best.ckpt", "step6.ckpt", "step12.ckpt"):
        assert (tmp_path / name).exists()


def test_training_is_bit_deterministic(corpus):
    cfg = TrainConfig(total_steps=6, batch_size=2)
    a = train_loop(corpus, TINY, cfg)
    b = train_loop(corpus, TINY, cfg)
    assert [r["train_loss"] for r in a.curve] == [r["train_loss"] for r in b.curve]
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data, b.model.params[k].data)


def test_resume_reproduces_uninterrupted_run(corpus, tmp_path):
    cfg = TrainConfig(total_steps=8, batch_size=2)
    full = train_loop(corpus, TINY, cfg)
    train_loop(corpus, TINY, cfg, out_dir=tmp_path, stop_after=4)
    assert Checkpoint(tmp_path / "last.ckpt").step == 4
    rest = train_loop(corpus, TINY, cfg, out_dir=tmp_path, resume=tmp_path / "last.ckpt")
    assert [r["train_loss"] for r in rest.curve] == [r["train_loss"] for r in full.curve[4:]]
    for k in full.model.params:
        assert np.array_equal(full.model.params[k].data, rest.model.params[k].data)
    steps = [int(r["step"]) for r in csv.DictReader(open(tmp_path / "loss.csv"))]
    assert steps == list(range(1, 9))


def test_checkpoint_round_trip_and_mismatch(corpus, tmp_path):
    model = Model.create(TINY, seed=2)
    save_checkpoint(tmp_path / "m.ckpt", model, corpus.stats_in, corpus.stats_out, step=3)
    ck = Checkpoint(tmp_path / "m.ckpt")
    assert ck.config == TINY and ck.step == 3 and ck.adam_moments() is None
    back = ck.model(TINY)
    for k, v in model.params.items():
        assert np.array_equal(back.params[k].data, v.data)
    np.testing.assert_array_equal(ck.stats("out").mean, corpus.stats_out.mean)
    with pytest.raises(ConfigError):
        ck.model(ModelConfig.reduced())


def test_masked_training_runs(corpus):
    res = train_loop(corpus, TINY, TrainConfig(total_steps=3, batch_size=2, mask_half_width=4))
    assert len(res.curve) == 3 and np.isfinite(res.curve[-1]["train_loss"])
