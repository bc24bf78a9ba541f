import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from msdfnet import tensor as T
from msdfnet.config import ModelConfig, TrainConfig
from msdfnet.data import make_synthetic
from msdfnet.errors import ConfigError, DataError
from msdfnet.gradcheck import end_to_end
from msdfnet.model import build_model
from msdfnet.tensor import Tensor
from msdfnet.train import (AdamState, adam_step, aggregate, apply_augmentation, augment, dual_loss,
                           evaluate, lr_at, run_protocol, train)
from oracles import adam_reference

SMALL = ModelConfig(input_size=(16, 16), stem_channels=4, num_stages=1, num_classes=3)


def logits(rng, n=4, k=5):
    return Tensor(rng.normal(size=(n, k)))


# ---------------------------------------------------------------- dual loss


def test_dual_loss_alpha_zero_is_normal_loss(rng):
    f1, f2, s = logits(rng), logits(rng), logits(rng)
    l_dual, l_n, _ = dual_loss(f1, f2, s, [0, 1, 2, 3], 0.0)
    assert l_dual.data.tobytes() == l_n.data.tobytes()


def test_dual_loss_equal_branches_give_log_k(rng):
    f = logits(rng, k=7)
    _, _, l_r = dual_loss(f, Tensor(f.data.copy()), logits(rng, k=7), [6, 0, 3, 1], 5e-4)
    assert l_r.item() == pytest.approx(math.log(7), abs=1e-6)


def test_dual_loss_weighting_arithmetic():
    # L_N = 1.0 and L_R = ln 4 constructed directly
    with T.precision("verify64"):
        f = Tensor(np.zeros((1, 4)))
        # logits whose softmax puts exp(-1) on the label
        target = math.exp(-1.0)
        other = math.log((1 - target) / target / 3)
        s = Tensor(np.array([[0.0, other, other, other]]))
        l_dual, l_n, l_r = dual_loss(f, f, s, [0], 5e-4)
    assert l_n.item() == pytest.approx(1.0, abs=1e-12)
    assert l_r.item() == pytest.approx(1.3862944, abs=1e-7)
    assert l_dual.item() == pytest.approx(1.0006931, abs=1e-7)


@given(seed=st.integers(0, 1000), alpha=st.floats(0, 1))
def test_dual_loss_is_weighted_sum(seed, alpha):
    rng = np.random.default_rng(seed)
    f1, f2, s = logits(rng), logits(rng), logits(rng)
    l_dual, l_n, l_r = dual_loss(f1, f2, s, [1, 1, 0, 4], alpha)
    expect = np.float32(l_n.data) + np.float32(alpha) * np.float32(l_r.data)
    assert abs(float(l_dual.data) - float(expect)) <= np.spacing(np.float32(expect))


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.ones(3), requires_grad=True)
    p.grad = np.zeros(3, dtype=np.float32)
    adam_step({"p": p}, AdamState(), 1e-3)
    np.testing.assert_array_equal(p.data, 1)


def test_adam_first_step():
    p = Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.ones(4, dtype=np.float32)
    adam_step({"p": p}, AdamState(), 1e-3)
    np.testing.assert_allclose(p.data, -0.001 / (1 + 1e-8), rtol=1e-6)
    np.testing.assert_array_equal(p.grad, 1)


def test_adam_matches_scalar_reference():
    grads = [0.5, -1.0, 2.0, 0.1, -0.3]
    with T.precision("verify64"):
        p = Tensor(np.array([0.7]), requires_grad=True)
        state = AdamState()
        for g in grads:
            p.grad = np.array([g])
            adam_step({"p": p}, state, 0.01)
    assert p.data[0] == pytest.approx(adam_reference(0.7, grads, 0.01), abs=1e-12)
    assert state.step == len(grads)


def test_adam_identical_groups_evolve_identically():
    a, b = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
    state = AdamState()
    for g in ([1, 2, 3], [-1, 0, 4]):
        a.grad = b.grad = np.array(g, dtype=np.float32)
        adam_step({"a": a, "b": b}, state, 1e-2)
    assert np.array_equal(a.data, b.data)


# ---------------------------------------------------------------- schedule


def test_lr_schedule_values():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.001
    assert lr_at(30, cfg) == 0.0005
    assert lr_at(119, cfg) == 0.000125


def test_lr_non_increasing_and_piecewise_constant():
    cfg = TrainConfig()
    lrs = [lr_at(e, cfg) for e in range(cfg.total_epochs)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(lrs[e] == lrs[(e // 30) * 30] for e in range(len(lrs)))


# ---------------------------------------------------------------- augmentation


def test_augment_identity_choices():
    img = np.random.default_rng(0).uniform(size=(3, 4, 4)).astype(np.float32)
    assert np.array_equal(apply_augmentation(img, 0, False, 1.0), img)


def test_rotation_group_property():
    img = np.random.default_rng(1).uniform(size=(3, 5, 5)).astype(np.float32)
    twice = apply_augmentation(apply_augmentation(img, 1, False, 1.0), 1, False, 1.0)
    assert np.array_equal(twice, apply_augmentation(img, 2, False, 1.0))


def test_brightness_clamp():
    img = np.full((3, 1, 1), 0.9, dtype=np.float32)
    assert apply_augmentation(img, 0, False, 1.2)[0, 0, 0] == 1.0


def test_augment_seeded():
    img = np.random.default_rng(2).uniform(size=(3, 6, 6)).astype(np.float32)
    a = augment(img, np.random.default_rng(5))
    b = augment(img, np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


# ---------------------------------------------------------------- training


def test_single_batch_single_epoch_history():
    ds = make_synthetic(3, 4, 16, seed=0)
    cfg = TrainConfig(total_epochs=1, batch_size=32, seed=1)
    hist = train(build_model(SMALL, 0), ds, cfg)
    assert len(hist) == 1
    rec = hist[0]
    assert rec.lr == 0.001
    expect = np.float32(rec.l_n) + np.float32(cfg.alpha) * np.float32(rec.l_r)
    assert abs(rec.l_dual - float(expect)) <= np.spacing(np.float32(expect))


def test_training_is_deterministic():
    ds = make_synthetic(3, 4, 16, seed=0)
    cfg = TrainConfig(total_epochs=3, batch_size=5, seed=2)
    a = train(build_model(SMALL, 0), ds, cfg).to_csv()
    b = train(build_model(SMALL, 0), ds, cfg).to_csv()
    assert a == b
    assert a.splitlines()[0] == "epoch,lr,l_n,l_r,l_dual,train_acc"


def test_train_errors():
    model = build_model(SMALL, 0)
    with pytest.raises(ConfigError):
        train(model, make_synthetic(4, 2, 16), TrainConfig(total_epochs=1))
    with pytest.raises(DataError):
        train(model, make_synthetic(3, 2, 16).subset([]), TrainConfig(total_epochs=1))


def test_memorization_gives_full_accuracy_and_falling_loss():
    ds = make_synthetic(3, 4, 16, seed=5)
    cfg = TrainConfig(total_epochs=100, seed=5, augment=False, dropout_rate=0.0)
    model = build_model(SMALL, 5)
    hist = train(model, ds, cfg)
    assert evaluate(model, ds) == 1.0
    early = np.mean([r.l_dual for r in hist.records[:5]])
    late = np.mean([r.l_dual for r in hist.records[-5:]])
    assert late < early


def test_end_to_end_gradient_matches_finite_differences():
    assert end_to_end(seed=3) <= 1e-3


# ---------------------------------------------------------------- protocol / report


def test_aggregate_mean_and_sample_std():
    rep = aggregate([0.9, 0.8, 1.0], train_ratio=0.5)
    assert rep.mean == pytest.approx(0.9) and rep.std == pytest.approx(0.1)
    assert rep.summary() == "accuracy: 0.9000 ± 0.1000 (3 runs, ratio 0.5)"
    assert rep.to_csv().splitlines() == ["run,accuracy", "0,0.9", "1,0.8", "2,1.0"]


def test_single_run_flagged():
    rep = aggregate([0.75], train_ratio=0.2)
    assert rep.std == 0.0 and rep.single_run
    assert "± 0.0000" in rep.summary() and "single run" in rep.summary()


def test_protocol_reproducible():
    ds = make_synthetic(3, 4, 16, seed=0)
    cfg = TrainConfig(total_epochs=2, seed=11)
    a = run_protocol(ds, 0.5, 2, cfg, SMALL)
    b = run_protocol(ds, 0.5, 2, cfg, SMALL)
    assert a.to_csv() == b.to_csv() and a.summary() == b.summary()
    assert np.array_equal(a.confusion, b.confusion)
    assert a.confusion.sum() == 6
    assert all(0 <= x <= 1 for x in a.accuracies)


def test_protocol_argument_checks():
    ds = make_synthetic(3, 4, 16)
    with pytest.raises(ConfigError):
        run_protocol(ds, 0.5, 0, TrainConfig(), SMALL)
    with pytest.raises(ConfigError):
        run_protocol(ds, 1.0, 1, TrainConfig(), SMALL)
