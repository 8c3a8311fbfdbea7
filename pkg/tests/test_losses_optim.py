"""Loss closed forms, Adam update math, schedules, and config validation."""

import math

import numpy as np
import pytest

from palmsiam.tensor import Tensor
from palmsiam.training import (
    AdamState,
    EarlyStopper,
    ReduceLROnPlateau,
    TrainConfig,
    adam_step,
    bce_loss,
    contrastive_loss,
)


def contrastive_oracle(d, y, m):
    return 0.5 * d * d if y else 0.5 * max(0.0, m - d) ** 2


def bce_oracle(p, y, eps=1e-7):
    p = min(max(p, eps), 1.0 - eps)
    return -math.log(p) if y else -math.log(1.0 - p)


def test_contrastive_random_grid_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        d = float(rng.uniform(0.0, 8.0))
        m = float(rng.uniform(0.1, 6.0))
        y = bool(rng.integers(2))
        expected = contrastive_oracle(d, y, m)
        assert abs(contrastive_loss(d, y, m) - expected) < 1e-12
        got = contrastive_loss(Tensor(np.asarray(d), dtype=np.float64), y, m)
        assert abs(got.item() - expected) < 1e-12


def test_bce_random_grid_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        p = float(rng.uniform(0.0, 1.0))
        y = bool(rng.integers(2))
        expected = bce_oracle(p, y)
        assert abs(bce_loss(p, y) - expected) < 1e-12
        got = bce_loss(Tensor(np.asarray(p), dtype=np.float64), y)
        assert abs(got.item() - expected) < 1e-12


def test_contrastive_hinge_regions():
    assert contrastive_loss(0.0, True, 1.0) == 0.0
    assert contrastive_loss(3.0, True, 1.0) == pytest.approx(4.5)
    assert contrastive_loss(2.0, False, 1.0) == 0.0  # beyond the margin: no push
    assert contrastive_loss(0.25, False, 1.0) == pytest.approx(0.5 * 0.75**2)
    with pytest.raises(ValueError, match="margin must be positive"):
        contrastive_loss(1.0, True, 0.0)


def test_bce_clamps_the_log_endpoints():
    assert math.isfinite(bce_loss(0.0, True))
    assert math.isfinite(bce_loss(1.0, False))
    assert bce_loss(0.0, True) == pytest.approx(-math.log(1e-7))


def test_loss_gradients_through_graph():
    d = Tensor(np.asarray(2.0), requires_grad=True, dtype=np.float64)
    contrastive_loss(d, True, 1.0).backward()
    assert float(d.grad) == pytest.approx(2.0)  # d(0.5 d^2)/dd = d

    d2 = Tensor(np.asarray(0.25), requires_grad=True, dtype=np.float64)
    contrastive_loss(d2, False, 1.0).backward()
    assert float(d2.grad) == pytest.approx(-(1.0 - 0.25))  # -(m - d)

    d3 = Tensor(np.asarray(5.0), requires_grad=True, dtype=np.float64)
    contrastive_loss(d3, False, 1.0).backward()
    assert float(d3.grad) == 0.0  # dead hinge

    p = Tensor(np.asarray(0.4), requires_grad=True, dtype=np.float64)
    bce_loss(p, True).backward()
    assert float(p.grad) == pytest.approx(-1.0 / 0.4)
    p2 = Tensor(np.asarray(0.4), requires_grad=True, dtype=np.float64)
    bce_loss(p2, False).backward()
    assert float(p2.grad) == pytest.approx(1.0 / 0.6)


def test_adam_first_step_magnitude():
    # with zeroed moments, the first bias-corrected step is lr * g/(|g| + ~eps)
    w = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True, dtype=np.float64)
    w.grad = np.array([0.1, -0.4, 0.0])
    state = AdamState([("w", w)], beta1=0.9, beta2=0.999, eps=1e-8)
    before = w.data.copy()
    adam_step([("w", w)], state, lr=0.01)
    moved = before - w.data
    direction = np.sign(np.array([0.1, -0.4, 0.0]))
    np.testing.assert_allclose(moved[:2], 0.01 * direction[:2], rtol=1e-6)
    assert moved[2] == 0.0
    assert state.step_count == 1


def test_adam_matches_reference_formula_over_steps():
    rng = np.random.default_rng(5)
    w = Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
    ref = w.data.copy()
    m = np.zeros(6)
    v = np.zeros(6)
    state = AdamState([("w", w)], beta1=0.9, beta2=0.999, eps=1e-8)
    for t in range(1, 8):
        g = rng.standard_normal(6)
        w.grad = g.copy()
        adam_step([("w", w)], state, lr=3e-3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        ref = ref - 3e-3 * mhat / (np.sqrt(vhat) + 1e-8)
        # the in-place variant folds eps before bias correction; agreement is
        # to eps-level, not bitwise
        np.testing.assert_allclose(w.data, ref, rtol=1e-7, atol=1e-10)


def test_adam_requires_gradients():
    w = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
    state = AdamState([("w", w)])
    with pytest.raises(ValueError, match="no gradient for parameter w"):
        adam_step([("w", w)], state, lr=0.1)


def test_plateau_schedule_halves_after_patience():
    sched = ReduceLROnPlateau(lr=1.0, patience=2, factor=0.5, min_delta=0.0, floor=1e-3)
    assert sched.update(10.0) == 1.0   # first value becomes best
    assert sched.update(9.0) == 1.0    # improvement
    assert sched.update(9.5) == 1.0    # bad 1
    assert sched.update(9.4) == 0.5    # bad 2 -> cut
    assert sched.update(9.4) == 0.5    # counter reset after cut: bad 1
    assert sched.update(9.4) == 0.25   # bad 2 -> cut


def test_plateau_respects_floor_and_min_delta():
    sched = ReduceLROnPlateau(lr=4e-3, patience=1, factor=0.5, min_delta=0.5, floor=1e-3)
    sched.update(10.0)
    assert sched.update(9.8) == 2e-3   # within min_delta: not an improvement
    assert sched.update(9.0) == 2e-3   # real improvement: lr kept
    assert sched.update(9.1) == 1e-3
    assert sched.update(9.2) == 1e-3   # clamped at the floor
    with pytest.raises(ValueError):
        ReduceLROnPlateau(lr=0.0)


def test_early_stopper_counts_consecutive_bad_epochs():
    stop = EarlyStopper(patience=3, min_delta=0.0)
    assert not stop.update(5.0)
    assert not stop.update(4.0)
    assert not stop.update(4.2)
    assert not stop.update(4.1)
    assert not stop.update(3.9)  # improvement resets the streak
    assert not stop.update(4.0)
    assert not stop.update(4.0)
    assert stop.update(4.0)
    with pytest.raises(ValueError, match="patience"):
        EarlyStopper(patience=0)


def test_train_config_validation_messages():
    cases = [
        (dict(loss="hinge"), "loss must be one of"),
        (dict(n=0), "n must be >= 1"),
        (dict(margin=0.0), "margin must be positive"),
        (dict(lr=-1.0), "lr must be positive"),
        (dict(beta1=1.0), "Adam betas"),
        (dict(adam_eps=0.0), "adam_eps must be positive"),
        (dict(max_epochs=0), "must be >= 1"),
        (dict(plateau_factor=1.0), "plateau_factor"),
        (dict(early_stop_patience=0), "patience values"),
        (dict(lr_floor=0.0), "lr_floor"),
        (dict(dropout_rate=1.0), "dropout_rate"),
        (dict(val_pairs_per_class=0), "val_pairs_per_class"),
    ]
    for kwargs, fragment in cases:
        with pytest.raises(ValueError, match=fragment):
            TrainConfig(**kwargs)
    assert TrainConfig().loss == "contrastive"  # defaults are valid


def test_history_csv_format():
    from palmsiam.training import EpochRecord, TrainHistory

    hist = TrainHistory()
    hist.records.append(EpochRecord(1, 1.5, 2.25, 0.875, 1e-4))
    hist.records.append(EpochRecord(2, 1.25, 2.0, 0.9, 5e-5))
    hist.stop_reason = "max_epochs"
    text = hist.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "epoch,train_loss,val_loss,val_accuracy,lr"
    assert lines[1] == "1,1.500000,2.250000,0.875000,0.000100"
    assert lines[2] == "2,1.250000,2.000000,0.900000,0.000050"
    assert text.endswith("\n")
