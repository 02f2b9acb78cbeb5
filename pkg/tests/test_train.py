import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from bcnn.data import Dataset, load_checkpoint, read_metrics_csv
from bcnn.hierarchy import shipped_tree
from bcnn.model import build_baseline, build_preset
from bcnn.nn import ShapeError
from bcnn.train import SGD, ScheduleTable, evaluate, fit, sgd_momentum_step, train_epoch, value_at_epoch


def learnable(n, seed=0, shape=(28, 28, 1), classes=10):
    """Images whose label is written as a bright band at a label-specific row."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    x = rng.random((n,) + shape).astype(np.float32) * 0.2
    band = shape[0] // classes
    for i, c in enumerate(labels):
        x[i, c * band:(c + 1) * band] += 0.8
    return Dataset(x, labels)


# -- optimizer -------------------------------------------------------------------

def test_momentum_two_steps():
    p, v = np.zeros(1), np.zeros(1)
    sgd_momentum_step(p, np.ones(1), v, lr=0.1, momentum=0.9)
    assert_allclose([p[0], v[0]], [-0.1, -0.1], rtol=1e-15)
    sgd_momentum_step(p, np.ones(1), v, lr=0.1, momentum=0.9)
    assert_allclose([p[0], v[0]], [-0.29, -0.19], rtol=1e-15)


def test_zero_momentum_is_plain_gradient_descent():
    rng = np.random.default_rng(0)
    p, g = rng.standard_normal(5), rng.standard_normal(5)
    expected = p - 0.05 * g
    sgd_momentum_step(p, g, np.zeros(5), lr=0.05, momentum=0.0)
    assert_allclose(p, expected, rtol=1e-15)


def test_momentum_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_momentum_step(np.zeros(3), np.zeros(2), np.zeros(3), 0.1)


# -- schedules -------------------------------------------------------------------

def test_schedule_lookup():
    s = ScheduleTable.parse("1:0.98 0.02; 12:0.60 0.40; 18:0.20 0.80; 22:0 1")
    assert value_at_epoch(s, 1) == (0.98, 0.02)
    assert value_at_epoch(s, 11) == (0.98, 0.02)
    assert value_at_epoch(s, 12) == (0.6, 0.4)
    assert value_at_epoch(s, 40) == (0.0, 1.0)
    assert s.width == 2
    assert ScheduleTable.parse(s.format()) == s


@pytest.mark.parametrize("text", ["2:0.1", "1:0.1; 1:0.2", "1:0.1; 3:0.2 0.3", "1 0.1", "1:x", "1:"])
def test_schedule_rejects(text):
    with pytest.raises(ValueError):
        ScheduleTable.parse(text)


def test_schedule_lookup_errors():
    with pytest.raises(ValueError):
        value_at_epoch(ScheduleTable(()), 1)
    with pytest.raises(ValueError):
        value_at_epoch(ScheduleTable.parse("1:0.1"), 0)
    with pytest.raises(ValueError):
        ScheduleTable.parse("1:0.5 0.6").as_loss_weights()


def test_scaled_schedule():
    s = ScheduleTable.parse("1:0.01; 29:0.002; 36:0.0004")
    assert [e for e, _ in s.scaled(40, 8).entries] == [1, 7, 8]
    assert [e for e, _ in ScheduleTable.parse("1:1; 2:2; 3:3").scaled(60, 2).entries] == [1, 2, 3]


schedules = st.lists(st.tuples(st.integers(1, 30), st.integers(0, 1000)), min_size=1, max_size=6)


@settings(max_examples=300, deadline=None)
@given(schedules, st.integers(1, 80))
def test_schedule_property(raw, epoch):
    starts = sorted({e for e, _ in raw} | {1})
    values = dict(raw)
    s = ScheduleTable(tuple((e, (values.get(e, 7) / 1000,)) for e in starts))
    active = max(e for e in starts if e <= epoch)
    assert value_at_epoch(s, epoch) == s.entries[starts.index(active)][1]
    assert ScheduleTable.parse(s.format()) == s
    scaled = s.scaled(30, 10)
    epochs = [e for e, _ in scaled.entries]
    assert epochs[0] == 1 and epochs == sorted(set(epochs))


# -- training loop ---------------------------------------------------------------

def test_zero_weight_head_is_not_updated():
    tree = shipped_tree("cifar10")
    model = build_preset("B", tree, width_divisor=16)
    data = learnable(16, shape=(32, 32, 3))
    before = model.state_dict()
    before = {k: v.copy() for k, v in before.items()}
    train_epoch(model, data, [0.0, 0.0, 1.0], 0.05, 8, np.random.default_rng(0), SGD(model))
    after = model.state_dict()
    for level in (1, 2):
        for name in model.exclusive_parameters(level):
            assert after[name].tobytes() == before[name].tobytes(), name
    assert not np.array_equal(after["trunk.0.conv2d.weight"], before["trunk.0.conv2d.weight"])


def test_small_set_is_overfit():
    tree = shipped_tree("mnist")
    model = build_preset("A", tree, seed=0, width_divisor=8)
    data = learnable(100, seed=1)
    lr = ScheduleTable.parse("1:0.02")
    weights = ScheduleTable.parse("1:0.3 0.7")
    result = fit(model, data, data, lr, weights, 50, batch_size=25, seed=0)
    losses = [r.train_loss for r in result.history]
    assert losses[-1] < 0.25 * losses[0]
    assert result.final.test_acc[-1] >= 0.95


def test_fixed_seed_training_is_reproducible():
    tree = shipped_tree("mnist")
    data = learnable(40, seed=2)
    runs = []
    for _ in range(2):
        model = build_preset("A", tree, seed=4, width_divisor=8)
        res = fit(model, data, data.subset(20), ScheduleTable.parse("1:0.05; 2:0.01"),
                  ScheduleTable.parse("1:0.5 0.5; 2:0 1"), 2, batch_size=16, seed=9)
        runs.append((res.history, model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for name, value in runs[0][1].items():
        assert value.tobytes() == runs[1][1][name].tobytes()


def test_fit_writes_history_and_checkpoints(tmp_path):
    tree = shipped_tree("mnist")
    model = build_preset("A", tree, seed=0, width_divisor=8)
    data = learnable(30, seed=3)
    (tmp_path / "history.csv").write_text("stale\n")
    res = fit(model, data, data.subset(10), ScheduleTable.parse("1:0.05; 3:0.01"),
              ScheduleTable.parse("1:0.5 0.5; 2:0 1"), 3, batch_size=10, seed=0, out_dir=tmp_path)
    assert [r.epoch for r in res.history] == [1, 2, 3]
    assert [r.lr for r in res.history] == [0.05, 0.05, 0.01]
    assert [r.weights for r in res.history] == [(0.5, 0.5), (0.0, 1.0), (0.0, 1.0)]
    rows = read_metrics_csv(tmp_path / "history.csv")
    assert len(rows) == 3
    assert_allclose([r.train_loss for r in rows], [r.train_loss for r in res.history], rtol=1e-9)
    final = load_checkpoint(tmp_path / "final.ckpt")
    for name, value in model.state_dict().items():
        assert final[name].tobytes() == value.tobytes()
    assert (tmp_path / "best.ckpt").exists()
    assert res.best_test_acc == max(r.test_acc[-1] for r in res.history)
    assert res.history[res.best_epoch - 1].test_acc[-1] == res.best_test_acc


def test_fit_argument_errors():
    model = build_preset("A", shipped_tree("mnist"), width_divisor=8)
    data = learnable(8)
    lr = ScheduleTable.parse("1:0.1")
    with pytest.raises(ValueError):
        fit(model, data, data, lr, ScheduleTable.parse("1:0.2 0.3 0.5"), 1)
    with pytest.raises(ValueError):
        fit(model, data, data, lr, ScheduleTable.parse("1:0.5 0.5"), 0)


def test_baseline_matches_bcnn_with_fine_only_weights():
    tree = shipped_tree("cifar10")
    data = learnable(24, seed=5, shape=(32, 32, 3))
    bcnn = build_preset("B", tree, seed=2, width_divisor=16)
    base = build_baseline("B", 10, seed=2, width_divisor=16)
    for model, w in ((bcnn, [0.0, 0.0, 1.0]), (base, [1.0])):
        train_epoch(model, data, w, 0.05, 8, np.random.default_rng(1), SGD(model))
        train_epoch(model, data, w, 0.05, 8, np.random.default_rng(2), SGD(model))
    shared = base.state_dict()
    full = bcnn.state_dict()
    for name, value in shared.items():
        assert_array_equal(full[name], value, err_msg=name)


def test_evaluate_counts_accuracy_and_consistency():
    tree = shipped_tree("cifar10")
    model = build_preset("B", tree, width_divisor=16)
    data = learnable(12, seed=6, shape=(32, 32, 3))
    accs, consistency, preds = evaluate(model, data, batch_size=5)
    targets = tree.derive_targets(data.fine_labels)
    assert accs == [float(np.mean(p == t)) for p, t in zip(preds, targets)]
    assert [p.shape for p in preds] == [(12,)] * 3
    assert 0.0 <= consistency <= 1.0
