import csv
import math

import numpy as np
import pytest

from pdfnet import tensor as T
from pdfnet.data import IGNORE, synthetic_samples
from pdfnet.layers import load_checkpoint
from pdfnet.network import build_network, parse_variant
from pdfnet.training import (
    AllIgnoredWarning, EpochLog, PlateauScheduler, SGDNesterov, TrainConfig, cross_entropy_loss,
    evaluate, first_nan_layer, train,
)


def test_cross_entropy_value_and_gradient():
    rng = np.random.default_rng(0)
    z = T.Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True)
    y = np.array([[[0, 2], [IGNORE, 1]]])
    loss = cross_entropy_loss(z, y)
    p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
    expected = -np.mean([np.log(p[0, 0, 0, 0]), np.log(p[0, 2, 0, 1]), np.log(p[0, 1, 1, 1])])
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    loss.backward()
    fd = T.finite_diff_grad(lambda _: cross_entropy_loss(z, y), z)
    np.testing.assert_allclose(z.grad, fd, rtol=1e-4, atol=1e-10)
    assert not z.grad[0, :, 1, 0].any()


def test_cross_entropy_is_stable_for_large_logits():
    z = T.Tensor(np.array([1000.0, -1000.0]).reshape(1, 2, 1, 1))
    assert cross_entropy_loss(z, np.array([[[0]]])).item() == 0.0


def test_all_ignored_warns_and_returns_zero():
    z = T.Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    with pytest.warns(AllIgnoredWarning):
        loss = cross_entropy_loss(z, np.full((1, 2, 2), IGNORE))
    loss.backward()
    assert loss.item() == 0.0 and not z.grad.any()


def test_label_range_checked():
    with pytest.raises(ValueError):
        cross_entropy_loss(T.Tensor(np.zeros((1, 2, 1, 1))), np.array([[[2]]]))


def test_nesterov_matches_hand_recursion():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGDNesterov([p], lr=0.1, momentum=0.7)
    v = np.zeros(2)
    ref = p.data.copy()
    for g in ([0.5, 1.0], [0.2, -0.4], [0.0, 0.3]):
        g = np.array(g)
        opt.step([g])
        v = 0.7 * v + g
        ref = ref - 0.1 * (g + 0.7 * v)
    np.testing.assert_allclose(p.data, ref, rtol=1e-15)


def test_optimizer_validates_hyperparameters():
    with pytest.raises(ValueError):
        SGDNesterov([], lr=0)
    with pytest.raises(ValueError):
        SGDNesterov([], lr=1, momentum=1.0)


def test_plateau_scheduler_halves_after_patience():
    s = PlateauScheduler(1.0, patience=2)
    lrs = [s.step(m) for m in [1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.4]]
    assert lrs == [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25]
    with pytest.raises(ValueError):
        s.step(float("nan"))


def test_plateau_threshold_is_relative():
    s = PlateauScheduler(1.0, patience=0, threshold=0.1)
    s.step(1.0)
    assert s.step(0.95) == 0.5  # 5% better is not enough


def test_epoch_log_six_significant_digits():
    row = EpochLog(3, 1 / 3, 2.0, float("nan"), 1e-6).csv_row()
    assert row == ["3", "0.333333", "2", "nan", "1e-06"]


def test_train_writes_log_and_best_checkpoint(tmp_path):
    samples = synthetic_samples(2, 16, 32, seed=1)
    net = build_network(parse_variant("pdfnet3"), rng=0)
    cfg = TrainConfig(epochs=2, batch_size=2, lr=1e-3, log_path=str(tmp_path / "log.csv"),
                      checkpoint_path=str(tmp_path / "best.ckpt"))
    history = train(net, samples, samples[:1], cfg)
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "val_miou", "lr"]
    assert len(rows) == 3 and len(history) == 2
    ckpt = load_checkpoint(tmp_path / "best.ckpt")
    assert "family=PDFNet" in ckpt.metadata
    assert ckpt.param_scalars() == net.param_count()


def test_train_rejects_labels_beyond_class_count():
    samples = synthetic_samples(1, 16, 32, num_classes=20, classes_used=4)
    net = build_network(parse_variant("pdfnet3", num_classes=3), rng=0)
    with pytest.raises(ValueError, match="3 classes"):
        train(net, samples, [], TrainConfig(epochs=1))


def test_nan_loss_aborts_and_names_layer():
    samples = synthetic_samples(2, 16, 32)
    net = build_network(parse_variant("pdfnet3"), rng=0)
    net.stages[2].blocks[1].conv2.depthwise.weight.data[:] = np.nan
    with np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError, match="stage3.glance1.conv2.dw"):
            train(net, samples, [], TrainConfig(epochs=1, lr=1e-3))


def test_first_nan_layer_on_healthy_net():
    net = build_network(parse_variant("pdfnet3"), rng=0)
    assert "no non-finite" in first_nan_layer(net, np.zeros((1, 3, 16, 16), dtype=np.float32))


def test_evaluate_reports_loss_and_miou():
    samples = synthetic_samples(2, 16, 32)
    net = build_network(parse_variant("pdfnet3"), rng=0)
    loss, cm, miou = evaluate(net, samples, 20)
    assert math.isfinite(loss) and cm.total == 2 * 16 * 32
    assert 0 <= miou <= 1


def test_training_is_reproducible(tmp_path):
    logs = []
    for run in range(2):
        samples = synthetic_samples(4, 16, 32, seed=5)
        net = build_network(parse_variant("pdfnet3"), rng=42)
        path = tmp_path / f"log{run}.csv"
        train(net, samples, [], TrainConfig(epochs=2, lr=1e-2, log_path=str(path)))
        logs.append(path.read_bytes())
    assert logs[0] == logs[1]
