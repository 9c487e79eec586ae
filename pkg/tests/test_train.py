import csv

import numpy as np
import pytest

from factories import random_graph

from igcl.exceptions import ConfigurationError, TrainingError
from igcl.model import Network, init_anchor_vectors
from igcl.train import (
    OptimState,
    TrainPlan,
    accuracy,
    balanced_batches,
    cosine_lr,
    finetune_head,
    pretrain_contrastive,
    select_model,
    sgd_step,
    train_semi_supervised,
    train_supervised_xe,
    write_history_csv,
)


# -- optimizer and schedule --------------------------------------------------


def test_sgd_momentum_recurrence():
    p = {"w": np.array([0.0])}
    opt = OptimState(lr0=0.1, momentum=0.9, weight_decay=0.0)
    sgd_step(p, {"w": np.array([1.0])}, opt)
    assert p["w"][0] == pytest.approx(-0.1)
    sgd_step(p, {"w": np.array([1.0])}, opt)
    # v2 = 0.9 * 1 + 1 = 1.9, theta2 = -0.1 - 0.19
    assert opt.velocity["w"][0] == pytest.approx(1.9)
    assert p["w"][0] == pytest.approx(-0.29)


def test_weight_decay_only():
    p = {"w": np.array([2.0])}
    sgd_step(p, {"w": np.array([0.0])}, OptimState(lr0=0.5, momentum=0.0, weight_decay=0.1))
    assert p["w"][0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_gradient_clipping_scales_loss_gradient_only():
    p = {"a": np.array([1.0]), "b": np.array([0.0])}
    opt = OptimState(lr0=1.0, momentum=0.0, weight_decay=0.5, max_grad_norm=1.0)
    sgd_step(p, {"a": np.array([3.0]), "b": np.array([4.0])}, opt)
    # norm 5 -> scaled to (0.6, 0.8); decay adds 0.5 * theta afterwards
    assert p["a"][0] == pytest.approx(1.0 - 0.6 - 0.5)
    assert p["b"][0] == pytest.approx(-0.8)


def test_clipping_leaves_small_gradients_alone():
    p = {"a": np.array([0.0])}
    sgd_step(p, {"a": np.array([0.5])}, OptimState(lr0=1.0, momentum=0.0, weight_decay=0.0, max_grad_norm=1.0))
    assert p["a"][0] == pytest.approx(-0.5)


def test_sgd_rejects_bad_gradients():
    p = {"w": np.zeros(2)}
    with pytest.raises(TrainingError):
        sgd_step(p, {"w": np.array([np.nan, 1.0])}, OptimState())
    with pytest.raises(ValueError):
        sgd_step(p, {"w": np.zeros(3)}, OptimState())
    assert not p["w"].any()


def test_sgd_names_subset():
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    sgd_step(p, {"a": np.ones(1), "b": np.ones(1)}, OptimState(lr0=1.0, momentum=0.0, weight_decay=0.0), names=["a"])
    assert p["a"][0] == -1.0 and p["b"][0] == 0.0


@pytest.mark.parametrize("t, expected", [(0, 1.0), (5, 0.55), (10, 0.1)])
def test_cosine_lr_examples(t, expected):
    assert cosine_lr(t, 10, 1.0, 0.1) == pytest.approx(expected)


def test_cosine_lr_is_monotone():
    lrs = [cosine_lr(t, 50, 0.05) for t in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1.0)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1.0)


# -- model selection ---------------------------------------------------------


def _hist(vals):
    return [{"epoch": i + 1, "val_acc": v} for i, v in enumerate(vals)]


def test_select_model_examples():
    assert select_model(_hist([50, 70, 70, 60])) == 2
    assert select_model(_hist([50, 70, 70, 60]), "last") == 4
    assert select_model(_hist([50, 70, 60]), "one_station_sc") == 3
    assert select_model(_hist([None, None])) == 2
    with pytest.raises(ValueError):
        select_model([])


# -- plan --------------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(mode="svm"), dict(epochs=0), dict(n_edges=100, batch_size=128),
                                 dict(selection="best"), dict(max_grad_norm=0.0), dict(checkpoint_every=2),
                                 dict(annotation_stations=())])
def test_plan_validation(bad):
    with pytest.raises(ConfigurationError):
        TrainPlan(**bad)


def test_plan_strategy():
    assert TrainPlan(mode="ig_link").strategy == "link"
    assert TrainPlan(mode="xe").strategy == ""


# -- batches and metrics -----------------------------------------------------


def test_balanced_batches(rng):
    y = np.array([0] * 50 + [1] * 5 + [2] * 20)
    for idx in balanced_batches(y, 16, 10, rng):
        counts = np.bincount(y[idx], minlength=3)
        assert counts.sum() == 16 and counts.max() - counts.min() <= 1


def test_accuracy():
    assert accuracy([0, 1, 1, 2], [0, 1, 2, 2]) == 75.0
    with pytest.raises(ValueError):
        accuracy([], [])


# -- protocols ---------------------------------------------------------------


def _blobs(rng, n=60, d=6):
    y = np.arange(n) % 3
    X = rng.standard_normal((n, d)) * 0.3
    X[np.arange(n), y] += 3.0
    return X, y


def test_supervised_learns_separable_toy(rng):
    X, y = _blobs(rng, 150)
    net = Network(6, hidden=(16,), head_hidden=8, embed_dim=4, n_classes=3)
    plan = TrainPlan(mode="xe", epochs=20, batch_size=32, n_edges=8)
    Xv, yv = _blobs(rng, 60)
    history, kept = train_supervised_xe(plan, X, y, net, validation=(Xv, yv))
    assert len(history) == 20 and 1 <= kept <= 20
    assert accuracy(np.argmax(net.classify(Xv, training=False), 1), yv) > 95.0


def test_supervised_is_deterministic(rng):
    X, y = _blobs(rng)
    digests = []
    for _ in range(2):
        net = Network(6, hidden=(8,), head_hidden=8, embed_dim=4, n_classes=3, seed=1)
        train_supervised_xe(TrainPlan(mode="xe", epochs=3, batch_size=16, n_edges=8, seed=4), X, y, net)
        digests.append(net.digest())
    assert digests[0] == digests[1]


def test_finetune_keeps_encoder_frozen(rng):
    X, y = _blobs(rng)
    net = Network(6, hidden=(8,), head_hidden=8, embed_dim=4, n_classes=3)
    enc, head = net.digest("enc."), net.digest("cls.")
    batch_log = []
    finetune_head(TrainPlan(finetune_epochs=3, batch_size=16, n_edges=8), X, y, net, batch_log=batch_log)
    assert net.digest("enc.") == enc and net.digest("cls.") != head
    assert all(c.max() - c.min() <= 1 for c in batch_log)


def test_semi_supervised_contract(rng):
    g = random_graph(rng, 40, n_classes=3, p_edge=0.15, p_label=0.4)
    F = rng.standard_normal((40, 6))
    labeled = [(u.id, v.id) for c in range(3) for u, v in g.annotation_edges[c]]
    X_ft = F[[i for i, _ in labeled]]
    y_ft = np.array([c for _, c in labeled])
    net = Network(6, hidden=(8,), head_hidden=8, embed_dim=4, n_classes=3)
    enc0 = net.digest("enc.")
    plan = TrainPlan(mode="ig_anchor", epochs=2, finetune_epochs=2, n_edges=11, batch_size=32, tau=0.5)
    stats, batch_log = {}, []
    history, kept = train_semi_supervised(plan, g, F, X_ft, y_ft, net, init_anchor_vectors(3, 4, 0),
                                          validation=(X_ft, y_ft), stats=stats, batch_log=batch_log)
    assert net.digest("enc.") != enc0
    assert [h["phase"] for h in history] == ["contrastive", "finetune"] * 2
    assert max(stats["batch_sizes"]) <= 2 * plan.n_edges
    assert stats["context_edges"] / stats["annotation_edges"] == pytest.approx(4.5, rel=0.2)
    assert all(c.max() - c.min() <= 1 for c in batch_log)


def test_pretrain_rejects_xe(rng):
    with pytest.raises(ConfigurationError):
        pretrain_contrastive(TrainPlan(mode="xe"), random_graph(rng, 5), np.zeros((5, 2)), Network(2, (2,), 2, 2, 3))


def test_checkpoint_cadence(tmp_path, rng):
    X, y = _blobs(rng)
    net = Network(6, hidden=(8,), head_hidden=8, embed_dim=4, n_classes=3)
    plan = TrainPlan(mode="xe", epochs=5, batch_size=16, n_edges=8, checkpoint_dir=str(tmp_path), checkpoint_every=2)
    train_supervised_xe(plan, X, y, net)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch0002.ckpt", "epoch0004.ckpt"]
    rows = list(csv.DictReader((tmp_path / "history.csv").open()))
    assert [r["epoch"] for r in rows] == ["1", "2", "3", "4"]
    assert Network.load(tmp_path / "epoch0004.ckpt").n_params() == net.n_params()


def test_write_history_csv(tmp_path):
    path = write_history_csv([{"epoch": 1, "phase": "contrastive", "loss": -0.5, "val_acc": None}], tmp_path / "h.csv")
    assert path.read_text().splitlines() == ["epoch,phase,loss,val_acc", "1,contrastive,-0.5,"]
