"""Optimizer, learning-rate schedule and the training protocols.

Three protocols share the same machinery:

* supervised: encoder and classification head trained jointly with
  cross-entropy on class-balanced batches;
* contrastive: encoder and embedding head trained on batches sampled from
  the information graph;
* semi-supervised: every epoch runs one contrastive pass, then fine-tunes the
  classification head on the frozen encoder.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import BatchLossError, ConfigurationError, TrainingError
from .infograph import BalanceQuotas, InfoGraph, build_batch, sample_edges
from .loss import LossConfig, assemble_embeddings, batch_contrastive_loss, cross_entropy
from .model import AnchorVectors, ForwardCache, Network

log = logging.getLogger(__name__)

MODES = ("xe", "ig_link", "ig_anchor")
HISTORY_FIELDS = ("epoch", "phase", "loss", "val_acc")


@dataclass
class OptimState:
    """SGD with momentum; weight decay enters as an L2 term of the gradient.

    With ``max_grad_norm`` set, the loss gradient (before weight decay) is
    rescaled so its global norm over the updated tensors does not exceed it.
    """

    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_min: float = 0.0
    max_grad_norm: float | None = None
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, opt: OptimState, lr: float | None = None, names: Sequence[str] | None = None) -> dict:
    """In-place update ``v <- m v + (g + wd theta); theta <- theta - lr v``.

    ``names`` limits the update to a subset of ``grads``.
    """
    lr = opt.lr0 if lr is None else lr
    names = list(grads if names is None else names)
    for name in names:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingError(f"non-finite gradient for {name}: {bad} of {g.size} entries, max |finite| = "
                                f"{np.max(np.abs(g[np.isfinite(g)]), initial=0.0):.3g}")
    scale = 1.0
    if opt.max_grad_norm is not None:
        norm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names))
        if norm > opt.max_grad_norm:
            scale = opt.max_grad_norm / norm
    for name in names:
        theta = params[name]
        g = scale * grads[name] + opt.weight_decay * theta
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(theta)
        v *= opt.momentum
        v += g
        theta -= lr * v
    return params


def cosine_lr(t: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        raise ValueError("total number of steps must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class TrainPlan:
    mode: str = "ig_anchor"
    use_system_context: bool = True
    epochs: int = 60
    n_edges: int = 64
    batch_size: int = 128
    tau: float = 0.1
    unlabeled_ratio: float = 4.5
    finetune_epochs: int = 20
    lr: float = 0.05
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_grad_norm: float | None = None
    selection: str = "validation"
    annotation_stations: tuple[int, ...] | None = None
    seed: int = 0
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.finetune_epochs < 0:
            raise ConfigurationError("epochs must be >= 1 and finetune_epochs >= 0")
        if self.n_edges < 1 or 2 * self.n_edges > self.batch_size:
            raise ConfigurationError(f"n_edges={self.n_edges} can produce more than batch_size={self.batch_size} nodes")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigurationError("max_grad_norm must be positive")
        if self.selection not in ("validation", "last"):
            raise ConfigurationError(f"selection must be 'validation' or 'last', got {self.selection!r}")
        if self.checkpoint_every < 0 or (self.checkpoint_every and self.checkpoint_dir is None):
            raise ConfigurationError("checkpoint_every needs a checkpoint_dir and must be >= 0")
        if self.annotation_stations is not None:
            self.annotation_stations = tuple(self.annotation_stations)
            if not self.annotation_stations:
                raise ConfigurationError("annotation mask is empty")

    @property
    def strategy(self) -> str:
        return self.mode.split("_", 1)[1] if self.mode != "xe" else ""

    def optimizer(self) -> OptimState:
        return OptimState(self.lr, self.momentum, self.weight_decay, self.lr_min, self.max_grad_norm)


def select_model(history: Sequence[dict], mode: str = "validation") -> int:
    """Epoch (1-based) to keep.

    ``"last"`` (or regime ``one_station_sc``) keeps the final epoch; anything
    else keeps the best validation accuracy, earliest on ties.
    """
    epochs = sorted({h["epoch"] for h in history})
    if not epochs:
        raise ValueError("empty history")
    if mode in ("last", "one_station_sc"):
        return epochs[-1]
    scored = [(h["epoch"], h["val_acc"]) for h in history if h.get("val_acc") is not None]
    if not scored:
        return epochs[-1]
    best_epoch, best = scored[0]
    for epoch, acc in scored[1:]:
        if acc > best:
            best_epoch, best = epoch, acc
    return best_epoch


def balanced_batches(y: np.ndarray, batch_size: int, n_batches: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches holding the same number of examples per class (+-1).

    Each class is walked through in a shuffled order and reshuffled when
    exhausted, so small classes are repeated rather than left out.
    """
    classes = np.unique(y)
    pools = {c: list(rng.permutation(np.flatnonzero(y == c))) for c in classes}
    cursors = {c: 0 for c in classes}
    batches = []
    per = max(batch_size, len(classes))
    for _ in range(n_batches):
        base, rem = divmod(per, len(classes))
        extra = set(rng.permutation(classes)[:rem].tolist())
        idx = []
        for c in classes:
            k = base + (1 if c in extra else 0)
            for _ in range(k):
                if cursors[c] == len(pools[c]):
                    pools[c] = list(rng.permutation(pools[c]))
                    cursors[c] = 0
                idx.append(pools[c][cursors[c]])
                cursors[c] += 1
        batches.append(np.array(idx, dtype=int))
    return batches


def _check_labels(y: np.ndarray) -> None:
    if len(y) == 0:
        raise ConfigurationError("no labeled data to train on")


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(preds) != len(labels):
        raise ValueError("preds and labels differ in length")
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return 100.0 * float(np.mean(preds == labels))


def predict_labels(model: Network, X: np.ndarray) -> np.ndarray:
    return np.argmax(model.classify(X, training=False), axis=1)


# --------------------------------------------------------------------------
# one pass of each protocol
# --------------------------------------------------------------------------


class _Schedule:
    """Cosine decay over ``n_steps`` updates; the last update uses lr_min."""

    def __init__(self, opt: OptimState, n_steps: int):
        self.opt = opt
        self.total = max(n_steps - 1, 1)
        self.t = 0

    def lr(self) -> float:
        return cosine_lr(min(self.t, self.total), self.total, self.opt.lr0, self.opt.lr_min)

    def advance(self) -> None:
        self.t += 1


def steps_per_contrastive_epoch(graph: InfoGraph, n_edges: int) -> int:
    return math.ceil(graph.n_edges / n_edges)


def contrastive_epoch(model: Network, graph: InfoGraph, features: np.ndarray, plan: TrainPlan, anchors: AnchorVectors | None,
                      sched: _Schedule, rng: np.random.Generator, row_of=None, stats: dict | None = None) -> float:
    """One pass of graph-sampled contrastive updates; returns the mean loss."""
    cfg = LossConfig(plan.tau, plan.strategy)
    quotas = BalanceQuotas(plan.unlabeled_ratio)
    names = model.names("enc.", "emb.")
    losses = []
    for _ in range(steps_per_contrastive_epoch(graph, plan.n_edges)):
        sample = sample_edges(graph, plan.n_edges, rng, quotas)
        batch = build_batch(graph, sample, features, row_of)
        if stats is not None:
            n_ann = sum(quotas.per_class.values())
            stats.setdefault("annotation_edges", 0)
            stats.setdefault("context_edges", 0)
            stats.setdefault("batch_sizes", []).append(batch.size)
            stats["annotation_edges"] += n_ann
            stats["context_edges"] += plan.n_edges - n_ann
        cache = ForwardCache()
        Zs = model.embed(batch.features, cache, training=True) if len(batch.segment_rows) else np.zeros((0, model.embed_dim))
        Z = assemble_embeddings(batch, Zs, anchors if plan.strategy == "anchor" else None)
        try:
            res = batch_contrastive_loss(batch, Z, cfg)
        except BatchLossError as exc:
            log.debug("skipping batch: %s", exc)
            sched.advance()
            continue
        grads = model.backward(cache, res.dZ[batch.segment_rows])
        sgd_step(model.params, grads, sched.opt, sched.lr(), names)
        sched.advance()
        losses.append(res.value)
    return float(np.mean(losses)) if losses else float("nan")


def finetune_epoch(model: Network, R: np.ndarray, y: np.ndarray, plan: TrainPlan, sched: _Schedule, rng: np.random.Generator,
                   batch_log: list | None = None) -> float:
    """One pass of classification-head updates on fixed representations R."""
    names = model.names("cls.")
    losses = []
    n_batches = math.ceil(len(y) / plan.batch_size)
    for idx in balanced_batches(y, plan.batch_size, n_batches, rng):
        if batch_log is not None:
            batch_log.append(np.bincount(y[idx], minlength=model.n_classes))
        cache = ForwardCache()
        logits = model.head_classify(R[idx], cache, training=True)
        loss, dlogits = cross_entropy(logits, y[idx])
        grads = model.backward(cache, dlogits)
        sgd_step(model.params, grads, sched.opt, sched.lr(), names)
        sched.advance()
        losses.append(loss)
    return float(np.mean(losses))


def supervised_epoch(model: Network, X: np.ndarray, y: np.ndarray, plan: TrainPlan, sched: _Schedule, rng: np.random.Generator) -> float:
    names = model.names("enc.", "cls.")
    losses = []
    for idx in balanced_batches(y, plan.batch_size, math.ceil(len(y) / plan.batch_size), rng):
        cache = ForwardCache()
        logits = model.classify(X[idx], cache, training=True)
        loss, dlogits = cross_entropy(logits, y[idx])
        grads = model.backward(cache, dlogits)
        sgd_step(model.params, grads, sched.opt, sched.lr(), names)
        sched.advance()
        losses.append(loss)
    return float(np.mean(losses))


# --------------------------------------------------------------------------
# full protocols
# --------------------------------------------------------------------------


def _validate(model, validation):
    if validation is None:
        return None
    Xv, yv = validation
    if len(yv) == 0:
        return None
    return accuracy(predict_labels(model, Xv), yv)


def _checkpoint(plan: TrainPlan, model: Network, epoch: int, history: Sequence[dict]) -> None:
    if not plan.checkpoint_every or epoch % plan.checkpoint_every:
        return
    out = Path(plan.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / f"epoch{epoch:04d}.ckpt")
    write_history_csv(history, out / "history.csv")


class _Keeper:
    """Tracks the snapshot chosen by :func:`select_model` while training."""

    def __init__(self, selection: str):
        self.selection = selection
        self.best = None
        self.state = None
        self.epoch = None

    def offer(self, model: Network, epoch: int, val_acc: float | None) -> None:
        if self.selection == "last" or val_acc is None:
            take = True
        else:
            take = self.best is None or val_acc > self.best
            if take:
                self.best = val_acc
        if take:
            self.state = model.state()
            self.epoch = epoch

    def restore(self, model: Network) -> int:
        model.load_state(self.state)
        return self.epoch


def pretrain_contrastive(plan: TrainPlan, graph: InfoGraph, features: np.ndarray, model: Network,
                         anchors: AnchorVectors | None = None, row_of=None, stats: dict | None = None) -> list[dict]:
    """Contrastive training of encoder and embedding head only."""
    if plan.mode == "xe":
        raise ConfigurationError("contrastive pretraining needs an ig_* mode")
    rng = np.random.default_rng([plan.seed, 11])
    sched = _Schedule(plan.optimizer(), plan.epochs * steps_per_contrastive_epoch(graph, plan.n_edges))
    history = []
    for epoch in range(1, plan.epochs + 1):
        loss = contrastive_epoch(model, graph, features, plan, anchors, sched, rng, row_of, stats)
        history.append({"epoch": epoch, "phase": "contrastive", "loss": loss, "val_acc": None})
    return history


def finetune_head(plan: TrainPlan, X: np.ndarray, y: np.ndarray, model: Network, validation=None,
                  batch_log: list | None = None) -> list[dict]:
    """Train the classification head with the encoder frozen."""
    y = np.asarray(y, dtype=int)
    _check_labels(y)
    rng = np.random.default_rng([plan.seed, 12])
    R = model.encode(X)
    n_epochs = max(plan.finetune_epochs, 1)
    sched = _Schedule(plan.optimizer(), n_epochs * math.ceil(len(y) / plan.batch_size))
    history = []
    for epoch in range(1, n_epochs + 1):
        loss = finetune_epoch(model, R, y, plan, sched, rng, batch_log)
        history.append({"epoch": epoch, "phase": "finetune", "loss": loss, "val_acc": _validate(model, validation)})
    return history


def train_supervised_xe(plan: TrainPlan, X: np.ndarray, y: np.ndarray, model: Network, validation=None) -> tuple[list[dict], int]:
    """Joint cross-entropy training; returns history and the kept epoch."""
    y = np.asarray(y, dtype=int)
    _check_labels(y)
    rng = np.random.default_rng([plan.seed, 13])
    sched = _Schedule(plan.optimizer(), plan.epochs * math.ceil(len(y) / plan.batch_size))
    keeper = _Keeper(plan.selection)
    history = []
    for epoch in range(1, plan.epochs + 1):
        loss = supervised_epoch(model, X, y, plan, sched, rng)
        val = _validate(model, validation)
        history.append({"epoch": epoch, "phase": "supervised", "loss": loss, "val_acc": val})
        keeper.offer(model, epoch, val)
        _checkpoint(plan, model, epoch, history)
    return history, keeper.restore(model)


def train_semi_supervised(plan: TrainPlan, graph: InfoGraph, features: np.ndarray, X_ft: np.ndarray, y_ft: np.ndarray,
                          model: Network, anchors: AnchorVectors | None, validation=None, row_of=None,
                          stats: dict | None = None, batch_log: list | None = None) -> tuple[list[dict], int]:
    """Per epoch: one contrastive pass, then fine-tuning of the classification
    head on the frozen encoder.  Returns history and the kept epoch."""
    if plan.mode == "xe":
        raise ConfigurationError("semi-supervised training needs an ig_* mode")
    y_ft = np.asarray(y_ft, dtype=int)
    _check_labels(y_ft)
    rng = np.random.default_rng([plan.seed, 14])
    c_sched = _Schedule(plan.optimizer(), plan.epochs * steps_per_contrastive_epoch(graph, plan.n_edges))
    ft_steps = plan.finetune_epochs * math.ceil(len(y_ft) / plan.batch_size)
    f_sched = _Schedule(plan.optimizer(), plan.epochs * ft_steps)
    keeper = _Keeper(plan.selection)
    history = []
    for epoch in range(1, plan.epochs + 1):
        loss = contrastive_epoch(model, graph, features, plan, anchors, c_sched, rng, row_of, stats)
        history.append({"epoch": epoch, "phase": "contrastive", "loss": loss, "val_acc": None})
        R = model.encode(X_ft)
        ft_losses = [finetune_epoch(model, R, y_ft, plan, f_sched, rng, batch_log) for _ in range(plan.finetune_epochs)]
        val = _validate(model, validation)
        history.append({"epoch": epoch, "phase": "finetune", "loss": float(np.mean(ft_losses)) if ft_losses else float("nan"),
                        "val_acc": val})
        keeper.offer(model, epoch, val)
        _checkpoint(plan, model, epoch, history)
    return history, keeper.restore(model)


def write_history_csv(history: Sequence[dict], path: str | Path) -> Path:
    """Write ``epoch,phase,loss,val_acc`` rows; missing values stay empty."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for h in history:
            w.writerow({k: ("" if h.get(k) is None else h[k]) for k in HISTORY_FIELDS})
    return path
