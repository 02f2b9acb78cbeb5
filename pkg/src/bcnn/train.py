"""Schedules, SGD with momentum, and the training loop."""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import append_metrics_row, save_checkpoint
from .nn import Mode, ShapeError
from .objective import (LossWeights, MetricsRecord,
                        bcnn_loss_and_grads, consistency_rate, predictions)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleTable:
    """Piecewise-constant values keyed by 1-based epoch.

    An entry ``(e, values)`` takes effect at epoch ``e`` and holds until the
    next entry.
    """

    entries: tuple

    def __post_init__(self):
        entries = tuple((int(e), tuple(float(v) for v in vals)) for e, vals in self.entries)
        if entries:
            if entries[0][0] != 1:
                raise ValueError(f"a schedule must start at epoch 1, not {entries[0][0]}")
            epochs = [e for e, _ in entries]
            if any(b <= a for a, b in zip(epochs, epochs[1:])):
                raise ValueError(f"schedule epochs must increase strictly: {epochs}")
            widths = {len(v) for _, v in entries}
            if len(widths) != 1 or 0 in widths:
                raise ValueError("every schedule entry needs the same, non-zero number of values")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def parse(cls, text):
        """Read ``"1:0.98 0.02; 12:0.60 0.40"`` style text."""
        entries = []
        for chunk in text.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            epoch, sep, values = chunk.partition(":")
            if not sep:
                raise ValueError(f"schedule entry {chunk!r} lacks 'epoch:' prefix")
            try:
                entries.append((int(epoch), [float(v) for v in values.split()]))
            except ValueError:
                raise ValueError(f"bad schedule entry {chunk!r}") from None
        return cls(tuple(entries))

    def format(self):
        return "; ".join(f"{e}:" + " ".join(f"{v:g}" for v in vals) for e, vals in self.entries)

    @property
    def width(self):
        return len(self.entries[0][1]) if self.entries else 0

    def as_loss_weights(self):
        """Validate every entry as a loss-weight vector; returns self."""
        for e, vals in self.entries:
            try:
                LossWeights(vals)
            except ValueError as exc:
                raise ValueError(f"epoch {e}: {exc}") from None
        return self

    def scaled(self, old_epochs, new_epochs):
        """Same schedule compressed or stretched to a different run length."""
        out = []
        for e, vals in self.entries:
            new = 1 + int(round((e - 1) * new_epochs / old_epochs))
            if out and new <= out[-1][0]:
                new = out[-1][0] + 1
            out.append((new, vals))
        return ScheduleTable(tuple(out))


def value_at_epoch(schedule, epoch):
    if not schedule.entries:
        raise ValueError("empty schedule")
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    current = schedule.entries[0][1]
    for e, vals in schedule.entries:
        if e > epoch:
            break
        current = vals
    return current


def sgd_momentum_step(param, grad, velocity, lr, momentum=0.9):
    """Classical momentum, in place: v <- momentum*v - lr*grad; param <- param + v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeError(f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}")
    velocity *= momentum
    velocity -= lr * grad
    param += velocity


class SGD:
    def __init__(self, model, momentum=0.9):
        self.model = model
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(layer.params[key])
                         for name, layer, key in model.named_parameters()}

    def step(self, lr):
        dt = None
        for name, layer, key in self.model.named_parameters():
            p = layer.params[key]
            dt = dt or p.dtype.type
            sgd_momentum_step(p, layer.grads[key], self.velocity[name], dt(lr), dt(self.momentum))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size < 2:  # batchnorm cannot normalize a single sample
            continue
        yield idx


def train_epoch(model, dataset, weights, lr, batch_size, rng, optimizer, epoch=0):
    """One shuffled pass.  Returns the epoch's training metrics."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    weights = LossWeights(weights)
    if len(weights) != model.K:
        raise ValueError(f"{len(weights)} loss weights for a {model.K}-output model")
    targets = model.tree.derive_targets(dataset.fine_labels)
    loss_sum, seen = 0.0, 0
    correct = np.zeros(model.K)
    for idx in _batches(n, batch_size, rng):
        x = dataset.images[idx]
        batch_targets = [t[idx] for t in targets]
        probs = model.forward(x, Mode.TRAIN)
        loss, _, dlogits = bcnn_loss_and_grads(probs, batch_targets, weights)
        model.backward(dlogits)
        optimizer.step(lr)
        loss_sum += loss * idx.size
        seen += idx.size
        correct += [np.sum(predictions(p) == t) for p, t in zip(probs, batch_targets)]
    return MetricsRecord(epoch=epoch, lr=float(lr), weights=tuple(weights),
                         train_loss=loss_sum / seen, train_acc=tuple(float(c / seen) for c in correct))


def evaluate(model, dataset, batch_size=500):
    """Eval-mode pass: (per-level accuracy, consistency rate, per-level predictions)."""
    targets = model.tree.derive_targets(dataset.fine_labels)
    preds = [[] for _ in range(model.K)]
    for start in range(0, len(dataset), batch_size):
        probs = model.forward(dataset.images[start:start + batch_size], Mode.EVAL)
        for k, p in enumerate(probs):
            preds[k].append(predictions(p))
    preds = [np.concatenate(p) if p else np.zeros(0, np.int64) for p in preds]
    n = len(dataset)
    accs = [float(np.mean(p == t)) if n else 0.0 for p, t in zip(preds, targets)]
    return accs, consistency_rate(model.tree, preds), preds


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_test_acc: float = float("-inf")

    @property
    def final(self):
        return self.history[-1]


def fit(model, train_set, test_set, lr_schedule, weight_schedule, epochs,
        batch_size=128, seed=0, out_dir=None, momentum=0.9):
    """Train for ``epochs`` epochs, evaluating on ``test_set`` after each.

    With ``out_dir`` set, each epoch appends a row to ``history.csv`` and
    rewrites ``final.ckpt``; ``best.ckpt`` tracks the best fine-level test
    accuracy.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if weight_schedule.width != model.K:
        raise ValueError(f"loss-weight schedule has {weight_schedule.width} values, model has {model.K} outputs")
    weight_schedule.as_loss_weights()
    rng = np.random.default_rng(seed)
    opt = SGD(model, momentum)
    result = FitResult()
    csv_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "history.csv"
        if csv_path.exists():
            csv_path.unlink()
    for epoch in range(1, epochs + 1):
        lr = value_at_epoch(lr_schedule, epoch)[0]
        weights = LossWeights(value_at_epoch(weight_schedule, epoch))
        rec = train_epoch(model, train_set, weights, lr, batch_size, rng, opt, epoch)
        rec.test_acc, rec.test_consistency, _ = evaluate(model, test_set)
        rec.test_acc = tuple(rec.test_acc)
        result.history.append(rec)
        log.info("epoch %d lr=%g A=%s loss=%.4f train=%s test=%s", epoch, lr, list(weights), rec.train_loss,
                 " ".join(f"{a:.4f}" for a in rec.train_acc), " ".join(f"{a:.4f}" for a in rec.test_acc))
        if out_dir is not None:
            append_metrics_row(rec, csv_path)
            save_checkpoint(model, out_dir / "final.ckpt")
        if rec.test_acc[-1] > result.best_test_acc:
            result.best_epoch, result.best_test_acc = epoch, rec.test_acc[-1]
            if out_dir is not None:
                save_checkpoint(model, out_dir / "best.ckpt")
    return result
