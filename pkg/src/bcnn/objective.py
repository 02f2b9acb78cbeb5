"""Multi-level loss, its logit gradients, and per-level metrics."""

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12
WEIGHT_SUM_TOL = 1e-6


class LossWeights(tuple):
    """Per-level loss weights, each in [0, 1], summing to 1.

    Nothing is renormalized: an invalid vector raises.
    """

    def __new__(cls, values):
        vals = tuple(float(v) for v in values)
        if not vals:
            raise ValueError("loss weights need at least one level")
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise ValueError(f"each loss weight must lie in [0, 1], got {list(vals)}")
        if abs(sum(vals) - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"loss weights must sum to 1, got {sum(vals):.9g} for {list(vals)}")
        return super().__new__(cls, vals)

    @property
    def K(self):
        return len(self)

    def focus(self):
        """Index of the largest weight (first on ties)."""
        return int(np.argmax(self))


def _check_targets(probs, targets):
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (probs.shape[0],):
        raise ValueError(f"need one target per row: {targets.shape} vs {probs.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= probs.shape[1]):
        raise ValueError(f"targets must lie in [0, {probs.shape[1]})")
    return targets


def cross_entropy(probs, targets):
    """Mean of -log p[target] over the batch, with p clamped at 1e-12."""
    probs = np.asarray(probs)
    targets = _check_targets(probs, targets)
    picked = probs[np.arange(probs.shape[0]), targets].astype(np.float64)
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def cross_entropy_grad(probs, targets):
    """Gradient of ``cross_entropy(softmax(z), t)`` with respect to z."""
    probs = np.asarray(probs)
    targets = _check_targets(probs, targets)
    g = probs.copy()
    g[np.arange(probs.shape[0]), targets] -= 1
    g /= probs.shape[0]
    return g


def bcnn_loss(level_losses, weights):
    if len(level_losses) != len(weights):
        raise ValueError(f"{len(level_losses)} level losses for {len(weights)} weights")
    return float(sum(a * l for a, l in zip(weights, level_losses)))


def bcnn_loss_and_grads(probs_list, targets_list, weights):
    """Total weighted loss, per-level losses, and per-level logit gradients.

    A level with zero weight gets ``None`` instead of a gradient so callers
    can skip backpropagating through that branch.
    """
    if not len(probs_list) == len(targets_list) == len(weights):
        raise ValueError("probs, targets and weights must cover the same levels")
    losses = [cross_entropy(p, t) for p, t in zip(probs_list, targets_list)]
    grads = []
    for p, t, a in zip(probs_list, targets_list, weights):
        if a == 0:
            grads.append(None)
        else:
            grads.append(cross_entropy_grad(p, t) * p.dtype.type(a))
    return bcnn_loss(losses, weights), losses, grads


def predictions(probs):
    """Argmax per row; ties go to the lowest index."""
    return np.asarray(probs).argmax(axis=1)


def accuracy_per_level(probs_list, targets_list):
    if len(probs_list) != len(targets_list):
        raise ValueError("one target array per level is required")
    accs = []
    for p, t in zip(probs_list, targets_list):
        t = np.asarray(t)
        accs.append(float(np.mean(predictions(p) == t)) if t.size else 0.0)
    return accs


def consistency_rate(tree, preds_list):
    """Fraction of samples whose level-k prediction is the parent of their
    level-(k+1) prediction for every k."""
    if len(preds_list) != tree.K:
        raise ValueError(f"expected {tree.K} prediction arrays, got {len(preds_list)}")
    preds = [np.asarray(p, dtype=np.int64) for p in preds_list]
    n = preds[0].shape[0]
    if any(p.shape != (n,) for p in preds):
        raise ValueError("prediction arrays differ in length")
    if n == 0:
        return 0.0
    ok = np.ones(n, dtype=bool)
    for k in range(1, tree.K):
        ok &= tree.parent_map(k + 1)[preds[k]] == preds[k - 1]
    return float(ok.mean())


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    weights: tuple
    train_loss: float
    train_acc: tuple
    test_acc: tuple = ()
    test_consistency: float = float("nan")
