"""Finite-difference checks of every layer type and of a full model."""

import time

import numpy as np

from .hierarchy import shipped_tree
from .model import PRESETS, build_preset, grad_check_model
from .nn import (BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool2, Mode,
                 ReLU, grad_check, layer_rng, relative_error, softmax)
from .objective import cross_entropy, cross_entropy_grad

TOLERANCE = 1e-4
TREE_FOR_PRESET = {"A": "mnist", "B": "cifar10", "C": "cifar10"}


def softmax_ce_check(n=4, c=5, h=1e-5, seed=0):
    """Logit gradient of mean cross-entropy through softmax."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, c))
    t = rng.integers(0, c, size=n)
    analytic = cross_entropy_grad(softmax(z), t)
    num = np.empty_like(z)
    for idx in np.ndindex(z.shape):
        old = z[idx]
        z[idx] = old + h
        lp = cross_entropy(softmax(z), t)
        z[idx] = old - h
        lm = cross_entropy(softmax(z), t)
        z[idx] = old
        num[idx] = (lp - lm) / (2 * h)
    return float(relative_error(analytic, num).max())


def _spread(rng, shape, gap=0.1):
    """Random values whose magnitudes are at least ``gap`` (keeps ReLU and
    max-pool away from their kinks)."""
    x = rng.uniform(gap, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return x


def _distinct(rng, shape):
    """Values separated by at least 0.05, so no 2x2 window is near a tie."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 - n * 0.025).reshape(shape)


def layer_cases(seed=0):
    """(label, layer, input, mode) for every layer type."""
    rng = np.random.default_rng(seed)
    d = np.float64
    return [
        ("conv2d", Conv2D(2, 3, layer_rng(seed, "conv"), "conv", d), rng.standard_normal((2, 5, 5, 2)), Mode.TRAIN),
        ("maxpool2", MaxPool2("pool"), _distinct(rng, (2, 6, 6, 2)), Mode.TRAIN),
        ("relu", ReLU("relu"), _spread(rng, (3, 4, 4, 2)), Mode.TRAIN),
        ("flatten", Flatten("flatten"), rng.standard_normal((2, 3, 3, 2)), Mode.TRAIN),
        ("dense", Dense(4, 3, layer_rng(seed, "dense"), "dense", d), rng.standard_normal((3, 4)), Mode.TRAIN),
        ("batchnorm", BatchNorm(3, name="bn", dtype=d), rng.standard_normal((4, 3, 3, 3)), Mode.TRAIN),
        ("dropout", Dropout(0.5, layer_rng(seed, "dropout"), "dropout"), rng.standard_normal((3, 6)), Mode.TRAIN),
    ]


def run_gradcheck(arch="A", width_divisor=4, batch=4, seed=0, max_entries=20, out=print):
    """Check each layer type, softmax cross-entropy and a reduced full model.

    Prints one ``name=error`` line per check through ``out`` and returns
    ``(ok, results)`` with results a dict of worst relative errors.
    """
    results = {}
    for label, layer, x, mode in layer_cases(seed):
        results[label] = grad_check(layer, x, mode=mode, seed=seed)
    results["softmax_cross_entropy"] = softmax_ce_check(seed=seed)

    preset = PRESETS[arch]
    tree = shipped_tree(TREE_FOR_PRESET[arch])
    model = build_preset(arch, tree, seed=seed, width_divisor=width_divisor, dtype=np.float64)
    rng = np.random.default_rng(seed + 7)
    x = rng.standard_normal((batch,) + preset.input_shape)
    targets = tree.derive_targets(rng.integers(0, tree.fine_count, size=batch))
    weights = [1.0 / tree.K] * tree.K
    start = time.perf_counter()
    worst, where = grad_check_model(model, x, targets, weights, max_entries=max_entries, seed=seed)
    results[f"model_{arch}/{width_divisor}"] = worst

    ok = True
    for name, err in results.items():
        flag = "ok" if err <= TOLERANCE else "FAIL"
        ok &= err <= TOLERANCE
        out(f"{name}={err:.3e} {flag}")
    out(f"model_worst_tensor={where}")
    out(f"model_seconds={time.perf_counter() - start:.1f}")
    return ok, results
