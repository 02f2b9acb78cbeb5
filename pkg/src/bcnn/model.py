"""Branch CNN assembly.

A model is a trunk of conv/pool blocks, a set of branch heads that tap the
trunk after particular pooling layers (one per coarse level, coarsest first),
and a fine head at the end of the trunk.  Every head is an FC stack ending in
class scores; ``forward`` returns softmax probabilities per level.
"""

from dataclasses import dataclass

import numpy as np

from .hierarchy import LabelTree
from .nn import (BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool2, Mode,
                 ReLU, ShapeError, layer_rng, relative_error, softmax)
from .objective import bcnn_loss_and_grads


@dataclass(frozen=True)
class Preset:
    name: str
    input_shape: tuple
    # trunk tokens: an int is a conv3 width, "pool" a 2x2 max pool, and
    # "pool*" a pool that carries a branch head
    trunk: tuple
    head: tuple
    branches: tuple

    @property
    def levels(self):
        return len(self.branches) + 1


PRESETS = {
    "A": Preset("A", (28, 28, 1),
                (32, "pool*", 64, 64, "pool"),
                head=(128,),
                branches=((64,),)),
    "B": Preset("B", (32, 32, 3),
                (64, 64, "pool", 128, 128, "pool*", 256, 256, "pool*", 512, 512, "pool"),
                head=(1024, 1024),
                branches=((256, 256), (512, 512))),
    # VGG16 without its last pool
    "C": Preset("C", (32, 32, 3),
                (64, 64, "pool", 128, 128, "pool", 256, 256, 256, "pool*",
                 512, 512, 512, "pool*", 512, 512, 512),
                head=(4096, 4096),
                branches=((512, 512), (1024, 1024))),
}

DROPOUT_KEEP = 0.5


def _divide(width, divisor):
    w = width // divisor
    if w < 1:
        raise ValueError(f"width divisor {divisor} shrinks width {width} to zero")
    return w


def _fc_stack(prefix, n_in, hidden, n_out, seed, dtype):
    layers = [Flatten(f"{prefix}.0.flatten")]
    width = n_in
    for h in hidden:
        i = len(layers)
        layers += [
            Dense(width, h, layer_rng(seed, f"{prefix}.{i}.dense"), f"{prefix}.{i}.dense", dtype),
            BatchNorm(h, name=f"{prefix}.{i + 1}.batchnorm", dtype=dtype),
            ReLU(f"{prefix}.{i + 2}.relu"),
            Dropout(DROPOUT_KEEP, layer_rng(seed, f"{prefix}.{i + 3}.dropout"), f"{prefix}.{i + 3}.dropout"),
        ]
        width = h
    i = len(layers)
    layers.append(Dense(width, n_out, layer_rng(seed, f"{prefix}.{i}.dense"), f"{prefix}.{i}.dense", dtype))
    return layers


def _run(layers, x, mode):
    for layer in layers:
        x = layer.forward(x, mode)
    return x


def _backprop(layers, g):
    for layer in reversed(layers):
        g = layer.backward(g)
    return g


class BCnnModel:
    def __init__(self, preset, tree, trunk, branch_points, branches, head, input_shape):
        self.preset = preset
        self.tree = tree
        self.trunk = trunk
        self.branch_points = list(branch_points)
        self.branches = branches
        self.head = head
        self.input_shape = tuple(input_shape)
        if len(self.branch_points) != len(branches):
            raise ValueError("one branch point per branch is required")
        if self.branch_points != sorted(set(self.branch_points)):
            raise ValueError("branch points must be strictly increasing")
        if len(branches) + 1 != tree.K:
            raise ValueError(f"model has {len(branches) + 1} outputs but the tree has K={tree.K}")
        if trunk:
            trunk[0].needs_input_grad = False
        self.logits = None

    @property
    def K(self):
        return len(self.branches) + 1

    def layers(self):
        yield from self.trunk
        for b in self.branches:
            yield from b
        yield from self.head

    def named_parameters(self):
        for layer in self.layers():
            for key, value in layer.params.items():
                yield f"{layer.name}.{key}", layer, key

    def state_dict(self):
        state = {}
        for layer in self.layers():
            for store in (layer.params, layer.buffers):
                for key, value in store.items():
                    state[f"{layer.name}.{key}"] = value
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, value in own.items():
            if state[name].shape != value.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} vs model {value.shape}")
        for layer in self.layers():
            for store in (layer.params, layer.buffers):
                for key in store:
                    store[key] = np.array(state[f"{layer.name}.{key}"], dtype=store[key].dtype)
            layer.zero_grad()

    def astype(self, dtype):
        for layer in self.layers():
            layer.astype(dtype)
        return self

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()

    def forward(self, x, mode=Mode.EVAL):
        """Softmax outputs per level, coarsest first."""
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected input (batch, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        taps = {}
        for i, layer in enumerate(self.trunk):
            x = layer.forward(x, mode)
            taps[i] = x
        logits = [_run(b, taps[p], mode) for b, p in zip(self.branches, self.branch_points)]
        logits.append(_run(self.head, x, mode))
        self.logits = logits
        return [softmax(z) for z in logits]

    def backward(self, dlogits):
        """Backpropagate per-level logit gradients (``None`` skips a level).

        Parameter gradients are written into each layer's ``grads``; layers
        no gradient reaches are left at zero.
        """
        if len(dlogits) != self.K:
            raise ValueError(f"expected {self.K} gradients, got {len(dlogits)}")
        self.zero_grad()
        g = None if dlogits[-1] is None else _backprop(self.head, dlogits[-1])
        level_at = {p: k for k, p in enumerate(self.branch_points)}
        for i in range(len(self.trunk) - 1, -1, -1):
            k = level_at.get(i)
            if k is not None and dlogits[k] is not None:
                gb = _backprop(self.branches[k], dlogits[k])
                g = gb if g is None else g + gb
            if g is not None:
                g = self.trunk[i].backward(g)

    def exclusive_parameters(self, level):
        """Parameter names used only by the head of ``level`` (1-based)."""
        layers = self.branches[level - 1] if level < self.K else self.head
        return [f"{l.name}.{k}" for l in layers for k in l.params]


def _build(preset, tree, seed, width_divisor, dtype, with_branches):
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        preset = PRESETS[preset]
    if width_divisor < 1:
        raise ValueError("width divisor must be >= 1")
    if with_branches and tree.K != preset.levels:
        raise ValueError(f"preset {preset.name} needs a {preset.levels}-level tree, got K={tree.K}")

    trunk, points = [], []
    shape = preset.input_shape
    for token in preset.trunk:
        i = len(trunk)
        if isinstance(token, int):
            width = _divide(token, width_divisor)
            trunk += [
                Conv2D(shape[2], width, layer_rng(seed, f"trunk.{i}.conv2d"), f"trunk.{i}.conv2d", dtype),
                BatchNorm(width, name=f"trunk.{i + 1}.batchnorm", dtype=dtype),
                ReLU(f"trunk.{i + 2}.relu"),
            ]
            shape = (shape[0], shape[1], width)
        else:
            pool = MaxPool2(f"trunk.{i}.maxpool2")
            shape = pool.output_shape(shape)
            trunk.append(pool)
            if token.endswith("*"):
                points.append((i, int(np.prod(shape))))

    head = _fc_stack("head", int(np.prod(shape)),
                     [_divide(h, width_divisor) for h in preset.head], tree.fine_count, seed, dtype)
    branches, branch_points = [], []
    if with_branches:
        for k, ((pos, width), hidden) in enumerate(zip(points, preset.branches), start=1):
            branches.append(_fc_stack(f"branch{k}", width, [_divide(h, width_divisor) for h in hidden],
                                      tree.counts[k - 1], seed, dtype))
            branch_points.append(pos)
        out_tree = tree
    else:
        out_tree = tree.flat() if tree.K > 1 else tree
    return BCnnModel(preset, out_tree, trunk, branch_points, branches, head, preset.input_shape)


def build_preset(preset, tree, seed=0, width_divisor=1, dtype=np.float32):
    """B-CNN for ``preset`` ("A", "B" or "C") with heads sized from ``tree``.

    Initialization and dropout streams are keyed by layer name, so the trunk
    and fine head start identical to ``build_baseline`` with the same seed.
    """
    return _build(preset, tree, seed, width_divisor, dtype, with_branches=True)


def build_baseline(preset, fine_count, seed=0, width_divisor=1, dtype=np.float32):
    tree = fine_count if isinstance(fine_count, LabelTree) else LabelTree((int(fine_count),))
    return _build(preset, tree, seed, width_divisor, dtype, with_branches=False)


def param_count(model):
    return sum(layer.params[k].size for layer in model.layers() for k in layer.params)


# A bias feeding straight into a Train-mode batchnorm is cancelled by the
# mean subtraction, so its true gradient is exactly zero and the relative
# error is round-off over round-off.  Those tensors are checked on an
# absolute scale instead.
STRUCTURAL_ZERO_ATOL = 1e-8


def normalized_biases(model):
    """Names of bias tensors whose layer output goes straight into a batchnorm."""
    names = []
    for seq in [model.trunk, model.head, *model.branches]:
        for a, b in zip(seq, seq[1:]):
            if isinstance(b, BatchNorm) and "bias" in a.params:
                names.append(f"{a.name}.bias")
    return names


def grad_check_model(model, x, targets, weights, h=1e-5, max_entries=20, seed=0):
    """Worst relative error of the weighted multi-level loss gradient.

    Runs in double precision, Train mode, with dropout masks replayed.  At
    most ``max_entries`` randomly chosen entries are probed per tensor.
    Biases listed by ``normalized_biases`` must instead have analytic and
    numeric gradients within STRUCTURAL_ZERO_ATOL of zero; a violation is
    reported as an infinite error on that tensor.
    """
    model.astype(np.float64)
    x = np.array(x, dtype=np.float64)
    dropouts = [l for l in model.layers() if isinstance(l, Dropout)]
    states = [d.rng.bit_generator.state for d in dropouts]
    zero_grad = set(normalized_biases(model))

    def run():
        for d, s in zip(dropouts, states):
            d.rng.bit_generator.state = s
        return model.forward(x, Mode.TRAIN)

    def loss():
        return bcnn_loss_and_grads(run(), targets, weights)[0]

    _, _, dlogits = bcnn_loss_and_grads(run(), targets, weights)
    model.backward(dlogits)
    analytic = {name: layer.grads[key].copy() for name, layer, key in model.named_parameters()}

    pick = np.random.default_rng(seed)
    worst, worst_name = 0.0, None
    for name, layer, key in model.named_parameters():
        flat = layer.params[key].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = pick.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            num[j] = (lp - lm) / (2 * h)
        a = analytic[name].reshape(-1)[idx]
        if name in zero_grad:
            err = 0.0 if max(np.abs(a).max(), np.abs(num).max()) <= STRUCTURAL_ZERO_ATOL else float("inf")
        else:
            err = float(relative_error(a, num).max())
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name
