"""Layer primitives with hand-written forward and backward passes.

Activations are numpy arrays in NHWC layout (batch, height, width, channels)
for convolutional stages and (batch, features) for dense stages.  Every layer
keeps what its backward pass needs from the most recent Train-mode forward.
"""

import enum
import zlib

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when an input's shape is incompatible with a layer."""


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


def layer_rng(seed, key):
    """Independent generator for one named layer, stable across model variants."""
    return np.random.default_rng([int(seed), zlib.crc32(key.encode("utf-8"))])


def he_init(shape, fan_in, rng, dtype=np.float32):
    """Zero-mean normal draws with standard deviation sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Layer:
    """Base class.  Subclasses fill ``params`` and write matching ``grads``."""

    kind = "layer"

    def __init__(self, name=""):
        self.name = name
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.needs_input_grad = True

    def forward(self, x, mode=Mode.EVAL):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)
        self.zero_grad()
        return self

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def colsum(a):
    """Column sums of a 2-D array through a BLAS matrix-vector product."""
    return np.ones(a.shape[0], dtype=a.dtype) @ a


def im2col3(x):
    """Rows of 3x3 zero-padded neighbourhoods: (N*H*W, 9*C), ordered (dh, dw, c)."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    s_n, s_h, s_w, s_c = xp.strides
    # a (dw, c) run is contiguous in NHWC, so each window row is one 3*C slice
    win = as_strided(xp, shape=(n, h, w, 3, 3 * c), strides=(s_n, s_h, s_w, s_h, s_c), writeable=False)
    return win.reshape(n * h * w, 9 * c)


class Conv2D(Layer):
    """3x3 convolution, stride 1, zero padding 1 ("same" spatial size).

    Kernels are stored as (3, 3, in_channels, out_channels).  The input
    gradient is computed as a convolution of the upstream gradient with the
    flipped, channel-swapped kernels.
    """

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, rng=None, name="", dtype=np.float32):
        super().__init__(name)
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = 9 * in_channels
        self.params["weight"] = he_init((3, 3, in_channels, out_channels), fan_in, rng, dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()
        self._cols = None
        self._in_shape = None

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name or 'conv2d'}: expected {self.in_channels} input channels, got {c}")
        return (h, w, self.out_channels)

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
        n, h, w, _ = x.shape
        self.output_shape(x.shape[1:])
        cols = im2col3(x)
        out = cols @ self.params["weight"].reshape(-1, self.out_channels)
        out += self.params["bias"]
        if mode is Mode.TRAIN:
            self._cols = cols
            self._in_shape = x.shape
        return out.reshape(n, h, w, self.out_channels)

    def backward(self, dout):
        d2 = dout.reshape(-1, self.out_channels)
        self.grads["weight"] = (self._cols.T @ d2).reshape(self.params["weight"].shape)
        self.grads["bias"] = colsum(d2)
        self._cols = None
        if not self.needs_input_grad:
            return None
        n, h, w, c = self._in_shape
        flipped = self.params["weight"][::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, c)
        return (im2col3(dout) @ flipped).reshape(n, h, w, c)


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    The gradient goes to the first maximal element of each window in scan
    order (top-left, top-right, bottom-left, bottom-right).
    """

    kind = "maxpool2"

    def __init__(self, name=""):
        super().__init__(name)
        self._x = None
        self._out = None

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2 needs H, W >= 2, got {h}x{w}")
        return (h // 2, w // 2, c)

    @staticmethod
    def _corners(x):
        ho, wo = x.shape[1] // 2, x.shape[2] // 2
        x = x[:, :2 * ho, :2 * wo, :]
        return x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2 expects NHWC input, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        a, b, c, d = self._corners(x)
        out = np.maximum(np.maximum(a, b), np.maximum(c, d))
        if mode is Mode.TRAIN:
            self._x = x
            self._out = out
        return out

    def backward(self, dout):
        x, out = self._x, self._out
        self._x = self._out = None
        dx = np.zeros_like(x)
        taken = np.zeros(out.shape, dtype=bool)
        for corner, target in zip(self._corners(x), self._corners(dx)):
            hit = corner == out
            hit &= ~taken
            taken |= hit
            target[...] = np.where(hit, dout, np.zeros((), dtype=dout.dtype))
        return dx


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name=""):
        super().__init__(name)
        self._mask = None

    def forward(self, x, mode=Mode.EVAL):
        if mode is Mode.TRAIN:
            self._mask = x > 0
        return np.maximum(x, np.zeros((), dtype=x.dtype))

    def backward(self, dout):
        dx = dout * self._mask
        self._mask = None
        return dx


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name=""):
        super().__init__(name)
        self._in_shape = None

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, mode=Mode.EVAL):
        if mode is Mode.TRAIN:
            self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._in_shape)


class Dense(Layer):
    """Fully connected layer: ``out = x @ W + b`` with W of shape (n_in, n_out)."""

    kind = "dense"

    def __init__(self, n_in, n_out, rng=None, name="", dtype=np.float32):
        super().__init__(name)
        if n_in < 1 or n_out < 1:
            raise ValueError("dense widths must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in = n_in
        self.n_out = n_out
        self.params["weight"] = he_init((n_in, n_out), n_in, rng, dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)
        self.zero_grad()
        self._x = None

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ShapeError(f"{self.name or 'dense'}: expected width {self.n_in}, got {tuple(in_shape)}")
        return (self.n_out,)

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name or 'dense'}: expected (batch, {self.n_in}), got {x.shape}")
        if mode is Mode.TRAIN:
            self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] = self._x.T @ dout
        self.grads["bias"] = dout.sum(axis=0)
        self._x = None
        if not self.needs_input_grad:
            return None
        return dout @ self.params["weight"].T


class BatchNorm(Layer):
    """Per-feature batch normalization.

    Works on (batch, features) and on NHWC maps, where the channel axis is the
    feature axis and statistics pool over batch and spatial positions.
    Running statistics follow ``r = momentum * r + (1 - momentum) * batch``.
    """

    kind = "batchnorm"

    def __init__(self, num_features, eps=1e-5, momentum=0.9, name="", dtype=np.float32):
        super().__init__(name)
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(num_features, dtype=dtype)
        self.params["beta"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_var"] = np.ones(num_features, dtype=dtype)
        self.zero_grad()
        self._cache = None

    def output_shape(self, in_shape):
        if in_shape[-1] != self.num_features:
            raise ShapeError(f"{self.name or 'batchnorm'}: expected {self.num_features} features, got {in_shape[-1]}")
        return tuple(in_shape)

    def forward(self, x, mode=Mode.EVAL):
        self.output_shape(x.shape[1:])
        shape = x.shape
        x2 = x.reshape(-1, self.num_features)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if mode is Mode.TRAIN:
            if shape[0] < 2:
                raise ValueError("batchnorm in Train mode needs a batch of at least 2")
            m = x2.shape[0]
            mean = colsum(x2) / m
            xhat = x2 - mean
            var = colsum(np.square(xhat)) / m
            inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xhat *= inv_std
            mom = self.momentum
            self.buffers["running_mean"] = (mom * self.buffers["running_mean"] + (1 - mom) * mean).astype(x.dtype)
            self.buffers["running_var"] = (mom * self.buffers["running_var"] + (1 - mom) * var).astype(x.dtype)
            self._cache = (xhat, inv_std, shape)
            out = xhat * gamma
        else:
            inv_std = (1.0 / np.sqrt(self.buffers["running_var"] + self.eps)).astype(x.dtype)
            out = x2 - self.buffers["running_mean"]
            out *= inv_std * gamma
        out += beta
        return out.reshape(shape)

    def backward(self, dout):
        xhat, inv_std, shape = self._cache
        self._cache = None
        d2 = dout.reshape(-1, self.num_features)
        m = d2.shape[0]
        dbeta = colsum(d2)
        dgamma = colsum(d2 * xhat)
        self.grads["gamma"] = dgamma
        self.grads["beta"] = dbeta
        # dx = gamma * inv_std / m * (m * dout - sum(dout) - xhat * sum(dout * xhat))
        dx = xhat * (-dgamma / m)
        dx += d2
        dx -= dbeta / m
        dx *= self.params["gamma"] * inv_std
        return dx.reshape(shape)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1 / keep_rate in Train mode."""

    kind = "dropout"

    def __init__(self, keep_rate=0.5, rng=None, name=""):
        super().__init__(name)
        if not 0 < keep_rate <= 1:
            raise ValueError(f"keep_rate must be in (0, 1], got {keep_rate}")
        self.keep_rate = keep_rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x, mode=Mode.EVAL):
        if mode is not Mode.TRAIN or self.keep_rate == 1:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) < self.keep_rate
        self._mask = keep.astype(x.dtype) / x.dtype.type(self.keep_rate)
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        dx = dout * self._mask
        self._mask = None
        return dx


def softmax(logits):
    """Row-wise softmax with max subtraction."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax input contains non-finite values")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def relative_error(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _rng_state(layer):
    rng = getattr(layer, "rng", None)
    return None if rng is None else rng.bit_generator.state


def grad_check(layer, x, h=1e-5, mode=Mode.TRAIN, seed=0, max_entries=None):
    """Worst relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(layer(x) * R)`` for a fixed random R, which
    avoids the identically-zero input gradients a plain sum gives for
    normalizing layers.  Layers owning a generator are replayed from the same
    generator state on every evaluation so that masks stay fixed.
    Work in double precision.  ``max_entries`` caps how many entries per
    tensor are probed (chosen at random, seeded); None probes all of them.
    """
    x = np.array(x, dtype=np.float64)
    layer.astype(np.float64)
    pick = np.random.default_rng(seed + 1)
    state = _rng_state(layer)

    def run(inp):
        if state is not None:
            layer.rng.bit_generator.state = state
        return layer.forward(inp, mode)

    out = run(x)
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    def loss(inp):
        return float(np.sum(run(inp) * proj))

    run(x)
    layer.needs_input_grad = True
    dx = layer.backward(proj)
    analytic = {"input": dx}
    analytic.update({k: v.copy() for k, v in layer.grads.items()})
    targets = {"input": x}
    targets.update(layer.params)

    worst = 0.0
    for key, arr in targets.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = pick.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp = loss(x)
            flat[i] = old - h
            lm = loss(x)
            flat[i] = old
            num[j] = (lp - lm) / (2 * h)
        err = relative_error(analytic[key].reshape(-1)[idx], num)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
