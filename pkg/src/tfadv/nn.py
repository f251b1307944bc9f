"""Small numpy CNNs with manual backprop.

Images enter as (B, H, W, 3) arrays in [0, 1] and activations stay
channels-last throughout; convolutions are im2col matmuls. All parameters
of a model live in one flat float64 vector, and each layer reads its
weights through views into it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

N_CLASSES = 3
INPUT_SHAPE = (64, 64, 3)
WEIGHT_MAGIC = b"TFADV001"
_WHEADER = struct.Struct("<8sBQ")


# -- layers -------------------------------------------------------------------

class Layer:
    n_params = 0

    def out_shape(self, shape):
        return shape

    def param_shapes(self):
        return []


class Conv(Layer):
    def __init__(self, c_in, c_out, k, stride=1):
        if k % 2 == 0:
            raise ConfigError("odd kernel sizes only")
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.pad = k // 2

    def __repr__(self):
        return f"conv{self.k}x{self.k}/{self.stride}({self.c_in}->{self.c_out})"

    def param_shapes(self):
        return [(self.c_out, self.c_in, self.k, self.k), (self.c_out,)]

    def fan_in(self):
        return self.c_in * self.k * self.k

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.c_in:
            raise ConfigError(f"{self} got {c} input channels")
        return -(-h // self.stride), -(-w // self.stride), self.c_out

    @staticmethod
    def _cols(x, k, pad, s):
        # (B, H, W, C) -> (B, Ho, Wo, k*k*C), window-row-major then channel
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        ho, wo = -(-x.shape[1] // s), -(-x.shape[2] // s)
        win = win[:, : s * ho : s, : s * wo : s].transpose(0, 1, 2, 4, 5, 3)
        return win.reshape(x.shape[0], ho, wo, -1)

    def forward(self, x, params):
        w, b = params
        cols = self._cols(x, self.k, self.pad, self.stride)
        wmat = w.transpose(0, 2, 3, 1).reshape(self.c_out, -1)
        return cols @ wmat.T + b, (cols, x.shape)

    def param_grads(self, dout, cache):
        cols = cache[0]
        k = self.k
        d2 = dout.reshape(-1, self.c_out)
        dw = (d2.T @ cols.reshape(len(d2), -1)).reshape(self.c_out, k, k, self.c_in)
        return [dw.transpose(0, 3, 1, 2), d2.sum(axis=0)]

    def backward(self, dout, cache, params, want_params=True):
        w, _ = params
        cols, x_shape = cache
        k, p, s = self.k, self.pad, self.stride
        grads = self.param_grads(dout, cache) if want_params else None
        if s == 1:
            # transposed convolution == correlation with the flipped, channel-swapped kernel
            wf = w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(self.c_in, -1)
            return self._cols(dout, k, p, 1) @ wf.T, grads
        wmat = w.transpose(0, 2, 3, 1).reshape(self.c_out, -1)
        dcols = (dout @ wmat).reshape(dout.shape[:3] + (k, k, self.c_in))
        b, h, wd, c = x_shape
        ho, wo = dout.shape[1:3]
        dxp = np.zeros((b, h + 2 * p, wd + 2 * p, c))
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, i, j]
        return dxp[:, p : p + h, p : p + wd], grads


class ReLU(Layer):
    def __repr__(self):
        return "relu"

    def forward(self, x, params):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask, params, want_params=True):
        return dout * mask, []


class MaxPool(Layer):
    def __init__(self, size=2):
        self.size = size

    def __repr__(self):
        return f"maxpool{self.size}"

    def out_shape(self, shape):
        h, w, c = shape
        if h % self.size or w % self.size:
            raise ConfigError(f"{self} needs spatial dims divisible by {self.size}")
        return h // self.size, w // self.size, c

    def forward(self, x, params):
        b, h, w, c = x.shape
        s = self.size
        blocks = x.reshape(b, h // s, s, w // s, s, c).transpose(0, 1, 3, 5, 2, 4)
        blocks = blocks.reshape(b, h // s, w // s, c, s * s)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, dout, cache, params, want_params=True):
        arg, shape = cache
        b, h, w, c = shape
        s = self.size
        blocks = np.zeros(dout.shape + (s * s,))
        np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
        dx = blocks.reshape(b, h // s, w // s, c, s, s).transpose(0, 1, 4, 2, 5, 3)
        return dx.reshape(shape), []


class GlobalAvgPool(Layer):
    def __repr__(self):
        return "gap"

    def out_shape(self, shape):
        return (shape[2],)

    def forward(self, x, params):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dout, shape, params, want_params=True):
        return np.broadcast_to(dout[:, None, None, :] / (shape[1] * shape[2]), shape), []


class Flatten(Layer):
    def __repr__(self):
        return "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, params):
        return x.reshape(len(x), -1), x.shape

    def backward(self, dout, shape, params, want_params=True):
        return dout.reshape(shape), []


class Dense(Layer):
    def __init__(self, d_in, d_out):
        self.d_in, self.d_out = d_in, d_out

    def __repr__(self):
        return f"dense({self.d_in}->{self.d_out})"

    def param_shapes(self):
        return [(self.d_out, self.d_in), (self.d_out,)]

    def fan_in(self):
        return self.d_in

    def out_shape(self, shape):
        if shape != (self.d_in,):
            raise ConfigError(f"{self} got input shape {shape}")
        return (self.d_out,)

    def forward(self, x, params):
        w, b = params
        return x @ w.T + b, x

    def backward(self, dout, x, params, want_params=True):
        w, _ = params
        grads = [dout.T @ x, dout.sum(axis=0)] if want_params else None
        return dout @ w, grads


# -- architectures --------------------------------------------------------------

@dataclass(frozen=True)
class ArchDescriptor:
    id: str
    layers: tuple

    def __post_init__(self):
        shape = INPUT_SHAPE
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (N_CLASSES,):
            raise ConfigError(f"{self.id}: output shape {shape}, expected ({N_CLASSES},)")

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for layer in self.layers for s in layer.param_shapes())

    def describe(self) -> str:
        return " -> ".join(map(repr, self.layers))


def _tiny_a():
    return ArchDescriptor("tinyA", (
        Conv(3, 8, 3), ReLU(), MaxPool(2),
        Conv(8, 16, 3), ReLU(), MaxPool(2),
        Flatten(), Dense(16 * 16 * 16, N_CLASSES),
    ))


def _tiny_b():
    return ArchDescriptor("tinyB", (
        Conv(3, 8, 5, stride=2), ReLU(), MaxPool(2),
        Conv(8, 16, 5), ReLU(), MaxPool(2),
        Conv(16, 32, 5), ReLU(),
        GlobalAvgPool(), Dense(32, N_CLASSES),
    ))


def _tiny_c():
    return ArchDescriptor("tinyC", (
        Conv(3, 8, 7, stride=2), ReLU(), MaxPool(2),
        Flatten(), Dense(8 * 16 * 16, 32), ReLU(),
        Dense(32, N_CLASSES),
    ))


ARCH_IDS = ("tinyA", "tinyB", "tinyC")
_BUILDERS = {"tinyA": _tiny_a, "tinyB": _tiny_b, "tinyC": _tiny_c}


def get_arch(arch_id: str) -> ArchDescriptor:
    try:
        return _BUILDERS[arch_id]()
    except KeyError:
        raise ConfigError(f"unknown architecture {arch_id!r}; choose from {ARCH_IDS}") from None


# -- model ----------------------------------------------------------------------

@dataclass
class Model:
    arch: ArchDescriptor
    params: np.ndarray
    seed: int | None = None
    _views: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.arch.n_params,):
            raise ShapeError(f"{self.arch.id} needs {self.arch.n_params} params, got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("non-finite parameters")
        self._views = _split(self.params, self.arch)

    def copy(self) -> "Model":
        return Model(self.arch, self.params.copy(), self.seed)

    # forward / backward -------------------------------------------------------
    def _run(self, images):
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != INPUT_SHAPE:
            raise ShapeError(f"expected images of shape {INPUT_SHAPE}, got {x.shape[1:]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite pixels")
        caches = []
        for layer, p in zip(self.arch.layers, self._views):
            x, c = layer.forward(x, p)
            caches.append(c)
        return x, caches, single

    def _backprop(self, dlogits, caches, want_params):
        d = dlogits
        pgrads = []
        layers = list(zip(self.arch.layers, self._views, caches))
        for depth, (layer, p, c) in reversed(list(enumerate(layers))):
            if want_params and depth == 0 and isinstance(layer, Conv):
                # input gradient is not needed for a parameter update
                pgrads.append(layer.param_grads(d, c))
                d = None
                break
            d, g = layer.backward(d, c, p, want_params)
            if want_params and g:
                pgrads.append(g)
        dx = d
        if not want_params:
            return dx, None
        flat = [a.ravel() for g in reversed(pgrads) for a in g]
        return dx, np.concatenate(flat)

    def forward(self, images) -> np.ndarray:
        """Logits, (3,) for one image or (B, 3) for a batch."""
        logits, _, single = self._run(images)
        return logits[0] if single else logits

    def predict(self, images, batch: int = 256) -> np.ndarray:
        x = np.asarray(images)
        if x.ndim == 3:
            return int(np.argmax(self.forward(x)))
        return np.concatenate([np.argmax(self.forward(x[i:i + batch]), axis=1)
                               for i in range(0, len(x), batch)]) if len(x) else np.zeros(0, int)

    def loss_and_input_grad(self, images, labels) -> "LossGrad":
        """Per-sample cross-entropy and its gradient w.r.t. each input image."""
        logits, caches, single = self._run(images)
        labels = np.atleast_1d(np.asarray(labels))
        loss, dlogits = cross_entropy(logits, labels)
        dx, _ = self._backprop(dlogits, caches, want_params=False)
        if single:
            return LossGrad(float(loss[0]), dx[0], logits[0])
        return LossGrad(loss, dx, logits)

    def vjp(self, images):
        """Batch logits plus a function mapping d(loss)/d(logits) to d(loss)/d(images)."""
        logits, caches, _ = self._run(images)

        def backward(dlogits):
            return self._backprop(np.asarray(dlogits, dtype=np.float64), caches, False)[0]

        return logits, backward

    def loss_and_param_grad(self, images, labels):
        """Mean cross-entropy over the batch and its gradient w.r.t. ``params``."""
        logits, caches, _ = self._run(images)
        loss, dlogits = cross_entropy(logits, np.asarray(labels))
        n = len(logits)
        _, g = self._backprop(dlogits / n, caches, want_params=True)
        return float(loss.mean()), g, logits


def _split(flat, arch):
    views, off = [], 0
    for layer in arch.layers:
        ps = []
        for s in layer.param_shapes():
            size = int(np.prod(s))
            ps.append(flat[off:off + size].reshape(s))
            off += size
        views.append(ps)
    return views


def init_model(arch_id: str, seed: int = 0) -> Model:
    """He-uniform weights, zero biases."""
    arch = get_arch(arch_id)
    rng = np.random.default_rng(seed)
    chunks = []
    for layer in arch.layers:
        shapes = layer.param_shapes()
        if not shapes:
            continue
        limit = np.sqrt(6.0 / layer.fan_in())
        chunks.append(rng.uniform(-limit, limit, size=shapes[0]).ravel())
        chunks.append(np.zeros(int(np.prod(shapes[1]))))
    return Model(arch, np.concatenate(chunks), seed)


@dataclass
class LossGrad:
    loss: float | np.ndarray
    d_input: np.ndarray
    logits: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Per-sample loss and d(loss)/d(logits)."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels)
    if labels.shape != (len(logits),) or np.any((labels < 0) | (labels >= logits.shape[1])):
        raise ValueError(f"bad labels {labels!r}")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    d = np.exp(logp)
    d[rows, labels] -= 1
    return -logp[rows, labels], d


# -- training -------------------------------------------------------------------

@dataclass
class History:
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    loss: list = field(default_factory=list)


def accuracy(model: Model, images, labels) -> float:
    return float(np.mean(model.predict(images) == np.asarray(labels)))


def train(model: Model, images, labels, epochs: int = 20, lr: float = 0.01, batch: int = 32,
          seed: int = 0, test: tuple | None = None, log=None):
    """Minibatch SGD on cross-entropy. Returns ``(trained_model, history)``;
    the input model is left untouched."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty training set")
    if len(images) != len(labels):
        raise ShapeError("images and labels differ in length")
    m = model.copy()
    rng = np.random.default_rng(seed)
    hist = History()
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        losses = []
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            loss, g, _ = m.loss_and_param_grad(images[idx], labels[idx])
            m.params -= lr * g
            losses.append(loss * len(idx))
        if not np.all(np.isfinite(m.params)):
            raise FloatingPointError("training diverged")
        hist.loss.append(float(np.sum(losses) / len(images)))
        hist.train_acc.append(accuracy(m, images, labels))
        if test is not None:
            hist.test_acc.append(accuracy(m, *test))
        if log:
            log(epoch, hist)
    return m, hist


# -- serialization ----------------------------------------------------------------

def save(model: Model, path) -> None:
    header = _WHEADER.pack(WEIGHT_MAGIC, ARCH_IDS.index(model.arch.id), model.arch.n_params)
    Path(path).write_bytes(header + model.params.astype("<f4").tobytes())


def load(path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < _WHEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, arch_idx, count = _WHEADER.unpack_from(raw)
    if magic != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if arch_idx >= len(ARCH_IDS):
        raise FormatError(f"{path}: unknown arch id {arch_idx}")
    arch = get_arch(ARCH_IDS[arch_idx])
    if count != arch.n_params:
        raise FormatError(f"{path}: header says {count} params, {arch.id} has {arch.n_params}")
    body = raw[_WHEADER.size:]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {4 * count}")
    return Model(arch, np.frombuffer(body, dtype="<f4").astype(np.float64))
