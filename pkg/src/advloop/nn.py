"""Small numpy network engine with hand-written reverse-mode gradients.

Two fixed architectures are supported:

* ``SmallCNN``: conv(1->8, 3x3) -> relu -> maxpool 2x2 -> conv(8->16, 3x3)
  -> relu -> maxpool 2x2 -> flatten(400) -> dense(400->10)
* ``MLP``: dense(784->hidden) -> relu -> dense(hidden->10)

All arithmetic is float64. Gradients are available with respect to both the
parameters (for training) and the input batch (for FGSM and PGD).
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputShapeError, ValidationError

log = logging.getLogger(__name__)

NUM_CLASSES = 10
IMAGE_SHAPE = (1, 28, 28)
IMAGE_SIZE = 28 * 28


class Architecture(str, Enum):
    SMALL_CNN = "SmallCNN"
    MLP = "MLP"


@dataclass
class Layer:
    kind: str  # "conv" or "dense"
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class Model:
    architecture: Architecture
    layers: list[Layer]

    @property
    def param_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in storage order ``[w0, b0, w1, b1, ...]``."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Model":
        layers = [
            Layer(l.kind, np.array(params[2 * i], dtype=np.float64),
                  np.array(params[2 * i + 1], dtype=np.float64))
            for i, l in enumerate(self.layers)
        ]
        return Model(self.architecture, layers)

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def copy(self) -> "Model":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.001
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "Adam"

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValidationError(f"epochs must be an integer >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValidationError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        if self.optimizer != "Adam":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class LossValue:
    mean_loss: float
    correct_count: int
    total_count: int


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    accuracy: float


# -- construction ---------------------------------------------------------


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_model(architecture: Architecture | str = Architecture.SMALL_CNN,
                seed: int = 0, hidden: int = 128) -> Model:
    """Create a freshly initialised model (He-uniform weights, zero biases)."""
    arch = Architecture(architecture)
    rng = np.random.default_rng(seed)
    if arch is Architecture.SMALL_CNN:
        specs = [("conv", (8, 1, 3, 3)), ("conv", (16, 8, 3, 3)), ("dense", (400, NUM_CLASSES))]
    else:
        if hidden < 1:
            raise ValidationError(f"hidden must be >= 1, got {hidden}")
        specs = [("dense", (IMAGE_SIZE, hidden)), ("dense", (hidden, NUM_CLASSES))]
    layers = []
    for kind, shape in specs:
        if kind == "conv":
            fan_in, n_out = shape[1] * shape[2] * shape[3], shape[0]
        else:
            fan_in, n_out = shape[0], shape[1]
        layers.append(Layer(kind, _he_uniform(rng, shape, fan_in), np.zeros(n_out)))
    return Model(arch, layers)


def zero_model(architecture: Architecture | str, hidden: int = 128) -> Model:
    model = build_model(architecture, seed=0, hidden=hidden)
    return model.with_parameters([np.zeros_like(p) for p in model.parameters()])


# -- primitive layers -----------------------------------------------------
# Activations inside the convolutional stack are channels-last (N, H, W, C);
# conv weights keep the conventional (F, C, kh, kw) layout.


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Valid stride-1 patches of an NHWC array as rows ordered (c, i, j)."""
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N,Ho,Wo,C,kh,kw
    n, ho, wo = windows.shape[:3]
    return windows.reshape(n * ho * wo, -1)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Valid, stride-1 cross-correlation of an NHWC batch. Returns (out, cols)."""
    n, h, wd, _ = x.shape
    f, _, kh, kw = w.shape
    cols = im2col(x, kh, kw)
    out = cols @ w.reshape(f, -1).T
    out += b
    return out.reshape(n, h - kh + 1, wd - kw + 1, f), cols


def conv2d_backward(dout, x_shape, cols, w, need_dx: bool):
    f, c, kh, kw = w.shape
    dmat = dout.reshape(-1, f)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    n, ho, wo = dout.shape[:3]
    # patch gradients laid out (c, i, j, n, ho, wo) so each scatter-add is contiguous
    dcols = (w.reshape(f, -1).T @ dmat.T).reshape(c, kh, kw, n, ho, wo)
    dx = np.zeros((c, n, x_shape[1], x_shape[2]))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + ho, j:j + wo] += dcols[:, i, j]
    return dx.transpose(1, 2, 3, 0), dw, db


def maxpool2x2(x: np.ndarray):
    """2x2/stride-2 max pooling over NHWC; odd trailing rows/cols are dropped.

    The routing masks send each window's gradient to its first maximum in
    (0,0), (0,1), (1,0), (1,1) order.
    """
    hh, ww = x.shape[1] // 2, x.shape[2] // 2
    quads = [x[:, di:2 * hh:2, dj:2 * ww:2, :] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for q in quads:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def maxpool2x2_backward(dout, x_shape, masks):
    hh, ww = dout.shape[1], dout.shape[2]
    dx = np.zeros(x_shape)
    k = 0
    for di in (0, 1):
        for dj in (0, 1):
            dx[:, di:2 * hh:2, dj:2 * ww:2, :] = dout * masks[k]
            k += 1
    return dx


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# -- forward / backward ---------------------------------------------------

_PLANS = {
    Architecture.SMALL_CNN: (("nhwc",), ("conv", 0), ("relu",), ("pool",), ("conv", 1),
                             ("relu",), ("pool",), ("flatten_nhwc",), ("dense", 2)),
    Architecture.MLP: (("flatten",), ("dense", 0), ("relu",), ("dense", 1)),
}


def _prepare_input(model: Model, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if model.architecture is Architecture.SMALL_CNN:
        if x.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
            raise InputShapeError(
                f"SmallCNN expects input of shape (N, 1, 28, 28), got {x.shape}")
    else:
        n_in = model.layers[0].weight.shape[0]
        ok = (x.ndim == 2 and x.shape[1] == n_in) or (
            n_in == IMAGE_SIZE and x.ndim == 4 and x.shape[1:] == IMAGE_SHAPE)
        if not ok:
            raise InputShapeError(
                f"MLP expects input of shape (N, {n_in}) or (N, 1, 28, 28), got {x.shape}")
    if x.shape[0] < 1:
        raise InputShapeError("batch must contain at least one sample")
    return x


def _forward_cached(model: Model, x: np.ndarray):
    cache = []
    h = x
    for op in _PLANS[model.architecture]:
        kind = op[0]
        if kind == "conv":
            layer = model.layers[op[1]]
            out, cols = conv2d(h, layer.weight, layer.bias)
            cache.append((h.shape, cols))
            h = out
        elif kind == "dense":
            layer = model.layers[op[1]]
            cache.append(h)
            h = h @ layer.weight + layer.bias
        elif kind == "relu":
            mask = h > 0
            cache.append(mask)
            h = h * mask
        elif kind == "pool":
            out, masks = maxpool2x2(h)
            cache.append((h.shape, masks))
            h = out
        elif kind == "nhwc":
            cache.append(h.shape)
            h = np.ascontiguousarray(h.transpose(0, 2, 3, 1))
        elif kind == "flatten_nhwc":
            # features are flattened in (C, H, W) order
            cache.append(h.shape)
            h = h.transpose(0, 3, 1, 2).reshape(h.shape[0], -1)
        elif kind == "flatten":
            cache.append(h.shape)
            h = h.reshape(h.shape[0], -1)
    return h, cache


def _backward(model: Model, cache, dlogits: np.ndarray, need_dx: bool):
    grads: list[np.ndarray | None] = [None] * (2 * len(model.layers))
    g = dlogits
    plan = _PLANS[model.architecture]
    for pos in range(len(plan) - 1, -1, -1):
        op, saved = plan[pos], cache[pos]
        kind = op[0]
        if kind == "conv":
            layer = model.layers[op[1]]
            x_shape, cols = saved
            g, dw, db = conv2d_backward(g, x_shape, cols, layer.weight,
                                        need_dx=need_dx or op[1] > 0)
            grads[2 * op[1]], grads[2 * op[1] + 1] = dw, db
        elif kind == "dense":
            layer = model.layers[op[1]]
            grads[2 * op[1]] = saved.T @ g
            grads[2 * op[1] + 1] = g.sum(axis=0)
            g = g @ layer.weight.T
        elif kind == "relu":
            g = g * saved
        elif kind == "pool":
            x_shape, masks = saved
            g = maxpool2x2_backward(g, x_shape, masks)
        elif kind == "nhwc":
            if g is not None:
                g = g.transpose(0, 3, 1, 2)
        elif kind == "flatten_nhwc":
            n, h, w, c = saved
            g = g.reshape(n, c, h, w).transpose(0, 2, 3, 1)
        elif kind == "flatten":
            g = g.reshape(saved)
    return g, grads


def forward(model: Model, batch) -> np.ndarray:
    """Return the ``N x 10`` logits of ``model`` on ``batch``."""
    x = _prepare_input(model, batch)
    logits, _ = _forward_cached(model, x)
    return logits


def _check_labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValidationError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (not np.issubdtype(y.dtype, np.integer)):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValidationError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= NUM_CLASSES):
        raise ValidationError(f"labels must lie in [0, {NUM_CLASSES - 1}]")
    return y.astype(np.int64)


def loss_and_grads(model: Model, batch, labels, need_input_grad: bool = True,
                   need_param_grads: bool = True):
    """Mean cross-entropy plus gradients w.r.t. the input and the parameters.

    Returns ``(LossValue, input_grad or None, param_grads or None)``; the
    parameter gradients follow :meth:`Model.parameters` order.
    """
    x = _prepare_input(model, batch)
    y = _check_labels(labels, x.shape[0])
    logits, cache = _forward_cached(model, x)
    logp = log_softmax(logits)
    n = x.shape[0]
    rows = np.arange(n)
    mean_loss = float(-logp[rows, y].mean())
    correct = int((logits.argmax(axis=1) == y).sum())
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= n
    dx, grads = _backward(model, cache, dlogits, need_dx=need_input_grad)
    loss = LossValue(max(mean_loss, 0.0), correct, n)
    if need_input_grad:
        dx = dx.reshape(x.shape)
    return loss, (dx if need_input_grad else None), (grads if need_param_grads else None)


def loss_and_input_grad(model: Model, batch, labels) -> tuple[LossValue, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``batch``.

    Parameter gradients are computed internally but never applied.
    """
    loss, dx, _ = loss_and_grads(model, batch, labels, need_input_grad=True,
                                 need_param_grads=False)
    return loss, dx


def predict(model: Model, images, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample. ``np.argmax`` breaks ties toward the lowest index."""
    images = np.asarray(images)
    preds = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        logits = forward(model, images[start:start + batch_size])
        preds[start:start + batch_size] = logits.argmax(axis=1)
    return preds


# -- optimisation ---------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p, dtype=np.float64) for p in params],
                   [np.zeros_like(p, dtype=np.float64) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise AssertionError("adam_step: params, grads and state differ in length")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise AssertionError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params.append(p - learning_rate * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


BatchTransform = Callable[[Model, np.ndarray, np.ndarray, np.ndarray, int], np.ndarray]


def fit(model: Model, images: np.ndarray, labels: np.ndarray, epochs: int,
        learning_rate: float, batch_size: int, seed: int,
        transform: BatchTransform | None = None,
        desc: str = "train") -> tuple[Model, list[EpochStats]]:
    """Adam mini-batch loop shared by baseline and adversarial training.

    ``transform(model, x, y, sample_indices, epoch)`` may replace each batch
    before the update; adversarial training passes its PGD generator here.
    Epoch ``e`` (0-based) shuffles with ``default_rng(seed + e)``.
    """
    n = images.shape[0]
    if n < 1:
        raise ValidationError("cannot train on an empty dataset")
    labels = _check_labels(labels, n)
    params = [p.copy() for p in model.parameters()]
    state = AdamState.zeros_like(params)
    current = model.with_parameters(params)
    history = []
    for epoch in range(epochs):
        order = np.random.default_rng(seed + epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = np.asarray(images[idx], dtype=np.float64)
            y = labels[idx]
            if transform is not None:
                x = transform(current, x, y, idx, epoch)
            loss, _, grads = loss_and_grads(current, x, y, need_input_grad=False)
            params, state = adam_step(params, grads, state, learning_rate)
            current = current.with_parameters(params)
            loss_sum += loss.mean_loss * loss.total_count
            correct += loss.correct_count
        stats = EpochStats(epoch + 1, loss_sum / n, correct / n)
        history.append(stats)
        log.info("%s epoch %d/%d loss=%.4f acc=%.4f", desc, stats.epoch, epochs,
                 stats.mean_loss, stats.accuracy)
    return current, history


def train(model: Model, data, cfg: TrainConfig) -> tuple[Model, list[EpochStats]]:
    """Train ``model`` on a labelled dataset; returns a new model and per-epoch stats."""
    if len(data.labels) == 0:
        raise ValidationError("cannot train on an empty dataset")
    return fit(model, data.images, data.labels, cfg.epochs, cfg.learning_rate,
               cfg.batch_size, cfg.seed)
