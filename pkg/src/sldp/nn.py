"""Small numpy neural-network engine: layers, forward traces, backprop.

Tensors are plain float64 ``numpy.ndarray`` values laid out as
``(batch, channels, height, width)`` for images and ``(batch, features)``
after a :class:`Flatten`.  Parameters live on the layers; gradients are
returned from :func:`backward` rather than stored, so a model can be
shared read-only between a forward pass and an optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

Shape = tuple[int, ...]


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer or graph it is fed to."""


class TraceError(RuntimeError):
    """Raised when backward is given a missing or stale forward trace."""


def glorot_uniform(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Layer:
    """Base layer.  Subclasses implement shape inference, forward, backward."""

    kind = "Layer"

    def __init__(self, name: str | None = None):
        self.name = name or self.kind
        self.params: dict[str, np.ndarray] = {}

    def output_shape(self, input_shape: Shape) -> Shape:
        raise NotImplementedError

    def forward(self, x: np.ndarray):
        """Return ``(y, cache)``."""
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Return ``(dx, param_grads)``."""
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


class ReLU(Layer):
    kind = "ReLU"

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache, {}


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Dense(Layer):
    """Fully connected layer, ``y = x @ W.T + b`` with ``W`` of shape (out, in)."""

    kind = "Dense"

    def __init__(self, in_features: int, out_features: int, name: str | None = None):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "W": np.zeros((out_features, in_features), dtype=DTYPE),
            "b": np.zeros(out_features, dtype=DTYPE),
        }

    def init_params(self, rng):
        self.params["W"] = glorot_uniform(rng, self.params["W"].shape, self.in_features, self.out_features)
        self.params["b"] = np.zeros(self.out_features, dtype=DTYPE)

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"{self.name}: expected ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def forward(self, x):
        return x @ self.params["W"].T + self.params["b"], x

    def backward(self, dy, cache):
        x = cache
        grads = {"W": dy.T @ x, "b": dy.sum(axis=0)}
        return dy @ self.params["W"], grads


class Conv2D(Layer):
    """2-D cross-correlation with weights of shape (out, in, kh, kw)."""

    kind = "Conv2D"

    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride=1, padding=0,
                 name: str | None = None):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        kh, kw = self.kernel_size
        self.params = {
            "W": np.zeros((out_channels, in_channels, kh, kw), dtype=DTYPE),
            "b": np.zeros(out_channels, dtype=DTYPE),
        }

    def init_params(self, rng):
        kh, kw = self.kernel_size
        fan_in = self.in_channels * kh * kw
        fan_out = self.out_channels * kh * kw
        self.params["W"] = glorot_uniform(rng, self.params["W"].shape, fan_in, fan_out)
        self.params["b"] = np.zeros(self.out_channels, dtype=DTYPE)

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"{self.name}: expected ({self.in_channels}, H, W), got {tuple(input_shape)}")
        _, h, w = input_shape
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: kernel larger than padded input {tuple(input_shape)}")
        return (self.out_channels, oh, ow)

    def forward(self, x):
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
        # (N, C, OH, OW, kh, kw) view; no copy until tensordot
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        y = np.tensordot(win, self.params["W"], axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]
        return np.ascontiguousarray(y), (xp.shape, win)

    def backward(self, dy, cache):
        xp_shape, win = cache
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        W = self.params["W"]
        grads = {
            "W": np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3])),
            "b": dy.sum(axis=(0, 2, 3)),
        }
        n, _, oh, ow = dy.shape
        dxp = np.zeros(xp_shape, dtype=DTYPE)
        # col2im: (N, OH, OW, C, kh, kw) -> (N, C, OH, OW, kh, kw)
        cols = np.tensordot(dy, W, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += cols[..., i, j]
        h, w = xp_shape[2] - 2 * ph, xp_shape[3] - 2 * pw
        return dxp[:, :, ph:ph + h, pw:pw + w], grads


class ConvTranspose2D(Layer):
    """Transposed convolution, weights of shape (in, out, kh, kw).

    Output size per axis is ``(in - 1) * stride - 2 * padding + kernel``.
    """

    kind = "ConvTranspose2D"

    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride=1, padding=0,
                 name: str | None = None):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        kh, kw = self.kernel_size
        self.params = {
            "W": np.zeros((in_channels, out_channels, kh, kw), dtype=DTYPE),
            "b": np.zeros(out_channels, dtype=DTYPE),
        }

    def init_params(self, rng):
        kh, kw = self.kernel_size
        fan_in = self.in_channels * kh * kw
        fan_out = self.out_channels * kh * kw
        self.params["W"] = glorot_uniform(rng, self.params["W"].shape, fan_in, fan_out)
        self.params["b"] = np.zeros(self.out_channels, dtype=DTYPE)

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"{self.name}: expected ({self.in_channels}, H, W), got {tuple(input_shape)}")
        _, h, w = input_shape
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        oh = (h - 1) * sh - 2 * ph + kh
        ow = (w - 1) * sw - 2 * pw + kw
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: padding consumes the whole output for {tuple(input_shape)}")
        return (self.out_channels, oh, ow)

    def forward(self, x):
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        n, _, h, w = x.shape
        W = self.params["W"]
        full_h, full_w = (h - 1) * sh + kh, (w - 1) * sw + kw
        full = np.zeros((n, self.out_channels, full_h, full_w), dtype=DTYPE)
        # (N, H, W, Cout, kh, kw) -> (N, Cout, H, W, kh, kw)
        cols = np.tensordot(x, W, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        for i in range(kh):
            for j in range(kw):
                full[:, :, i:i + sh * h:sh, j:j + sw * w:sw] += cols[..., i, j]
        y = full[:, :, ph:full_h - ph, pw:full_w - pw] + self.params["b"][None, :, None, None]
        return np.ascontiguousarray(y), (x, (full_h, full_w))

    def backward(self, dy, cache):
        x, (full_h, full_w) = cache
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        n, _, h, w = x.shape
        dfull = np.zeros((n, self.out_channels, full_h, full_w), dtype=DTYPE)
        dfull[:, :, ph:full_h - ph, pw:full_w - pw] = dy
        win = sliding_window_view(dfull, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :h, :w]
        # win: (N, Cout, H, W, kh, kw)
        dx = np.tensordot(win, self.params["W"], axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        dW = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))  # (Cin, Cout, kh, kw)
        return np.ascontiguousarray(dx), {"W": dW, "b": dy.sum(axis=(0, 2, 3))}


class MaxPool2D(Layer):
    """Max pooling.  Ties go to the first maximal element in row-major window order."""

    kind = "MaxPool2D"

    def __init__(self, kernel_size=2, stride=None, name: str | None = None):
        super().__init__(name)
        self.kernel_size = _pair(kernel_size)
        self.stride = _pair(stride if stride is not None else kernel_size)

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"{self.name}: expected (C, H, W), got {tuple(input_shape)}")
        c, h, w = input_shape
        (kh, kw), (sh, sw) = self.kernel_size, self.stride
        oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: window larger than input {tuple(input_shape)}")
        return (c, oh, ow)

    def forward(self, x):
        (kh, kw), (sh, sw) = self.kernel_size, self.stride
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        n, c, oh, ow = win.shape[:4]
        flat = win.reshape(n, c, oh, ow, kh * kw)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, cache):
        x_shape, idx = cache
        (kh, kw), (sh, sw) = self.kernel_size, self.stride
        n, c, oh, ow = dy.shape
        dx = np.zeros(x_shape, dtype=DTYPE)
        if (kh, kw) == (sh, sw):
            # non-overlapping windows: scatter through a one-hot mask
            onehot = np.zeros((n, c, oh, ow, kh * kw), dtype=DTYPE)
            np.put_along_axis(onehot, idx[..., None], dy[..., None], axis=-1)
            blocks = onehot.reshape(n, c, oh, ow, kh, kw).transpose(0, 1, 2, 4, 3, 5)
            dx[:, :, :oh * kh, :ow * kw] = blocks.reshape(n, c, oh * kh, ow * kw)
            return dx, {}
        rows = np.arange(oh)[:, None] * sh + idx // kw
        cols = np.arange(ow)[None, :] * sw + idx % kw
        ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(dx, (ni[:, :, None, None], ci[:, :, None, None], rows, cols), dy)
        return dx, {}


@dataclass
class ForwardTrace:
    """Per-layer caches recorded by :func:`forward`, consumed by :func:`backward`."""

    model_id: int
    version: int
    input_shape: Shape
    output_shape: Shape
    caches: list = field(default_factory=list)

    def __len__(self):
        return len(self.caches)


class Sequential:
    """An ordered list of layers with shapes checked at construction.

    ``input_shape`` excludes the batch axis.  ``version`` increments on every
    parameter update so stale traces can be detected.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.version = 0
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, item):
        if isinstance(item, slice):
            start = item.start or 0
            return Sequential(self.layers[item], self.shapes[start])
        return self.layers[item]

    def init(self, rng: np.random.Generator) -> "Sequential":
        for layer in self.layers:
            layer.init_params(rng)
        self.version += 1
        return self

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for _, p in sorted(layer.params.items())]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for key, p in sorted(layer.params.items()):
                out.append((f"{i}.{layer.name}.{key}", p))
        return out

    def set_parameters(self, values: Sequence[np.ndarray]) -> None:
        values = list(values)
        slots = [(layer, key) for layer in self.layers for key in sorted(layer.params)]
        if len(values) != len(slots):
            raise ShapeError(f"expected {len(slots)} parameter tensors, got {len(values)}")
        for (layer, key), v in zip(slots, values):
            if v.shape != layer.params[key].shape:
                raise ShapeError(f"{layer.name}.{key}: shape {v.shape} != {layer.params[key].shape}")
            layer.params[key] = np.array(v, dtype=DTYPE, copy=True)
        self.version += 1

    def copy(self) -> "Sequential":
        import copy
        return copy.deepcopy(self)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


def forward(model: Sequential, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match model input {model.input_shape}")
    trace = ForwardTrace(id(model), model.version, x.shape, (), [])
    for layer in model.layers:
        x, cache = layer.forward(x)
        trace.caches.append(cache)
    trace.output_shape = x.shape
    return x, trace


def backward(model: Sequential, trace: ForwardTrace | None, output_grad: np.ndarray):
    """Backpropagate ``output_grad``; returns ``(input_grad, param_grads)``.

    ``param_grads`` is aligned with ``model.parameters()``.
    """
    if trace is None or len(trace) != len(model):
        raise TraceError("missing forward trace")
    if trace.model_id != id(model) or trace.version != model.version:
        raise TraceError("forward trace is stale: model changed since the forward pass")
    if output_grad.shape != trace.output_shape:
        raise ShapeError(f"output_grad shape {output_grad.shape} != forward output {trace.output_shape}")
    g = np.asarray(output_grad, dtype=DTYPE)
    per_layer = []
    for layer, cache in zip(reversed(model.layers), reversed(trace.caches)):
        g, grads = layer.backward(g, cache)
        per_layer.append([grads[k] for k in sorted(layer.params)])
    param_grads = [g_ for grads in reversed(per_layer) for g_ in grads]
    return g, param_grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} are not batch x classes / batch")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / n


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient with respect to ``pred``."""
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def grad_check(model: Sequential, x: np.ndarray, step: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(r * forward(model, x))`` for a fixed random
    projection ``r``.  Both parameter and input gradients are checked.
    """
    x = np.array(x, dtype=DTYPE, copy=True)
    out, trace = forward(model, x)
    r = np.random.default_rng(seed).standard_normal(out.shape)

    def objective():
        return float((forward(model, x)[0] * r).sum())

    dx, grads = backward(model, trace, r)
    worst = 0.0

    def rel(a, f):
        return abs(a - f) / max(abs(a), abs(f), 1e-12)

    for p, g in zip(model.parameters(), grads):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = objective()
            p[idx] = orig - step
            down = objective()
            p[idx] = orig
            worst = max(worst, rel(g[idx], (up - down) / (2 * step)))
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        up = objective()
        x[idx] = orig - step
        down = objective()
        x[idx] = orig
        worst = max(worst, rel(dx[idx], (up - down) / (2 * step)))
    return worst
