"""Split architectures: LeNet-5 (two cut points), a width-scaled VGG-11, and upsampled heads.

A :class:`SplitModelSpec` is one full layer graph plus a cut index; the
client runs ``graph[:cut]`` and the server ``graph[cut:]``.  Noise is
injected at a named point on the client side: ``"Input"`` or the name of a
client layer such as ``"MaxP(1)"`` (noise goes right after that layer).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .nn import ConvTranspose2D, Conv2D, Dense, Flatten, Layer, MaxPool2D, ReLU, Sequential, ShapeError

INPUT = "Input"

MNIST_SHAPE = (1, 28, 28)
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class SplitModelSpec:
    graph: Sequential
    cut_index: int
    noise_point: str | None
    arch_name: str
    upsampled: bool = False

    def __post_init__(self):
        if not 0 < self.cut_index < len(self.graph):
            raise ValueError(f"cut_index {self.cut_index} must lie strictly inside 0..{len(self.graph)}")
        if self.noise_point is not None:
            self.noise_index  # validates the name

    @property
    def input_shape(self):
        return self.graph.input_shape

    @property
    def smashed_shape(self):
        return self.graph.shapes[self.cut_index]

    @property
    def client_layers(self) -> list[Layer]:
        return self.graph.layers[: self.cut_index]

    @property
    def server_layers(self) -> list[Layer]:
        return self.graph.layers[self.cut_index:]

    @property
    def noise_index(self) -> int | None:
        """Position within the client part where clamp+noise is applied (0 = on the input)."""
        if self.noise_point is None:
            return None
        if self.noise_point == INPUT:
            return 0
        for i, layer in enumerate(self.client_layers):
            if layer.name == self.noise_point:
                return i + 1
        raise ValueError(f"injection point {self.noise_point!r} is not a client-side layer of {self.arch_name}")

    def client_model(self) -> Sequential:
        """A fresh, independent copy of the client part."""
        return Sequential(copy.deepcopy(self.client_layers), self.input_shape)

    def server_model(self) -> Sequential:
        return Sequential(copy.deepcopy(self.server_layers), self.smashed_shape)

    def with_noise_point(self, point: str | None) -> "SplitModelSpec":
        return SplitModelSpec(self.graph, self.cut_index, point, self.arch_name, self.upsampled)


def _conv_group(idx: int, cin: int, cout: int, k: int, padding: int = 0, pool: bool = True) -> list[Layer]:
    layers = [Conv2D(cin, cout, k, padding=padding, name=f"Conv({idx})"), ReLU(name=f"ReLU({idx})")]
    if pool:
        layers.append(MaxPool2D(2, name=f"MaxP({idx})"))
    return layers


def build_lenet5(split: str = "split1", seed: int = 0, noise_point: str | None = "split") -> SplitModelSpec:
    """LeNet-5 with 5x5 valid convolutions (6 and 16 channels) and two dense layers.

    ``split`` is ``"split1"`` (cut after MaxP(1)) or ``"split2"`` (after MaxP(2)).
    ``noise_point="split"`` places noise on the split layer.
    """
    key = split.lower().replace("-", "")
    if key not in ("split1", "split2"):
        raise ValueError(f"unknown LeNet split {split!r}")
    layers = [
        *_conv_group(1, 1, 6, 5),
        *_conv_group(2, 6, 16, 5),
        Flatten(name="Flatten"),
        Dense(16 * 4 * 4, 120, name="Dense(1)"),
        ReLU(name="ReLU(3)"),
        Dense(120, 10, name="Dense(2)"),
    ]
    graph = Sequential(layers, MNIST_SHAPE).init(np.random.default_rng(seed))
    cut = 3 if key == "split1" else 6
    if noise_point == "split":
        noise_point = graph.layers[cut - 1].name
    return SplitModelSpec(graph, cut, noise_point, f"lenet5-{key}")


def build_vgg11_lite(width_scale: float = 1.0, seed: int = 0, noise_point: str | None = "split",
                     input_shape=CIFAR_SHAPE, classes: int = 10) -> SplitModelSpec:
    """VGG-11 style net with same-padded 3x3 convs, cut after the first pooling layer."""
    if not 0 < width_scale <= 1:
        raise ValueError("width_scale must lie in (0, 1]")

    def w(c):
        return max(1, int(round(c * width_scale)))

    cin = input_shape[0]
    c1, c2, c3, c4 = w(32), w(64), w(128), w(256)
    layers = [
        Conv2D(cin, c1, 3, padding=1, name="Conv(1)"), ReLU(name="ReLU(1)"),
        Conv2D(c1, c1, 3, padding=1, name="Conv(2)"), ReLU(name="ReLU(2)"),
        MaxPool2D(2, name="MaxP(1)"),
        *_conv_group(3, c1, c2, 3, padding=1, pool=False), *_conv_group(4, c2, c2, 3, padding=1, pool=False),
        MaxPool2D(2, name="MaxP(2)"),
        *_conv_group(5, c2, c3, 3, padding=1, pool=False), *_conv_group(6, c3, c3, 3, padding=1, pool=False),
        MaxPool2D(2, name="MaxP(3)"),
        *_conv_group(7, c3, c4, 3, padding=1, pool=False), *_conv_group(8, c4, c4, 3, padding=1, pool=False),
        MaxPool2D(2, name="MaxP(4)"),
        Flatten(name="Flatten"),
    ]
    probe = Sequential(layers, input_shape)
    layers += [Dense(probe.output_shape[0], 128, name="Dense(1)"), ReLU(name="ReLU(9)"),
               Dense(128, classes, name="Dense(2)")]
    graph = Sequential(layers, input_shape).init(np.random.default_rng(seed))
    cut = 5
    if noise_point == "split":
        noise_point = "MaxP(1)"
    return SplitModelSpec(graph, cut, noise_point, "vgg11-lite")


def transposed_geometry(in_size: int, out_size: int) -> tuple[int, int, int]:
    """(kernel, stride, padding) of a transposed conv mapping ``in_size`` to ``out_size``.

    Prefers kernel 4 / stride 2 / padding 1 when it fits; otherwise the largest
    stride whose kernel is at least the stride (no gaps), with minimal padding.
    """
    if (in_size - 1) * 2 - 2 + 4 == out_size:
        return 4, 2, 1
    for stride in range(max(1, -(-out_size // max(in_size, 1))), 0, -1):
        for padding in range(0, 3):
            kernel = out_size - (in_size - 1) * stride + 2 * padding
            if stride <= kernel <= 2 * stride + 2:
                return kernel, stride, padding
    raise ShapeError(f"no transposed-conv geometry maps {in_size} to {out_size}")


def build_upsampled_client(base: SplitModelSpec, seed: int = 0) -> SplitModelSpec:
    """Append a transposed conv to the client so it emits an input-sized tensor.

    The server then runs the full base graph.  Noise stays on the base split
    layer, ahead of the transposed conv.
    """
    cin, h, w = base.smashed_shape
    cout, H, W = base.input_shape
    kh, sh, ph = transposed_geometry(h, H)
    kw, sw, pw = transposed_geometry(w, W)
    up = ConvTranspose2D(cin, cout, (kh, kw), stride=(sh, sw), padding=(ph, pw), name="ConvT(1)")
    up.init_params(np.random.default_rng([seed, 7]))
    client = copy.deepcopy(base.client_layers)
    server = copy.deepcopy(base.graph.layers)
    graph = Sequential([*client, up, *server], base.input_shape)
    if graph.shapes[len(client) + 1] != tuple(base.input_shape):
        raise ShapeError("upsampled head does not reproduce the input shape")
    point = base.noise_point if base.noise_point is not None else base.client_layers[-1].name
    return SplitModelSpec(graph, len(client) + 1, point, base.arch_name + "-upsampled", upsampled=True)


def injection_points(spec: SplitModelSpec) -> list[str]:
    return [INPUT, *(layer.name for layer in spec.client_layers)]


PRESETS = ("lenet5-split1", "lenet5-split2", "vgg11-lite")


def build_preset(name: str, upsampled: bool = False, width_scale: float = 0.25, seed: int = 0,
                 noise_point: str | None = "split", input_shape=None) -> SplitModelSpec:
    if name == "lenet5-split1":
        spec = build_lenet5("split1", seed, noise_point)
    elif name == "lenet5-split2":
        spec = build_lenet5("split2", seed, noise_point)
    elif name == "vgg11-lite":
        spec = build_vgg11_lite(width_scale, seed, noise_point, input_shape=input_shape or CIFAR_SHAPE)
    else:
        raise ValueError(f"unknown architecture preset {name!r}; choose from {PRESETS}")
    if upsampled:
        spec = build_upsampled_client(spec, seed)
    return spec
