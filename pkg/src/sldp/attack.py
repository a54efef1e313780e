"""Black-box model inversion: learn a decoder from (input, smashed) query pairs.

The attacker only sees the victim through an oracle ``x -> z`` that includes
whatever noise the victim adds, so the decoder is trained against noisy
smashed data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .dp import clamp01
from .metrics import SSIMParams, mse, psnr, ssim_batch
from .nn import Conv2D, ConvTranspose2D, Layer, MaxPool2D, ReLU, Sequential, ShapeError
from .optim import Adam
from .zoo import transposed_geometry

Oracle = Callable[[np.ndarray], np.ndarray]


@dataclass
class QuerySet:
    inputs: np.ndarray
    smashed: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.smashed):
            raise ValueError("inputs and smashed outputs are not aligned")

    def __len__(self):
        return len(self.inputs)


@dataclass
class InverseNet:
    model: Sequential
    history: list[float] = field(default_factory=list)

    @property
    def input_shape(self):
        return self.model.input_shape

    @property
    def output_shape(self):
        return self.model.output_shape


@dataclass
class AttackReport:
    reconstructions: np.ndarray
    ssim: np.ndarray
    mse: np.ndarray
    psnr: np.ndarray
    train_history: list[float]

    @property
    def dissimilarity(self) -> np.ndarray:
        return 1.0 - self.ssim

    @property
    def mean_ssim(self) -> float:
        return float(self.ssim.mean())

    @property
    def mean_mse(self) -> float:
        return float(self.mse.mean())

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    def summary(self) -> dict:
        return {"ssim": self.mean_ssim, "dissimilarity": 1.0 - self.mean_ssim,
                "mse": self.mean_mse, "psnr": self.mean_psnr}


def collect_pairs(oracle: Oracle, samples: np.ndarray, batch_size: int = 256) -> QuerySet:
    if len(samples) == 0:
        raise ValueError("need at least one attack sample")
    z = np.concatenate([oracle(samples[i:i + batch_size]) for i in range(0, len(samples), batch_size)])
    return QuerySet(np.asarray(samples, dtype=np.float64), z)


def _upsampler(cin: int, cout: int, in_hw, out_hw, name: str) -> Layer:
    kh, sh, ph = transposed_geometry(in_hw[0], out_hw[0])
    kw, sw, pw = transposed_geometry(in_hw[1], out_hw[1])
    return ConvTranspose2D(cin, cout, (kh, kw), (sh, sw), (ph, pw), name=name)


def mirror_decoder(client_layers: list[Layer], input_shape, smashed_shape) -> Sequential:
    """Decoder that walks the client layers backwards, one transposed conv per
    spatial layer, with ReLU in between.  An empty client gets one 3x3 layer."""
    probe = Sequential(list(client_layers), input_shape)
    shapes = probe.shapes
    if tuple(shapes[-1]) != tuple(smashed_shape):
        raise ShapeError(f"client output {shapes[-1]} != smashed shape {smashed_shape}")
    layers: list[Layer] = []
    for i in reversed(range(len(client_layers))):
        layer, s_in, s_out = client_layers[i], shapes[i], shapes[i + 1]
        name = f"Inv({len(layers) // 2 + 1})"
        if isinstance(layer, ReLU):
            continue
        if isinstance(layer, ConvTranspose2D):
            k, s = layer.kernel_size, layer.stride
            inv = Conv2D(s_out[0], s_in[0], k, s, layer.padding, name=name)
            if inv.output_shape(s_out) != tuple(s_in):
                raise ShapeError(f"cannot mirror {layer.name}")
        elif isinstance(layer, Conv2D):
            # the layer's own geometry is the exact transpose when the sizes divide evenly
            inv = ConvTranspose2D(s_out[0], s_in[0], layer.kernel_size, layer.stride, layer.padding, name=name)
            if inv.output_shape(s_out) != tuple(s_in):
                inv = _upsampler(s_out[0], s_in[0], s_out[1:], s_in[1:], name)
        elif isinstance(layer, MaxPool2D):
            inv = _upsampler(s_out[0], s_in[0], s_out[1:], s_in[1:], name)
        else:
            raise ShapeError(f"cannot mirror layer kind {layer.kind}")
        if layers:
            layers.append(ReLU(name=f"InvReLU({len(layers) // 2 + 1})"))
        layers.append(inv)
    if not layers:
        c = input_shape[0]
        layers = [ConvTranspose2D(c, c, 3, 1, 1, name="Inv(1)")]
    return Sequential(layers, smashed_shape)


def train_inverse(pairs: QuerySet, epochs: int = 30, lr: float = 1e-3, batch_size: int = 64,
                  seed: int = 0, decoder: Sequential | None = None,
                  client_layers: list[Layer] | None = None) -> InverseNet:
    """Fit a decoder ``z -> x`` by minimising mean squared reconstruction error with Adam."""
    if len(pairs) == 0:
        raise ValueError("empty query set")
    rng = np.random.default_rng(seed)
    if decoder is None:
        input_shape = pairs.inputs.shape[1:]
        decoder = mirror_decoder(client_layers or [], input_shape, pairs.smashed.shape[1:])
    decoder.init(rng)
    if decoder.input_shape != pairs.smashed.shape[1:] or decoder.output_shape != pairs.inputs.shape[1:]:
        raise ShapeError(f"decoder maps {decoder.input_shape}->{decoder.output_shape}, "
                         f"pairs are {pairs.smashed.shape[1:]}->{pairs.inputs.shape[1:]}")
    opt = Adam(decoder)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            out, trace = nn.forward(decoder, pairs.smashed[idx])
            loss, dout = nn.mse_loss(out, pairs.inputs[idx])
            _, grads = nn.backward(decoder, trace, dout)
            opt.step(grads, lr)
            total += loss * len(idx)
        history.append(total / len(pairs))
    return InverseNet(decoder, history)


def reconstruct(inv: InverseNet, z: np.ndarray, batch_size: int = 500) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1:] != inv.input_shape:
        raise ShapeError(f"smashed shape {z.shape[1:]} != decoder input {inv.input_shape}")
    out = [inv.model(z[i:i + batch_size]) for i in range(0, len(z), batch_size)]
    return clamp01(np.concatenate(out))


def run_attack(oracle: Oracle, query_images: np.ndarray, eval_images: np.ndarray,
               client_layers: list[Layer] | None = None, epochs: int = 30, lr: float = 1e-3,
               batch_size: int = 64, seed: int = 0, ssim_params: SSIMParams = SSIMParams()) -> AttackReport:
    """Train an inverse network on oracle queries, then score it on held-out images.

    ``client_layers`` only shapes the decoder (the attacker is assumed to know
    the architecture, not the weights).
    """
    pairs = collect_pairs(oracle, query_images)
    inv = train_inverse(pairs, epochs, lr, batch_size, seed, client_layers=client_layers)
    recon = reconstruct(inv, collect_pairs(oracle, eval_images).smashed)
    s = ssim_batch(eval_images, recon, ssim_params)
    m = np.array([mse(a, b) for a, b in zip(eval_images, recon)])
    p = np.array([psnr(a, b) for a, b in zip(eval_images, recon)])
    return AttackReport(recon, s, m, p, inv.history)


def write_pnm(path, image: np.ndarray) -> None:
    """Write a (H, W), (1, H, W) or (3, H, W) image in [0, 1] as binary PGM/PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    pixels = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    if pixels.ndim == 2:
        header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n"
    elif pixels.ndim == 3 and pixels.shape[0] == 3:
        pixels = pixels.transpose(1, 2, 0)
        header = f"P6\n{pixels.shape[1]} {pixels.shape[0]}\n255\n"
    else:
        raise ValueError(f"unsupported image shape {image.shape}")
    Path(path).write_bytes(header.encode("ascii") + np.ascontiguousarray(pixels).tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(raw[pos:], dtype=np.uint8)
    if magic == "P5":
        return data[: w * h].reshape(1, h, w) / maxval
    if magic == "P6":
        return data[: 3 * w * h].reshape(h, w, 3).transpose(2, 0, 1) / maxval
    raise ValueError(f"unsupported PNM magic {magic}")


def export_reconstructions(directory, originals: np.ndarray, recons: np.ndarray, count: int = 8) -> list[Path]:
    """Side-by-side original | reconstruction images, one file per sample."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    ext = "pgm" if originals.shape[1] == 1 else "ppm"
    for i in range(min(count, len(originals))):
        pair = np.concatenate([originals[i], recons[i]], axis=-1)
        p = directory / f"recon_{i:03d}.{ext}"
        write_pnm(p, pair)
        paths.append(p)
    return paths
