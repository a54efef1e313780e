"""Datasets: IDX / CIFAR binary loaders, a synthetic generator, client partitioning.

Images are float64 in [0, 1] with layout (N, C, H, W).
"""

from __future__ import annotations

import gzip
import importlib.util
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.classes)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: header truncated")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise TruncatedFileError(f"{path}: {len(body)} payload bytes, header promises {need}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse an IDX image file (magic 0x803) and label file (magic 0x801)."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    imgs = images[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(imgs, labels.astype(np.int64), split, max(10, int(labels.max()) + 1) if labels.size else 10)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as IDX files."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_cifar_batch(path, split: str = "train") -> Dataset:
    """CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    raw = Path(path).read_bytes()
    if len(raw) % 3073:
        raise TruncatedFileError(f"{path}: size {len(raw)} is not a multiple of 3073")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
    return Dataset(rec[:, 1:].reshape(-1, 3, 32, 32) / 255.0, rec[:, 0].astype(np.int64), split)


def synthesize(classes: int = 10, per_class: int = 100, shape=(1, 28, 28), seed: int = 0,
               noise: float = 0.1) -> Dataset:
    """Class-conditional blob images: each class has its own pair of Gaussian bumps."""
    if classes < 1 or per_class < 1:
        raise ValueError("classes and per_class must be positive")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    protos = np.zeros((classes, c, h, w))
    for k in range(classes):
        for ch in range(c):
            for _ in range(2):
                cy, cx = rng.uniform(0.15, 0.85, 2) * (h - 1, w - 1)
                s = rng.uniform(0.1, 0.2) * max(h, w)
                protos[k, ch] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    protos = np.clip(protos, 0, 1)
    labels = np.repeat(np.arange(classes), per_class)
    images = protos[labels] + rng.normal(0, noise, (len(labels), c, h, w))
    order = rng.permutation(len(labels))
    return Dataset(np.clip(images[order], 0, 1), labels[order], "train", classes)


def stratified_split(ds: Dataset, sizes: tuple[int, ...], seed: int = 0) -> list[Dataset]:
    """Disjoint class-stratified subsets with the requested total sizes."""
    if sum(sizes) > len(ds):
        raise ValueError(f"requested {sum(sizes)} samples from a set of {len(ds)}")
    rng = np.random.default_rng(seed)
    per_class = [rng.permutation(np.flatnonzero(ds.labels == k)) for k in range(ds.classes)]
    frac = np.array([len(p) for p in per_class]) / len(ds)
    out, offset = [], np.zeros(ds.classes, dtype=int)
    for size in sizes:
        counts = np.floor(frac * size).astype(int)
        # hand out the rounding remainder to the largest fractional parts
        rem = size - counts.sum()
        counts[np.argsort(-(frac * size - counts), kind="stable")[:rem]] += 1
        idx = np.concatenate([p[o:o + n] for p, o, n in zip(per_class, offset, counts)])
        offset += counts
        out.append(ds.subset(np.sort(idx)))
    return out


def bundled_mnist() -> Dataset:
    """The 5,000-digit MNIST sample shipped inside the ``mlxtend`` wheel (500 per class)."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("mlxtend is not installed; pass IDX files or install mlxtend")
    path = Path(spec.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"
    raw = np.loadtxt(path, delimiter=",", dtype=np.uint8)
    return Dataset(raw[:, :-1].reshape(-1, 1, 28, 28) / 255.0, raw[:, -1].astype(np.int64))


def _find(directory: Path, stem: str):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    return None


def load_mnist(directory=None, train_size: int | None = 4000, test_size: int | None = 1000,
               seed: int = 0) -> tuple[Dataset, Dataset]:
    """MNIST train/test.  IDX files from ``directory`` (or $SLDP_MNIST_DIR) if present,
    else the bundled 5k sample split into stratified train/test subsets."""
    directory = directory or os.environ.get("SLDP_MNIST_DIR")
    if directory:
        d = Path(directory)
        files = [_find(d, s) for s in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                      "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
        if all(files):
            train = load_idx(files[0], files[1], "train")
            test = load_idx(files[2], files[3], "test")
            if train_size is not None:
                (train,) = stratified_split(train, (train_size,), seed)
            if test_size is not None:
                (test,) = stratified_split(test, (test_size,), seed + 1)
            return train, Dataset(test.images, test.labels, "test", test.classes)
    full = bundled_mnist()
    train_size = train_size if train_size is not None else 4000
    test_size = test_size if test_size is not None else len(full) - train_size
    train, test = stratified_split(full, (train_size, test_size), seed)
    return train, Dataset(test.images, test.labels, "test", test.classes)


def partition_iid(ds: Dataset, k: int, seed: int = 0) -> list[np.ndarray]:
    """Seeded random split into ``k`` disjoint index shards whose sizes differ by at most one."""
    if not 1 <= k <= len(ds):
        raise ValueError(f"cannot split {len(ds)} samples into {k} shards")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return [np.sort(s) for s in np.array_split(perm, k)]


def partition_noniid(ds: Dataset, k: int | None = None, major: float = 0.6, seed: int = 0) -> list[np.ndarray]:
    """Shard ``i`` gets ``major`` of class ``i``; the rest of each class is dealt evenly to the others."""
    k = ds.classes if k is None else k
    if k != ds.classes:
        raise ValueError(f"non-IID partitioning needs one client per class ({ds.classes}), got {k}")
    if not 1.0 / k - 1e-12 <= major <= 1.0:
        raise ValueError(f"major fraction {major} outside [1/{k}, 1]")
    rng = np.random.default_rng(seed)
    shards: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(k):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        if len(idx) == 0:
            raise ValueError(f"class {c} has no samples")
        n_major = int(round(major * len(idx)))
        shards[c].append(idx[:n_major])
        others = [i for i in range(k) if i != c]
        if others:
            # rotate who receives the remainder so no shard is favoured
            rest = np.array_split(idx[n_major:], len(others))
            shift = c % len(others)
            for j, part in enumerate(rest):
                shards[others[(j + shift) % len(others)]].append(part)
    return [np.sort(np.concatenate(s)) for s in shards]


@dataclass(frozen=True)
class PartitionPlan:
    """How a training set is split across ``k`` clients: ``"iid"`` or ``"noniid"``."""

    mode: str = "iid"
    k: int = 5
    seed: int = 0
    major: float = 0.6

    def __post_init__(self):
        if self.mode not in ("iid", "noniid"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("need at least one client")

    def apply(self, ds: Dataset) -> list[np.ndarray]:
        if self.mode == "iid":
            return partition_iid(ds, self.k, self.seed)
        return partition_noniid(ds, self.k, self.major, self.seed)
