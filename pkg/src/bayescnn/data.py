"""MNIST (IDX) and CIFAR binary readers, input adaptation, pixel noise and batching."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import ConsistencyError, ContractError, FormatError

IDX_IMAGES_MAGIC = 2051  # 0x00000803
IDX_LABELS_MAGIC = 2049  # 0x00000801

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_VARIANTS = {"cifar10": (1, 10), "cifar100": (2, 100)}  # label bytes, classes

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "cifar10": {
        "dir": "cifar-10-batches-bin",
        "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
        "test": ["test_batch.bin"],
    },
    "cifar100": {"dir": "cifar-100-binary", "train": ["train.bin"], "test": ["test.bin"]},
}


@dataclass
class Dataset:
    """Images (N, C, H, W) scaled to [0, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{self.name}: {len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConsistencyError(f"{self.name}: label outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n=0, start=0):
        """First ``n`` examples from ``start`` (``n == 0`` keeps everything)."""
        stop = len(self) if n == 0 else start + n
        return replace(self, images=self.images[start:stop], labels=self.labels[start:stop])


@dataclass(frozen=True)
class NoiseSpec:
    gamma: float
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractError(f"noise level must be nonnegative, got {self.gamma}")


@dataclass(frozen=True)
class BatchPlan:
    n: int
    batch_size: int = 128
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def M(self):
        """Minibatches per epoch."""
        return math.ceil(self.n / self.batch_size)


def _read_bytes(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(path, expected_magic, dims):
    raw = _read_bytes(path)
    header = 4 * (1 + dims)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic {magic:#010x}, expected {expected_magic:#010x}")
    if len(raw) < header:
        raise FormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    shape = struct.unpack(f">{dims}I", raw[4:header])
    count = int(np.prod(shape))
    if len(raw) - header < count:
        raise FormatError(
            f"{path}: truncated payload, header promises {count} bytes, found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(shape)


def parse_mnist(images_path, labels_path, name="mnist"):
    """Read an IDX image/label pair (optionally gzip-compressed) into a Dataset."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ConsistencyError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    pixels = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(pixels, labels.astype(np.int64), 10, name)


def parse_cifar(paths, variant="cifar10", name=None):
    """Read one or more CIFAR binary batch files.

    Records are ``label bytes + 3072 pixel bytes`` laid out as R, G and B planes.
    For CIFAR-100 the second (fine) label byte is used.
    """
    if variant not in CIFAR_VARIANTS:
        raise ContractError(f"unknown CIFAR variant {variant!r}")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    label_bytes, num_classes = CIFAR_VARIANTS[variant]
    record = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % record:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of the {record}-byte record")
        rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        lab = rows[:, label_bytes - 1].astype(np.int64)
        if len(lab) and lab.max() >= num_classes:
            raise ConsistencyError(f"{path}: label {lab.max()} >= {num_classes} classes")
        labels.append(lab)
        images.append(rows[:, label_bytes:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(images).astype(np.float64) / 255.0 if images else np.zeros((0, 3, 32, 32))
    lab = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    return Dataset(pixels, lab, num_classes, name or variant)


def load_dataset(name, data_dir, split="train"):
    """Locate and parse a standard dataset under ``data_dir``.

    MNIST files may sit in ``data_dir`` or ``data_dir/mnist``; CIFAR uses the
    directory names of the official binary archives.
    """
    data_dir = Path(data_dir)
    if name == "mnist":
        img, lab = MNIST_FILES[split]
        for root in (data_dir, data_dir / "mnist"):
            if (root / img).exists() or (root / (img + ".gz")).exists():
                return parse_mnist(root / img, root / lab, name=f"mnist-{split}")
        raise FileNotFoundError(f"MNIST {split} files not found under {data_dir}")
    if name in CIFAR_FILES:
        spec = CIFAR_FILES[name]
        for root in (data_dir / spec["dir"], data_dir):
            files = [root / f for f in spec[split]]
            if all(f.exists() for f in files):
                return parse_cifar(files, name, name=f"{name}-{split}")
        raise FileNotFoundError(f"{name} {split} files not found under {data_dir}")
    raise ContractError(f"unknown dataset {name!r}")


def to_bytes(image):
    """Inverse of the parsers' scaling: [0, 1] floats back to uint8 pixels."""
    return np.rint(np.asarray(image) * 255.0).astype(np.uint8).tobytes()


def adapt_input(ds, arch_input):
    """Pad 28x28 images to 32x32 and replicate grayscale to three channels if needed."""
    arch_input = tuple(arch_input)
    if arch_input not in ((1, 32, 32), (3, 32, 32)):
        raise ContractError(f"unsupported architecture input shape {arch_input}")
    images = ds.images
    c, h, w = images.shape[1:]
    if (h, w) == (28, 28):
        images = np.pad(images, ((0, 0), (0, 0), (2, 2), (2, 2)))
    elif (h, w) != (32, 32):
        raise ContractError(f"cannot adapt {images.shape[1:]} images to {arch_input}")
    if c != arch_input[0]:
        if c != 1:
            raise ContractError(f"cannot map {c}-channel images to {arch_input[0]} channels")
        images = np.repeat(images, arch_input[0], axis=1)
    if images is ds.images:
        return ds
    return replace(ds, images=images)


def add_noise(ds, spec):
    """Add ``gamma * z`` with z ~ N(0, 1) to every pixel; no clipping."""
    if spec.gamma == 0:
        return ds
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(ds.images.shape)
    return replace(ds, images=ds.images + spec.gamma * noise)


def batches(ds, plan, epoch=0):
    """Yield ``(images, labels, i)`` with batch index i running 1..M.

    The permutation depends only on ``plan.shuffle_seed + epoch``.
    """
    n = len(ds)
    if n == 0:
        return
    order = np.random.default_rng(plan.shuffle_seed + epoch).permutation(n)
    for i, start in enumerate(range(0, n, plan.batch_size), start=1):
        idx = order[start : start + plan.batch_size]
        yield ds.images[idx], ds.labels[idx], i
