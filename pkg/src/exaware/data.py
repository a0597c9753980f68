"""MNIST IDX loading and seeded synthetic datasets."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

DATASET_CACHE_VERSION = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    name: str
    input_range: tuple[float, float] = (0.0, 1.0)
    labels: Optional[np.ndarray] = None
    n_classes: Optional[int] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-d array (samples x features)")
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.inputs):
                raise ValueError("labels and inputs differ in length")
        lo, hi = self.input_range
        if len(self.inputs) and (self.inputs.min() < lo or self.inputs.max() > hi):
            raise ValueError(f"inputs fall outside the declared range {self.input_range}")

    def __len__(self):
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.name, self.input_range,
                       None if self.labels is None else self.labels[idx], self.n_classes)

    def decode_scalar(self, y: np.ndarray) -> np.ndarray:
        """Map scalar outputs to the nearest class bucket k/(n_classes-1)."""
        if not self.n_classes or self.n_classes < 2:
            raise ValueError(f"dataset {self.name!r} does not define classes")
        k = self.n_classes - 1
        return np.clip(np.rint(np.asarray(y) * k), 0, k).astype(np.int64)

    def save(self, path) -> None:
        """Flat binary sidecar (numpy .npz) for fast reload."""
        np.savez(
            path,
            version=np.int64(DATASET_CACHE_VERSION),
            inputs=self.inputs,
            targets=self.targets,
            name=np.str_(self.name),
            input_range=np.array(self.input_range, dtype=np.float64),
            labels=self.labels if self.labels is not None else np.zeros(0, np.int64),
            has_labels=np.bool_(self.labels is not None),
            n_classes=np.int64(self.n_classes or 0),
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != DATASET_CACHE_VERSION:
                raise ValueError(f"{path}: unsupported dataset cache version {int(z['version'])}")
            return cls(
                z["inputs"], z["targets"], str(z["name"]),
                tuple(float(v) for v in z["input_range"]),
                z["labels"] if bool(z["has_labels"]) else None,
                int(z["n_classes"]) or None,
            )


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    zero, zero2, dtype_code, ndim = raw[0], raw[1], raw[2], raw[3]
    magic = struct.unpack(">I", raw[:4])[0]
    if zero != 0 or zero2 != 0 or dtype_code != 0x08 or magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_len])
    n = int(np.prod(dims)) if dims else 0
    payload = raw[header_len:]
    if len(payload) != n:
        raise IdxFormatError(
            f"{path}: payload has {len(payload)} bytes, header declares {n} ({'x'.join(map(str, dims))})"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_mnist(images_path, labels_path, limit: Optional[int] = None,
               target: str = "scalar") -> Dataset:
    """Load MNIST from IDX files with pixels scaled to [0, 1].

    ``target="scalar"`` gives single-output regression targets label/9 (decoded
    back by nearest bucket); ``target="onehot"`` gives 10-class one-hot rows.
    """
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if target == "scalar":
        t = (y / 9.0)[:, None]
        name = "mnist[label/9]"
    elif target == "onehot":
        t = np.eye(10)[y]
        name = "mnist[onehot]"
    else:
        raise ValueError(f"unknown MNIST target reduction {target!r}")
    return Dataset(x, t, name, (0.0, 1.0), y, 10)


def mnist_paths(mnist_dir, split: str = "train") -> tuple[Path, Path]:
    prefix = {"train": "train", "test": "t10k"}[split]
    d = Path(mnist_dir)
    return d / f"{prefix}-images-idx3-ubyte", d / f"{prefix}-labels-idx1-ubyte"


def make_random_dataset(n_samples: int, input_dim: int, seed: int,
                        output_dim: int = 1) -> Dataset:
    """Uniform inputs in [0,1]^d with uniform targets in [0,1]."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if input_dim < 1 or output_dim < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n_samples, input_dim))
    t = rng.uniform(0.0, 1.0, size=(n_samples, output_dim))
    return Dataset(x, t, f"random[n={n_samples},d={input_dim},seed={seed}]", (0.0, 1.0))
