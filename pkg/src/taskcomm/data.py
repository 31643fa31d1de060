"""Dataset loading and explicit acquisition.

Datasets are never downloaded implicitly: loaders raise with the exact
fetch command when files are missing. The data root is resolved from an
explicit argument, the ``TASKCOMM_DATA_ROOT`` environment variable, or
``./data``, in that order.
"""

from __future__ import annotations

import gzip
import logging
import os
import pickle
import struct
import tarfile
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "TASKCOMM_DATA_ROOT"
DEFAULT_DATA_ROOT = "data"

MNIST_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)
MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
CIFAR10_ARCHIVE = "cifar-10-python.tar.gz"
CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
CIFAR10_DIR = "cifar-10-batches-py"


@dataclass
class DataSplit:
    """One split of a dataset, fully materialized in memory."""

    inputs: torch.Tensor
    targets: torch.Tensor

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have matching first dimension")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, n: int) -> "DataSplit":
        """Deterministic prefix subset, for desk-scale runs."""
        return DataSplit(self.inputs[:n], self.targets[:n])


def resolve_data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path(DEFAULT_DATA_ROOT)


def load_task(task: str, root=None, device=None):
    """Load (train, test) splits for a task name."""
    if task == "mnist":
        return load_mnist(root)
    if task == "cifar10":
        return load_cifar10(root)
    if task == "tiny-imagenet":
        return load_tiny_imagenet(root)
    raise ValueError(f"unknown task {task!r}")


def load_mnist(root=None) -> tuple[DataSplit, DataSplit]:
    """MNIST as flattened float32 images in [0, 1] with int64 labels."""
    directory = resolve_data_root(root) / "mnist"
    missing = [name for name in MNIST_FILES if not (directory / name).exists()]
    if missing:
        raise FileNotFoundError(
            f"MNIST files missing under {directory} ({', '.join(missing)}); "
            f"run `taskcomm fetch-data mnist` or set {DATA_ROOT_ENV}"
        )
    train_images = _read_idx_images(directory / MNIST_FILES[0])
    train_labels = _read_idx_labels(directory / MNIST_FILES[1])
    test_images = _read_idx_images(directory / MNIST_FILES[2])
    test_labels = _read_idx_labels(directory / MNIST_FILES[3])
    train = DataSplit(
        torch.from_numpy(train_images.reshape(len(train_images), -1)),
        torch.from_numpy(train_labels),
    )
    test = DataSplit(
        torch.from_numpy(test_images.reshape(len(test_images), -1)),
        torch.from_numpy(test_labels),
    )
    return train, test


def load_cifar10(root=None) -> tuple[DataSplit, DataSplit]:
    """CIFAR-10 as float32 CHW images in [0, 1] with int64 labels."""
    directory = resolve_data_root(root) / CIFAR10_DIR
    if not directory.exists():
        raise FileNotFoundError(
            f"CIFAR-10 batches missing under {directory}; "
            f"run `taskcomm fetch-data cifar10` or set {DATA_ROOT_ENV}"
        )
    train_batches = [directory / f"data_batch_{i}" for i in range(1, 6)]
    train_x, train_y = _read_cifar_batches(train_batches)
    test_x, test_y = _read_cifar_batches([directory / "test_batch"])
    return (
        DataSplit(torch.from_numpy(train_x), torch.from_numpy(train_y)),
        DataSplit(torch.from_numpy(test_x), torch.from_numpy(test_y)),
    )


def load_tiny_imagenet(root=None) -> tuple[DataSplit, DataSplit]:
    """Tiny ImageNet from a prepared npz file (train/test tensors)."""
    path = resolve_data_root(root) / "tiny-imagenet.npz"
    if not path.exists():
        raise FileNotFoundError(
            f"Tiny ImageNet tensors missing at {path}; prepare an npz with "
            "train_inputs/train_targets/test_inputs/test_targets arrays "
            "(no automatic download is provided for this dataset)"
        )
    archive = np.load(path)
    return (
        DataSplit(
            torch.from_numpy(archive["train_inputs"].astype(np.float32)),
            torch.from_numpy(archive["train_targets"].astype(np.int64)),
        ),
        DataSplit(
            torch.from_numpy(archive["test_inputs"].astype(np.float32)),
            torch.from_numpy(archive["test_targets"].astype(np.int64)),
        ),
    )


def fetch(task: str, root=None, source: str | None = None) -> list[Path]:
    """Download a dataset into the data root; existing files are kept."""
    if task == "mnist":
        return _fetch_mnist(resolve_data_root(root) / "mnist", source)
    if task == "cifar10":
        return _fetch_cifar10(resolve_data_root(root), source)
    raise ValueError(f"no fetcher for task {task!r}")


def _fetch_mnist(directory: Path, source: str | None) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    bases = (source,) if source else MNIST_MIRRORS
    fetched = []
    for name in MNIST_FILES:
        target = directory / name
        if target.exists():
            logger.info("%s already present, skipping", target)
            continue
        _download_any(bases, name, target)
        fetched.append(target)
    return fetched


def _fetch_cifar10(root: Path, source: str | None) -> list[Path]:
    root.mkdir(parents=True, exist_ok=True)
    extracted = root / CIFAR10_DIR
    if extracted.exists():
        logger.info("%s already present, skipping", extracted)
        return []
    archive = root / CIFAR10_ARCHIVE
    if not archive.exists():
        url = source or CIFAR10_URL
        _download(url, archive)
    with tarfile.open(archive, "r:gz") as tar:
        tar.extractall(root)
    return [extracted]


def _download_any(bases, name: str, target: Path) -> None:
    last_error = None
    for base in bases:
        url = base if base.endswith(name) else base.rstrip("/") + "/" + name
        try:
            _download(url, target)
            return
        except (urllib.error.URLError, OSError) as exc:
            last_error = exc
            logger.warning("download failed from %s: %s", url, exc)
    raise RuntimeError(f"could not download {name} from any mirror: {last_error}")


def _download(url: str, target: Path) -> None:
    logger.info("downloading %s -> %s", url, target)
    tmp = target.with_suffix(target.suffix + ".part")
    with urllib.request.urlopen(url) as response, open(tmp, "wb") as out:
        while True:
            chunk = response.read(1 << 20)
            if not chunk:
                break
            out.write(chunk)
    os.replace(tmp, target)


def _read_idx_images(path: Path) -> np.ndarray:
    with gzip.open(path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != 2051:
            raise ValueError(f"{path} is not an idx image file (magic {magic})")
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != count * rows * cols:
        raise ValueError(f"{path} is truncated")
    images = data.reshape(count, rows, cols).astype(np.float32) / 255.0
    return images


def _read_idx_labels(path: Path) -> np.ndarray:
    with gzip.open(path, "rb") as f:
        magic, count = struct.unpack(">II", f.read(8))
        if magic != 2049:
            raise ValueError(f"{path} is not an idx label file (magic {magic})")
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != count:
        raise ValueError(f"{path} is truncated")
    return data.astype(np.int64)


def _read_cifar_batches(paths) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for path in paths:
        if not path.exists():
            raise FileNotFoundError(f"CIFAR-10 batch missing: {path}")
        with open(path, "rb") as f:
            batch = pickle.load(f, encoding="bytes")
        xs.append(batch[b"data"])
        ys.extend(batch[b"labels"])
    data = np.concatenate(xs).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return data, np.asarray(ys, dtype=np.int64)
