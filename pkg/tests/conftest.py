"""Shared fixtures: synthetic datasets and access to the real MNIST files."""

import gzip
import struct

import numpy as np
import pytest
import torch

from taskcomm.data import MNIST_FILES, load_mnist, resolve_data_root


def mnist_available() -> bool:
    directory = resolve_data_root(None) / "mnist"
    return all((directory / name).exists() for name in MNIST_FILES)


requires_mnist = pytest.mark.skipif(
    not mnist_available(),
    reason="MNIST files not present; run `taskcomm fetch-data mnist` and set TASKCOMM_DATA_ROOT",
)


@pytest.fixture(scope="session")
def mnist_splits():
    if not mnist_available():
        pytest.skip("MNIST files not present")
    return load_mnist()


def write_idx_images(path, images: np.ndarray) -> None:
    count, rows, cols = images.shape
    with gzip.open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, count, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    with gzip.open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


@pytest.fixture()
def synthetic_mnist_root(tmp_path):
    """A data root holding a tiny, valid MNIST-format dataset."""
    rng = np.random.default_rng(7)
    directory = tmp_path / "data" / "mnist"
    directory.mkdir(parents=True)
    train_images = rng.integers(0, 256, size=(64, 28, 28))
    train_labels = rng.integers(0, 10, size=64)
    test_images = rng.integers(0, 256, size=(32, 28, 28))
    test_labels = rng.integers(0, 10, size=32)
    write_idx_images(directory / MNIST_FILES[0], train_images)
    write_idx_labels(directory / MNIST_FILES[1], train_labels)
    write_idx_images(directory / MNIST_FILES[2], test_images)
    write_idx_labels(directory / MNIST_FILES[3], test_labels)
    return tmp_path / "data"


@pytest.fixture()
def tiny_config_kwargs():
    """Desk-scale training settings shared by the fast training tests."""
    return dict(
        task="mnist",
        variant="vfe",
        n_initial=16,
        beta=1e-3,
        psnr_db=20.0,
        batch_size=64,
        epochs=2,
        train_subset=256,
        eval_trials=2,
        seed=0,
    )


@pytest.fixture()
def toy_split():
    """A small synthetic classification split shaped like flattened MNIST."""
    g = torch.Generator().manual_seed(11)
    inputs = torch.rand(256, 784, generator=g)
    targets = torch.randint(0, 10, (256,), generator=g)
    from taskcomm.data import DataSplit

    return DataSplit(inputs, targets)
