import numpy as np
import pytest

from ffint8.data import write_idx_images, write_idx_labels


@pytest.fixture(scope="session")
def mini_mnist_root(tmp_path_factory):
    """A tiny MNIST-shaped directory: 120 train / 40 test random images."""
    root = tmp_path_factory.mktemp("mini_mnist")
    gen = np.random.default_rng(0)

    def write(n, prefix):
        imgs = gen.integers(0, 256, (n, 28, 28), dtype=np.uint8)
        labels = (np.arange(n) % 10).astype(np.uint8)
        write_idx_images(root / f"{prefix}-images-idx3-ubyte", imgs)
        write_idx_labels(root / f"{prefix}-labels-idx1-ubyte", labels)

    write(120, "train")
    write(40, "t10k")
    return root
