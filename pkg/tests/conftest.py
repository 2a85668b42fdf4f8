import os
from pathlib import Path

import numpy as np
import pytest

from tdnets.formats import make_rng
from tdnets.mnist import Dataset, load_mnist_idx, write_idx_images, write_idx_labels

DATA = Path(__file__).parent / "data"
POOL_TRAIN = 9000


@pytest.fixture(scope="session")
def mnist_10k() -> Dataset:
    """10,000 MNIST training digits (grouped by class), see tools/mnist10k_from_npm.py."""
    return load_mnist_idx(DATA / "mnist10k-images-idx3-ubyte.gz", DATA / "mnist10k-labels-idx1-ubyte.gz")


def pool_split(pool: Dataset) -> tuple[Dataset, Dataset]:
    """Seeded 9,000 / 1,000 train/test split of the 10k pool."""
    perm = make_rng(0).permutation(len(pool))
    pick = lambda idx: Dataset(pool.images[idx], pool.labels[idx])
    return pick(perm[:POOL_TRAIN]), pick(perm[POOL_TRAIN:])


@pytest.fixture(scope="session")
def mnist_idx_dir(tmp_path_factory, mnist_10k):
    """The 9,000 / 1,000 split written as IDX files under the canonical names."""
    d = tmp_path_factory.mktemp("mnist")
    train, test = pool_split(mnist_10k)
    for ds, stem in ((train, "train"), (test, "t10k")):
        write_idx_images(d / f"{stem}-images-idx3-ubyte", np.round(ds.images[:, 0] * 255).astype(np.uint8))
        write_idx_labels(d / f"{stem}-labels-idx1-ubyte", ds.labels)
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def full_mnist_dir():
    """Directory with the canonical 60k/10k IDX files, if the environment provides one."""
    d = os.environ.get("TDNETS_MNIST_DIR")
    return d if d and os.path.isdir(d) else None


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log() -> list[str]:
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
