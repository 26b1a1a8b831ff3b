"""Shared fixtures: the MNIST corpus used by the acceptance suite and its summary lines."""
import gzip
import importlib.util
import os
from pathlib import Path

import numpy as np
import pytest

from repulsive_replay.data import load_digits_dataset, load_idx_dataset, save_idx

ACCEPTANCE_LINES: list[str] = []

_IDX_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
              "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _find(directory: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).is_file():
            return directory / name
    return None


def _bundled_subset(tmp: Path):
    """Write the 5000-image MNIST sample shipped inside mlxtend as IDX files."""
    found = importlib.util.find_spec("mlxtend")
    if found is None or not found.submodule_search_locations:
        return None
    csv = Path(found.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"
    if not csv.is_file():
        return None
    with gzip.open(csv, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",")
    pixels, labels = table[:, :-1] / 255.0, table[:, -1].astype(np.int64)
    rng = np.random.default_rng(0)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test.append(idx[:100])
        train.append(idx[100:])
    paths = [tmp / n for n in _IDX_NAMES]
    for (ip, lp), idx in zip((paths[:2], paths[2:]), (train, test)):
        idx = np.sort(np.concatenate(idx))
        save_idx(ip, lp, pixels[idx], labels[idx], (28, 28))
    return paths


@pytest.fixture(scope="session")
def mnist(tmp_path_factory):
    """(dataset, description): full MNIST from $RR_MNIST_DIR, else the bundled sample, else digits."""
    env = os.environ.get("RR_MNIST_DIR")
    if env:
        paths = [_find(Path(env), n) for n in _IDX_NAMES]
        if all(paths):
            return load_idx_dataset(*paths), f"MNIST IDX files from {env}"
    paths = _bundled_subset(tmp_path_factory.mktemp("mnist"))
    if paths:
        return load_idx_dataset(*paths), "MNIST 5000-image sample (4000 train / 1000 test), via IDX"
    return load_digits_dataset(seed=0), "8x8 scikit-learn digits (MNIST unavailable)"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
