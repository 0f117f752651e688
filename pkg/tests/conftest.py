import numpy as np
import pytest

from ccl.data import write_idx

# per-label split of the bundled MNIST sample: first 400 rows train, last 100 test
TRAIN_PER_LABEL = 400


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """MNIST digits written as IDX files (train uncompressed, test gzipped)."""
    mlx = pytest.importorskip("mlxtend.data")
    X, y = mlx.mnist_data()
    train = np.sort(np.concatenate([np.flatnonzero(y == c)[:TRAIN_PER_LABEL] for c in range(10)]))
    test = np.sort(np.concatenate([np.flatnonzero(y == c)[TRAIN_PER_LABEL:] for c in range(10)]))
    d = tmp_path_factory.mktemp("mnist")
    paths = {
        "train_images": d / "train-images-idx3-ubyte",
        "train_labels": d / "train-labels-idx1-ubyte",
        "test_images": d / "t10k-images-idx3-ubyte.gz",
        "test_labels": d / "t10k-labels-idx1-ubyte.gz",
    }
    write_idx(paths["train_images"], paths["train_labels"], X[train], y[train])
    write_idx(paths["test_images"], paths["test_labels"], X[test], y[test])
    return {"format": "idx", **{k: str(v) for k, v in paths.items()}}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
