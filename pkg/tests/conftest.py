import numpy as np
import pytest

from lipprox.data import write_idx
from lipprox.numerics import make_rng


def write_mnist_like(directory, n, seed=0, n_labels=None):
    """IDX image/label pair of ``n`` random 28x28 digits with learnable labels."""
    rng = make_rng(seed)
    y = rng.integers(0, 10, n).astype(np.uint8)
    img = rng.integers(0, 60, (n, 28, 28)).astype(np.uint8)
    for k in range(n):
        # class-dependent bright stripe so tiny nets can learn something
        img[k, 2 * y[k] + 4 : 2 * y[k] + 7, 4:24] = 255
    images, labels = directory / "images.idx", directory / "labels.idx"
    write_idx(images, img)
    write_idx(labels, y[:n_labels] if n_labels is not None else y)
    return images, labels


@pytest.fixture
def mnist_files(tmp_path):
    return write_mnist_like(tmp_path, 10)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record and print one ``PASS``/``FAIL criterion N`` line; returns ``ok``."""
    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        request.config.stash[_VERDICTS].append((n, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda t: t[0]):
            terminalreporter.write_line(line)
