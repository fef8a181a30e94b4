import os
from pathlib import Path

import pytest


@pytest.fixture(scope="session")
def data_dir():
    return Path(os.environ.get("BAYESCNN_DATA_DIR", "/root/data"))


@pytest.fixture(scope="session")
def mnist_dir(data_dir):
    root = data_dir / "mnist"
    if not (root / "train-images-idx3-ubyte").exists() and not (root / "train-images-idx3-ubyte.gz").exists():
        pytest.skip(f"MNIST files not present under {root}")
    return root


@pytest.fixture(scope="session")
def synthetic_mnist(tmp_path_factory):
    """Small IDX files in an ``mnist`` directory: 96 train and 40 test images.

    Each class draws a bright bar at a class-specific row, so the task is learnable.
    """
    import numpy as np

    from bayescnn.data import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC
    from helpers import write_idx

    root = tmp_path_factory.mktemp("data")
    (root / "mnist").mkdir()
    rng = np.random.default_rng(0)
    for split, n in (("train", 96), ("t10k", 40)):
        labels = np.arange(n) % 10
        images = rng.integers(0, 40, size=(n, 28, 28))
        for i, c in enumerate(labels):
            images[i, 2 + 2 * c : 4 + 2 * c, 4:24] = 255
        write_idx(root / "mnist" / f"{split}-images-idx3-ubyte", images, IDX_IMAGES_MAGIC)
        write_idx(root / "mnist" / f"{split}-labels-idx1-ubyte", labels, IDX_LABELS_MAGIC)
    return root


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if call.when == "setup" and call.excinfo is not None:
        _CRITERIA[number] = (title, "FAIL", _reason(call.excinfo))
    elif call.when == "call":
        if call.excinfo is None:
            _CRITERIA[number] = (title, "PASS", "")
        else:
            _CRITERIA[number] = (title, "FAIL", _reason(call.excinfo))


def _reason(excinfo):
    text = str(excinfo.value).strip().splitlines()
    return text[0][:160] if text else excinfo.typename


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, reason = _CRITERIA[number]
        line = f"criterion {number:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" ({reason})" if reason else ""))
