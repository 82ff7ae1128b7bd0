import os
from pathlib import Path

import pytest

MNIST_DIR = Path(os.environ.get("METANEURON_MNIST", "/root/data/mnist"))
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _find(name):
    for candidate in (MNIST_DIR / name, MNIST_DIR / f"{name}.gz"):
        if candidate.exists():
            return candidate
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    if not all(_find(n) for n in MNIST_FILES):
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set METANEURON_MNIST)")
    return MNIST_DIR


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")
