import numpy as np
import pytest
import torch

from ezsd.dataset import load_dataset, make_toy_dataset

BASE = ["red-square", "green-ellipse", "blue-triangle"]
NOVEL = ["yellow-circle", "magenta-rectangle"]

# acceptance id -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(root, 7, 12, 128, BASE + NOVEL, {"base": BASE, "novel": NOVEL})
    return root


@pytest.fixture(scope="session")
def toy(toy_dir):
    return load_dataset(toy_dir / "annotations.json", toy_dir / "split.json")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
