import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from muca import tensor as T  # noqa: E402
from muca.data import SceneSpec, generate  # noqa: E402


@pytest.fixture(autouse=True)
def fresh_tape():
    """Graphs a test builds without calling backward stay on the global tape."""
    T.TAPE.clear()
    yield


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """20 scenes at 64x64: 12 train (1 labelled), 4 val, 4 test."""
    root = tmp_path_factory.mktemp("tiny")
    return generate(SceneSpec(seed=3), 20, root, labeled_ratio=0.1)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
