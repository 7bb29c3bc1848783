import os

# single-threaded BLAS keeps float reductions in a fixed order
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from handsynth.networks import ArchConfig  # noqa: E402
from handsynth.toygen import make_dataset  # noqa: E402

# narrow networks for fast unit tests; same topology as the defaults
TINY_ARCH = dict(gen_channels=(16, 8, 8, 4), disc_channels=(8, 8, 16, 16), rec_channels=(16, 16, 16, 16),
                 backbone_channels=(4, 8, 8, 16), style_dim=64, content_dim=16, num_writers=8)


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(num_writers=8, words_per_writer=20, seed=3)


@pytest.fixture
def tiny_arch():
    return ArchConfig(**TINY_ARCH)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list = []


def report_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
