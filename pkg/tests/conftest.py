import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from oracles import synthetic_mnist  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_like(tmp_path_factory):
    return synthetic_mnist(tmp_path_factory.mktemp("mnist_like"))


@pytest.fixture
def tiny_cfg(mnist_like, tmp_path):
    from shiftforge.config import ExperimentConfig

    return ExperimentConfig(
        architecture="mlp_mnist", mode="s3_shift", epochs=2, batch_size=64, lr=0.1,
        data_dir=str(mnist_like), verify_checksums=False, output_dir=str(tmp_path / "run"),
    )


def real_data_root():
    root = os.environ.get("SHIFTFORGE_DATA")
    return Path(root) if root else None


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it immediately."""
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def report(number, title, ok, detail):
        line = f"[acceptance {number:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
