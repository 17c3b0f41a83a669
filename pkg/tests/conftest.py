import contextlib

import numpy as np
import pytest

from boneage.data import build_synthetic_dataset
from boneage.transforms import AugmentParams, PreprocessSpec, TransformConfig

ACCEPTANCE_LINES = []


@contextlib.contextmanager
def criterion(number, description):
    """Record a PASS/FAIL line for an acceptance criterion."""
    try:
        yield
    except BaseException as exc:
        if isinstance(exc, pytest.skip.Exception):
            ACCEPTANCE_LINES.append(f"criterion {number}: SKIP  {description} ({exc})")
        else:
            ACCEPTANCE_LINES.append(f"criterion {number}: FAIL  {description} ({type(exc).__name__}: {exc})")
        raise
    ACCEPTANCE_LINES.append(f"criterion {number}: PASS  {description}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth16(tmp_path_factory):
    return build_synthetic_dataset(tmp_path_factory.mktemp("synth16"), 16, seed=7)


@pytest.fixture(scope="session")
def synth64(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth64")
    return root, build_synthetic_dataset(root, 64, seed=7)


@pytest.fixture
def tiny_transforms():
    return TransformConfig(PreprocessSpec(64, 64, "unit_interval"), AugmentParams())


@pytest.fixture
def tiny_eval_transforms():
    return TransformConfig(PreprocessSpec(64, 64, "unit_interval"), AugmentParams.identity())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
