from __future__ import annotations

import sys
from contextlib import contextmanager
from functools import lru_cache
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tinymark.config import scan_config_dir  # noqa: E402
from tinymark.device_sim import load_profiles  # noqa: E402
from tinymark.orchestrator import suite_dir  # noqa: E402

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record a PASS/FAIL line for an acceptance criterion."""
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE[number] = (False, f"{title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        print(f"criterion {number}: FAIL  {title}")
        raise
    ACCEPTANCE[number] = (True, title)
    print(f"criterion {number}: PASS  {title}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}")


@lru_cache(maxsize=None)
def suite_models():
    scan = scan_config_dir(suite_dir())
    assert not scan.diagnostics
    return tuple(scan.models)


@pytest.fixture(scope="session")
def profiles():
    return load_profiles()


@pytest.fixture(scope="session")
def devices(profiles):
    return profiles[0]


@pytest.fixture(scope="session")
def backends(profiles):
    return profiles[1]


@pytest.fixture(scope="session")
def models():
    return suite_models()


SNIPPET = """\
model_type: "CNN"
convs_params: [
    [8, 3, 1],
    [0, 2, 2],
    [16, 3, 1],
    [0, 0, 0]
]
denses_params: [64, 16]
convs_dropout: 0.25
denses_dropout: 0.10
activation: "relu"
use_batch_norm: False
epochs: 50
batch_size: 32
dataset:
    name: "mnist"
    args:
        flat_features: False
random_seed: 42
"""
