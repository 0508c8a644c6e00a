"""Shared fixtures: tiny generator configs and small detectors for fast tests."""
from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from moc.synthgen import GeneratorConfig, SpriteClass, generate_dataset

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY_CLASSES = (
    SpriteClass(0, "disc", (230, 50, 50), 0.2, speed=(0.06, 0.09)),
    SpriteClass(1, "rectangle", (50, 230, 80), 0.15, aspect=1.5, speed=(0.06, 0.09)),
)


def tiny_config(**kw) -> GeneratorConfig:
    base = dict(height=32, width=32, n_train=4, n_test=2, classes=TINY_CLASSES, hud=(), tile=8)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_config(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
