from __future__ import annotations

import functools

import numpy as np
import pytest

from ringloc.core import CameraIntrinsics
from ringloc.simulate import NoiseModel, SceneConfig, render


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def k600():
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


@functools.lru_cache(maxsize=None)
def cached_render(distance=400.0, tilt=0.0, noisy=True, seed=0, surface_radius=None):
    """Renders are deterministic in their config, so share them across tests."""
    noise = NoiseModel() if noisy else NoiseModel.noiseless()
    return render(SceneConfig(distance=distance, tilt=tilt, noise=noise, seed=seed, surface_radius=surface_radius))


# acceptance criteria report their verdicts here; printed once at the end of the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(ACCEPTANCE[key])
