from __future__ import annotations

import numpy as np
import pytest

from xsyn.backends.mock import ScriptedMockBackend
from xsyn.fixtures import Scene, Shape, render_scene


@pytest.fixture(scope="session")
def mock_backend() -> ScriptedMockBackend:
    return ScriptedMockBackend(downscale=8, timesteps=1000)


@pytest.fixture()
def small_scene() -> tuple[Scene, np.ndarray]:
    scene = Scene(
        "unit",
        64,
        64,
        background_level=4,
        shapes=[
            Shape("rect", (6.0, 6.0, 58.0, 58.0), 8),
            Shape("rect", (10.0, 10.0, 22.0, 22.0), 16, "Knife"),
            Shape("rect", (30.0, 32.0, 44.0, 46.0), 24, "Gun"),
            Shape("rect", (36.0, 10.0, 50.0, 24.0), 48),
        ],
    )
    return scene, render_scene(scene)
