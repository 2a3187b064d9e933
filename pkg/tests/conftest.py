import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny():
    """(config, scene, static trainer after its full schedule), shared."""
    from helpers import tiny_config
    from lipsplat.benchmark import generate_scene
    from lipsplat.training import StaticTrainer

    cfg = tiny_config()
    scene = generate_scene(cfg.scene, 0)
    st = StaticTrainer(scene, cfg)
    st.run()
    return cfg, scene, st


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
