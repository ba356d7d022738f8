import numpy as np
import pytest

from roistereo.geometry import Intrinsics4, RigidTransform
from roistereo.scenesim import ScenarioConfig, generate_scenario


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng: np.random.Generator, scale: float = 5.0) -> RigidTransform:
    return RigidTransform.from_rt(random_rotation(rng), rng.uniform(-scale, scale, 3))


def random_intrinsics(rng: np.random.Generator) -> Intrinsics4:
    return Intrinsics4(*rng.uniform(200, 1500, 2), *rng.uniform(100, 900, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_frames():
    return generate_scenario(ScenarioConfig())


@pytest.fixture(scope="session")
def small_config():
    return ScenarioConfig(num_objects=6, num_frames=6, spawn_x=(-20.0, 40.0), write_features=False)


@pytest.fixture(scope="session")
def small_frames(small_config):
    return generate_scenario(small_config)


@pytest.fixture(scope="session")
def occlusion_frames():
    return generate_scenario(ScenarioConfig(occlusion_rate=0.1, write_features=False))


@pytest.fixture(scope="session")
def occlusion_calibration(occlusion_frames):
    from roistereo.pipeline import RunConfig, calibrate_from_frames

    return calibrate_from_frames(occlusion_frames, RunConfig())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
