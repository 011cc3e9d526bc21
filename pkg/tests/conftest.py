import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from coda4dgs.gaussians import Camera, GaussianScene
from coda4dgs.synthetic import ObjectSpec, SceneSpec, bundled_spec, generate_dataset

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_scene(rng, n=20, F=4, depth=(3.0, 5.0), spread=1.0):
    pos = np.c_[rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                rng.uniform(*depth, n)]
    return GaussianScene(pos, rng.uniform(-1.8, -0.9, (n, 3)), rng.standard_normal((n, 4)),
                         rng.uniform(-1.0, 2.0, (n, 1)), rng.standard_normal((n, 48)) * 0.3,
                         rng.standard_normal((n, F)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return Camera.look_at([0.1, -0.1, 0.0], [0.0, 0.0, 4.0], 24, 20, 22.0)


def tiny_spec(**kw) -> SceneSpec:
    """Small two-object scene for quick end-to-end tests."""
    base = dict(frames=12, width=24, height=24, focal=28.0, seed=9, feature_dim=8,
                background_blobs=60,
                objects=[ObjectSpec(12, np.array([-1.0, 0.6, 1.5]), np.array([1.5, 0, 0]),
                                    color=np.array([0.9, 0.2, 0.2]), extent=0.45),
                         ObjectSpec(10, np.array([0.9, 0.7, 1.0]), np.array([-0.8, 0, 0]),
                                    color=np.array([0.2, 0.3, 0.9]), extent=0.4,
                                    t_in=0.3)])
    base.update(kw)
    return SceneSpec(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_spec())


@pytest.fixture(scope="session")
def emergent_dataset():
    return generate_dataset(bundled_spec("emergent"))


@pytest.fixture(scope="session")
def static_dataset():
    return generate_dataset(bundled_spec("static"), "reconstruction")


# one line per acceptance criterion, printed at the end of the run
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
