import numpy as np
import pytest

from carsplat.geom import Camera, RigidSim3, axis_angle_quat
from carsplat.raster import SplatSet
from carsplat.shading import EnvironmentMap, Material


def random_unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_material(rng, rmin=0.0):
    return Material(rng.uniform(0.0, 1.0, 3), rng.uniform(rmin, 1.0), rng.uniform(0.0, 1.0))


def smooth_env(rng, height=32):
    """Low-frequency, strictly positive radiance: a + b (d.u) + c (d.v)^2."""
    a = rng.uniform(0.5, 1.5, 3)
    b = rng.uniform(0.0, 0.8, 3) * a
    c = rng.uniform(0.0, 1.0, 3)
    u, v = random_unit(rng), random_unit(rng)

    def fn(d):
        return a + b * (d @ u)[..., None] + c * ((d @ v) ** 2)[..., None]

    return EnvironmentMap.from_function(fn, height)


def random_transform(rng, max_angle=np.pi, scale=(0.5, 2.0)):
    q = axis_angle_quat(random_unit(rng), rng.uniform(-max_angle, max_angle))
    return RigidSim3(q, rng.normal(size=3), rng.uniform(*scale))


def small_scene(rng, n=6, size=24):
    """A few splats in front of a camera at the origin looking down +z."""
    cam = Camera(size * 1.2, size * 1.2, size / 2, size / 2, size, size)
    mu = np.column_stack([rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n), rng.uniform(2.5, 4.0, n)])
    quat = rng.normal(size=(n, 4))
    quat[:, 0] = np.abs(quat[:, 0]) + 2.0  # mostly facing the camera
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    splats = SplatSet(mu, quat, rng.uniform(0.15, 0.4, (n, 2)), rng.uniform(-1.0, 2.0, n),
                      rng.uniform(0.1, 0.9, (n, 3)), rng.uniform(0.3, 0.9, n), rng.uniform(0.0, 1.0, n))
    return splats, cam


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one (number, passed, detail) record per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
