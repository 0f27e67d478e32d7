import numpy as np
import pytest

from splatsr.scene import CameraView, Scene, look_at, make_camera_ring, make_synthetic_scene


def small_camera(size=16, distance=3.0, azimuth=0.3, fov=50.0):
    center = distance * np.array([np.cos(azimuth), np.sin(azimuth), 0.2])
    f = (size / 2) / np.tan(np.deg2rad(fov) / 2)
    return CameraView(look_at(center), (f, f), ((size - 1) / 2, (size - 1) / 2), size, size)


def random_scene(seed, n=12, extent=0.6, sharp=False):
    s = make_synthetic_scene(seed, n, extent)
    if sharp:
        return s
    # broader splats keep finite differences away from the hard alpha gates
    return s.replace(log_scale=s.log_scales + np.log(2.5))


def single_splat(position=(0.0, 0.0, 0.0), log_scale=-3.0, opacity_logit=0.0, color_logit=(0.0, 0.0, 0.0)):
    return Scene(np.array([position], float), np.full((1, 3), log_scale), np.array([[1.0, 0, 0, 0]]),
                 np.array([opacity_logit], float), np.array([color_logit], float), 1.0)


@pytest.fixture
def cam16():
    return small_camera()


@pytest.fixture
def ring():
    return make_camera_ring(4, 3.0, 50.0, 16, 16)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
