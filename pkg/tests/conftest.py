from dataclasses import dataclass

import numpy as np
import pytest

from pbaslam import kernels
from pbaslam.geometry import SE3, CameraModel, se3_exp
from pbaslam.image import GrayImage
from pbaslam.photometric import AffineBrightness


@dataclass
class Frame:
    pose: SE3
    affine: AffineBrightness
    image: GrayImage


def multilinear_image(rng, w, h):
    """Image whose bilinear interpolant is exactly differentiable by central differences."""
    y, x = np.mgrid[0:h, 0:w].astype(float)
    c = rng.uniform(-1, 1, size=4)
    return GrayImage(128 + 30 * c[0] + 1.5 * c[1] * x + 1.5 * c[2] * y + 0.04 * c[3] * (x - w / 2) * (y - h / 2))


def random_small_pose(rng, trans=0.2, rot=0.05):
    return se3_exp(np.concatenate([rng.normal(scale=rot, size=3), rng.normal(scale=trans, size=3)]))


@pytest.fixture(params=kernels.BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def cam():
    return CameraModel(80.0, 80.0, 47.5, 35.5, 96, 72)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: criterion-level acceptance checks")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "SUMMARY", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
