import pytest

from cvmtrust.image import random_image
from cvmtrust.scenario import Deployment


@pytest.fixture
def deployment():
    dep = Deployment("local")
    dep.boot_host()
    yield dep
    dep.close()


@pytest.fixture
def image():
    return random_image(42, "A")
