import numpy as np
import pytest

from illumest import LinearImage


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def make_image():
    """Factory for random linear images: make_image(rng, h, w, mask=...)."""

    def build(rng, h=24, w=32, lo=0.01, hi=1.0, mask=None):
        data = rng.uniform(lo, hi, size=(h, w, 3)).astype(np.float32)
        return LinearImage(data, mask)

    return build
