import numpy as np
import pytest

from panfuse.dsp import INDEX_RECIPE_4, PRESETS, SensorProfile


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ge1():
    return PRESETS["ge1"]


@pytest.fixture
def small_profile():
    # 4-band ratio-4 sensor with modest kernels; keeps test images tiny
    return SensorProfile(
        name="toy",
        bands=4,
        ratio=4,
        gnyq_ms=(0.3, 0.3, 0.3, 0.3),
        gnyq_pan=0.17,
        index_recipe=INDEX_RECIPE_4,
    )


def random_dn(rng, bands, h, w, lo=50.0, hi=1500.0):
    """Random multiband plane in detector-count range, float32."""
    return rng.uniform(lo, hi, size=(bands, h, w)).astype(np.float32)
