import numpy as np
import pytest

from stimpute.network import CdcinConfig
from stimpute.st_data import ImageCorpus


def tiny_model_config(**overrides):
    base = dict(num_cascades=2, num_rdhab=1, channels=4, rdb_growth=4, rdb_layers=2,
                window_size=4, num_heads=1, cab_compress=2, cab_squeeze=4)
    base.update(overrides)
    return CdcinConfig(**base)


def smooth_image(rng, side):
    """Random smooth grayscale image in [0, 1]."""
    from scipy import ndimage

    img = ndimage.gaussian_filter(rng.random((side, side)), 3.0)
    img -= img.min()
    return img / img.max()


@pytest.fixture
def tiny_corpus():
    rng = np.random.default_rng(123)
    return ImageCorpus(tuple(smooth_image(rng, 40) for _ in range(3)), ("a", "b", "c"))
