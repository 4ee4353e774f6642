import numpy as np
import pytest

from dyntok.backbone import ModelConfig, forward, init_weights
from dyntok.tensor import F32


def smooth_image(h, w, seed=0):
    """Blobby test image: gradients plus a disc, light noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:h, :w] / max(h, w)
    img = np.stack([
        xx,
        ((yy - 0.45) ** 2 + (xx - 0.55) ** 2 < 0.06).astype(float),
        0.5 + 0.5 * np.sin(6 * yy) * np.cos(4 * xx),
    ])
    img += 0.05 * rng.random(img.shape)
    return np.clip(img, 0, 1).astype(F32)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig()


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return init_weights(tiny_config, 0)


@pytest.fixture(scope="session")
def toy_pyramid(tiny_config, tiny_weights):
    """64x64 forward pass: token counts (256, 64, 16, 4)."""
    return forward(smooth_image(64, 64), tiny_config, tiny_weights)


@pytest.fixture(scope="session")
def pyramid_224(tiny_config, tiny_weights):
    return forward(smooth_image(224, 224), tiny_config, tiny_weights)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
