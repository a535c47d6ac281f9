import numpy as np
import pytest
import torch

from selpda.data import PartialTaskSpec, ShiftParams, generate_synthetic_task
from selpda.networks import BackboneSpec, NetworkBundle, NetworkConfig

TINY = NetworkConfig(
    n_classes=6,
    image_shape=(3, 8, 8),
    content_dim=8,
    style_dim=4,
    decoder_width=4,
    discriminator_width=8,
    backbone=BackboneSpec(feature_dim=8, conv_widths=(2, 2, 2)),
)


def make_tiny_bundle(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return NetworkBundle(TINY).to(dtype)


@pytest.fixture
def tiny_bundle():
    return make_tiny_bundle()


@pytest.fixture
def tiny_task():
    spec = PartialTaskSpec.simple(n_source=24, n_target=12, image_size=8, shift=ShiftParams())
    return generate_synthetic_task(spec, seed=3)


@pytest.fixture
def tiny_target(tiny_task):
    return tiny_task[1]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
