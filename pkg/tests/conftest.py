"""
Shared fixtures for the milforge test suite
===========================================
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from src.milforge_features import FeatureBag  # noqa: E402
from src.milforge_models import MilModel, ModelConfig  # noqa: E402
from src.milforge_tiling import ArraySlide  # noqa: E402

PINK = (230, 150, 190)
WHITE = (255, 255, 255)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: synthetic benchmark runs (minutes)")


def make_tissue_raster(width, height, boxes, colour=PINK):
    """White canvas with filled tissue rectangles given as (x0, y0, x1, y1)"""
    raster = np.full((height, width, 3), WHITE, dtype=np.uint8)
    for x0, y0, x1, y1 in boxes:
        raster[y0:y1, x0:x1] = colour
    return raster


@pytest.fixture
def square_slide():
    """1024x1024 tissue square at the origin of a 1536x1536 native-40x slide"""
    return ArraySlide("square", make_tissue_raster(1536, 1536, [(0, 0, 1024, 1024)]))


@pytest.fixture
def small_config():
    def factory(variant="attn", d_in=6, n_classes=2, embed_dim=5, attn_dim=4, dropout=0.0):
        return ModelConfig(variant, d_in, n_classes, embed_dim, attn_dim, dropout)
    return factory


@pytest.fixture
def random_bag():
    def factory(rng, k=5, d=6, label=0, slide_id="bag"):
        return FeatureBag(slide_id, "20x", rng.standard_normal((k, d)), label)
    return factory


@pytest.fixture
def random_model(small_config):
    def factory(rng, **config_kwargs):
        return MilModel.initialize(small_config(**config_kwargs), rng)
    return factory
