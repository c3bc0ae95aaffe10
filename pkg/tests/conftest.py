# -*- coding: utf-8 -*-

import os

import pytest

from pfpn.tensor_core import Rng
from tests.helpers import CATEGORY_TABLE

CONFIG_KEYS = (
    "OUTPUT_DIR", "SEED", "PFPN_THREADS", "OUTPUT_FORMAT", "FPN_CHANNELS", "BRANCH_WIDTH", "AGGREGATION",
    "NUM_CLASSES", "INCLUDE_OTHER_CLASS", "GN_GROUPS", "GN_EPS", "SCORE_THRESHOLD", "KEEP_FRACTION",
    "STUFF_AREA_MIN", "TRAIN_STEPS", "LEARNING_RATE", "LAMBDA_I", "LAMBDA_S", "SCENE_EXTENT", "SCENE_CLASSES",
    "DEMO_WIDTH", "LAMBDA_GRID",
)


@pytest.fixture(autouse=True)
def isolated_environ():
    """Config files are loaded into os.environ; restore it after every test."""
    saved = dict(os.environ)
    for key in CONFIG_KEYS:
        os.environ.pop(key, None)
    yield
    os.environ.clear()
    os.environ.update(saved)


@pytest.fixture
def rng():
    return Rng(0)


@pytest.fixture
def category_table():
    return dict(CATEGORY_TABLE)
