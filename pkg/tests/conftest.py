import numpy as np
import pytest
import torch

from nscfate.data import LabelTaxonomy, PreprocessSpec
from nscfate.model import ModelConfig, build_model

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def taxonomy4():
    return LabelTaxonomy("multiclass", ("nsc", "neuron", "astrocyte", "oligodendrocyte"))


@pytest.fixture(scope="session")
def taxonomy2():
    return LabelTaxonomy("binary", ("neuron", "glia"))


@pytest.fixture(scope="session")
def small_preprocess():
    return PreprocessSpec(target_height=32, target_width=32, channels=1)


@pytest.fixture(scope="session")
def small_state(taxonomy4):
    """A small_cnn with a compact head; shared across read-only tests."""
    config = ModelConfig(
        backbone="small_cnn",
        input_shape=(32, 32, 1),
        pretrained_init=False,
        backbone_frozen=False,
        dense1_units=32,
        dense2_units=16,
    )
    return build_model(config, taxonomy4, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
