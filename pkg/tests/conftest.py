import numpy as np
import pytest
import torch

from avatarkit.facemodel import synth_toy_model

# keep CPU math reproducible across the whole suite
torch.manual_seed(0)


@pytest.fixture(scope="session")
def toy_model():
    return synth_toy_model(1, v=502, n_shape=20, n_exp=10, n_tex=10, n_landmarks=68)


@pytest.fixture(scope="session")
def small_model():
    # cheaper model for rasterization-heavy tests
    return synth_toy_model(3, v=180, n_shape=6, n_exp=4, n_tex=4, n_landmarks=24)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
