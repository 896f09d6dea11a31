import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from targetforge.data import make_toy_dataset
from targetforge.engine import Dense
from targetforge.model import ModelSpec, build_toy_spec, init_model
from targetforge.training import TrainConfig, train_model


@pytest.fixture(scope="session")
def toy_data():
    return make_toy_dataset(seed=0)


@pytest.fixture(scope="session")
def toy_unsecured(toy_data):
    train, test = toy_data
    cfg = TrainConfig(defense="unsecured", epochs=4, batch_size=128, seed=1)
    return train_model(build_toy_spec(1), train, cfg, eval_data=test)


@pytest.fixture(scope="session")
def toy_target_clean(toy_data):
    train, test = toy_data
    cfg = TrainConfig(defense="target_clean", epochs=12, batch_size=128, seed=1)
    return train_model(build_toy_spec(2), train, cfg, eval_data=test)


def linear_model(weight, bias, base_classes=None, multiplier=1):
    """Model with a single dense layer and hand-set parameters.

    weight: (d, out) array; input shape is (1, 1, d).
    """
    weight = np.asarray(weight, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    d, out = weight.shape
    k = base_classes or out
    spec = ModelSpec(layers=(Dense(out),), input_shape=(1, 1, d),
                     base_classes=k, class_multiplier=multiplier, arch="custom")
    model = init_model(spec, seed=0)
    model.network.layers[0].weight = weight.copy()
    model.network.layers[0].bias = bias.copy()
    return model
