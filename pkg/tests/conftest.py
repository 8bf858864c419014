import numpy as np
import pytest
import torch

from fedward.data import load_digits_set, make_shapes_dataset
from fedward.models import TrainConfig, build_model, sgd_train

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def shapes_train():
    return make_shapes_dataset(1200, seed=7)


@pytest.fixture(scope="session")
def shapes_test():
    return make_shapes_dataset(400, seed=8)


@pytest.fixture(scope="session")
def digits():
    return load_digits_set(seed=3)


@pytest.fixture(scope="session")
def pretrained(shapes_train):
    """A small conv net trained to high accuracy on the shapes task."""
    model = build_model("small_convnet", shapes_train.image_shape, 10, seed=11)
    cfg = TrainConfig(learning_rate=0.03, epochs=3, batch_size=32, momentum=0.9)
    sgd_train(model, shapes_train, cfg, seed=12)
    return model


@pytest.fixture()
def fresh_pretrained(pretrained):
    return pretrained.clone()


def rand_images(n, shape=(3, 16, 16), seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n, *shape)).astype(np.float32)
