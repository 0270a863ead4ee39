import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dpjl.autodiff import Activation, Dense, Embedding, Model, SimpleRNN
from dpjl.rng import derive_stream

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def mlp(in_features=6, hidden=8, classes=3, act="tanh"):
    return Model([Dense(in_features, hidden), Activation(act), Dense(hidden, classes)],
                 "softmax_ce", (in_features,))


def rnn_model(vocab=5, dim=4, hidden=6, length=10, classes=2):
    return Model([Embedding(vocab, dim), SimpleRNN(dim, hidden), Dense(hidden, classes)],
                 "softmax_ce", (length,))


def init(model, seed=0):
    return model.init_params(derive_stream(seed, "init"))


@pytest.fixture
def small_mlp():
    model = mlp()
    params = init(model)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 6))
    y = rng.integers(0, 3, size=5)
    return model, params, x, y
