import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from popsteer import data as D
from popsteer import encoder as E
from popsteer import sae as S
from popsteer import surrogate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_log():
    return surrogate.generate_log(surrogate.SurrogateConfig(n_users=200, n_items=120, mean_len=25, seed=3))


@pytest.fixture(scope="session")
def toy_split(toy_log):
    return D.leave_one_out_split(D.k_core_filter(toy_log, 5, 5))


@pytest.fixture(scope="session")
def toy_partition(toy_split):
    return D.popularity_partition(toy_split)


TOY_ENCODER = E.EncoderConfig(hidden_size=16, layers=1, heads=2, ffn_size=32, max_seq_len=15, dropout=0.1,
                              attn_dropout=0.1, batch=64, max_epochs=3, patience=2, lr=3e-3, seed=5)


@pytest.fixture(scope="session")
def toy_encoder(toy_split):
    params, _ = E.train_encoder(toy_split, TOY_ENCODER)
    return params


@pytest.fixture(scope="session")
def toy_sae(toy_split, toy_encoder):
    X = E.encode_batch(toy_encoder, list(toy_split.train))
    cfg = S.SaeConfig(input_dim=16, scale=4, k=6, batch=64, epochs=15, seed=2)
    params, _ = S.train_sae(X, cfg)
    return params


@pytest.fixture(scope="session")
def trained_encoder(toy_split):
    """Longer-trained toy encoder for run oracles that need a meaningful model."""
    params, _ = E.train_encoder(toy_split, dataclasses.replace(TOY_ENCODER, max_epochs=20))
    return params


@pytest.fixture(scope="session")
def trained_sae(toy_split, trained_encoder):
    X = E.encode_batch(trained_encoder, list(toy_split.train))
    params, _ = S.train_sae(X, S.SaeConfig(input_dim=16, scale=4, k=6, batch=64, epochs=60, seed=1))
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
