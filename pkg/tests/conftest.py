import numpy as np
import pytest

from dce import dce_model as dm
from dce.sess_ae import SaeConfig, train_autoencoder
from dce.synthgen import GenConfig, generate_population


@pytest.fixture(scope="session")
def micro_dataset():
    return generate_population(GenConfig(n_customers=60, mean_sessions=12, seed=3))


@pytest.fixture(scope="session")
def micro_sae(micro_dataset):
    corpus = [s for h in micro_dataset.train for s in h.sessions]
    model, _ = train_autoencoder(corpus, SaeConfig(d=8, k=4, epochs=2, batch_size=64,
                                                   vocab_size=micro_dataset.vocab.size))
    return model


@pytest.fixture(scope="session")
def micro_embeddings(micro_dataset, micro_sae):
    return dm.session_embedding_lookup(micro_dataset, micro_sae)


@pytest.fixture(scope="session")
def micro_dce(micro_dataset, micro_sae, micro_embeddings):
    cfg = dm.DceConfig(hidden=6, mlp_hidden=6, out=4, d_c=6, k_cal=2, epochs=3, batch_size=16)
    model, hist = dm.train_dce(micro_dataset, micro_sae, cfg, embeddings=micro_embeddings)
    return model, hist


def random_params(model_params, rng, scale=0.5, lstm_scale=None, dtype=np.float64):
    out = {}
    for k, v in model_params.items():
        s = lstm_scale if (lstm_scale is not None and "lstm" in k) else scale
        out[k] = rng.normal(0.0, s, size=v.shape).astype(dtype)
    return out


@pytest.fixture(scope="session")
def default_dataset():
    return generate_population(GenConfig())
