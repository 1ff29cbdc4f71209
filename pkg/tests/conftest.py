import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_train_config(**kw):
    from cotpcc.training import TrainConfig

    base = dict(
        epochs=1,
        batch_size=2,
        k_nn=4,
        width=8,
        disc_width=8,
        decoder_width=8,
        latent_dim=4,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def tiny_clouds(n_clouds=4, n=32, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_clouds):
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        out.append(v * rng.uniform(0.5, 1.0))
    return out
