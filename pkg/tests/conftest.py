import numpy as np
import pytest

from scengen.models import ArchitectureConfig, init_params


@pytest.fixture
def tiny_arch():
    return ArchitectureConfig(
        sites=2, horizon=4, latent_dim=4,
        gen_dense_widths=(8,), gen_base_channels=4, gen_base_len=1,
        gen_deconv=((4, 3, 2), (2, 3, 2)),
        disc_widths=(8, 4), dropout_p=0.3)


@pytest.fixture
def tiny_params(tiny_arch):
    return init_params(tiny_arch, seed=11)


def mean_critic(sites=2, horizon=4, scale=1.0, dropout_p=0.0):
    """Params whose critic computes exactly scale * mean(x) on x >= 0.

    A single positive-weight hidden unit keeps the leaky ReLU inactive, so
    the network is genuinely linear on the inputs the tests feed it.
    """
    cfg = ArchitectureConfig(
        sites=sites, horizon=horizon, latent_dim=4,
        gen_dense_widths=(8,), gen_base_channels=4, gen_base_len=1,
        gen_deconv=((4, 3, 2), (sites, 3, max(1, horizon // 2))),
        disc_widths=(1,), dropout_p=dropout_p)
    params = init_params(cfg, seed=0)
    n = sites * horizon
    params.tensors["d.dense0.w"] = np.full((n, 1), 1.0 / n)
    params.tensors["d.dense0.b"][:] = 0.0
    params.tensors["d.out.w"] = np.array([[scale]])
    params.tensors["d.out.b"][:] = 0.0
    return params


def unit_norm_critic(sites=2, horizon=4, scale=1.0):
    """Critic equal to scale * w.x with |w|_2 = 1 and w > 0 elementwise."""
    params = mean_critic(sites, horizon, scale=scale)
    n = sites * horizon
    params.tensors["d.dense0.w"] = np.full((n, 1), 1.0 / np.sqrt(n))
    return params
