"""Model assembly, output contracts, and the checkpoint container."""

import numpy as np
import pytest

from scengen.autodiff import Graph, ShapeError
from scengen.models import (ArchitectureConfig, CheckpointError,
                            ConfigMismatchError, bind_params, criticize,
                            default_architecture, discriminator_forward,
                            generate, generator_forward, init_params,
                            load_params, parameter_count, save_params)


def test_config_validation():
    with pytest.raises(ValueError):
        ArchitectureConfig(sites=4, horizon=24, gen_base_len=3,
                           gen_deconv=((16, 5, 2), (4, 5, 2)))  # reaches 12, not 24
    with pytest.raises(ValueError):
        ArchitectureConfig(sites=3, horizon=24)  # last deconv emits 4 channels
    with pytest.raises(ValueError):
        ArchitectureConfig(latent_dim=0)
    with pytest.raises(ValueError):
        ArchitectureConfig(dropout_p=1.0)


def test_default_architecture_plans_strides():
    for sites, horizon in [(4, 24), (2, 8), (3, 12), (6, 36), (1, 48)]:
        cfg = default_architecture(sites, horizon)
        length = cfg.gen_base_len
        for _, _, stride in cfg.gen_deconv:
            length *= stride
        assert length == horizon
        assert cfg.gen_deconv[-1][0] == sites


def test_generator_output_shape_and_range(tiny_arch, tiny_params):
    z = np.random.default_rng(0).normal(size=(64, tiny_arch.latent_dim))
    out = generate(tiny_params, z)
    assert out.shape == (64, tiny_arch.sites, tiny_arch.horizon)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_generator_range_over_many_draws(tiny_params, tiny_arch):
    rng = np.random.default_rng(123)
    for _ in range(10):
        z = rng.normal(size=(10_000, tiny_arch.latent_dim))
        out = generate(tiny_params, z)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_generator_zero_latents_finite(tiny_params, tiny_arch):
    out = generate(tiny_params, np.zeros((1, tiny_arch.latent_dim)))
    assert np.all(np.isfinite(out))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_generator_deterministic(tiny_params, tiny_arch):
    z = np.random.default_rng(5).normal(size=(4, tiny_arch.latent_dim))
    assert np.array_equal(generate(tiny_params, z), generate(tiny_params, z))


def test_generator_clamp_mode():
    cfg = ArchitectureConfig(sites=2, horizon=4, latent_dim=4,
                             gen_dense_widths=(8,), gen_base_channels=4,
                             gen_base_len=1, gen_deconv=((4, 3, 2), (2, 3, 2)),
                             disc_widths=(8, 4), output_nonlinearity="clamp")
    params = init_params(cfg, seed=3)
    out = generate(params, np.random.default_rng(1).normal(size=(32, 4)))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_generator_rejects_bad_latent(tiny_params):
    with pytest.raises(ShapeError):
        generate(tiny_params, np.zeros((2, 99)))


def test_discriminator_eval_deterministic(tiny_params, tiny_arch):
    x = np.random.default_rng(2).random((6, tiny_arch.sites, tiny_arch.horizon))
    assert np.array_equal(criticize(tiny_params, x), criticize(tiny_params, x))


def test_discriminator_train_mode_stochastic(tiny_params, tiny_arch):
    x = np.random.default_rng(2).random((6, tiny_arch.sites, tiny_arch.horizon))
    g = Graph()
    h = bind_params(g, tiny_params, trainable=False, subset="d.")
    xc = g.constant(x)
    s1, _ = discriminator_forward(g, h, tiny_arch, xc, "train",
                                  np.random.default_rng(1))
    s2, _ = discriminator_forward(g, h, tiny_arch, xc, "train",
                                  np.random.default_rng(2))
    assert not np.allclose(s1.values, s2.values)


def test_discriminator_score_unbounded(tiny_arch):
    # a linear critic scales freely: double the output weight, double the score
    params = init_params(tiny_arch, seed=1)
    x = np.random.default_rng(3).random((4, tiny_arch.sites, tiny_arch.horizon))
    base = criticize(params, x)
    params.tensors["d.out.w"] = params.tensors["d.out.w"] * 100.0
    params.tensors["d.out.b"] = params.tensors["d.out.b"] * 100.0
    assert np.allclose(criticize(params, x), base * 100.0)


def test_discriminator_warns_outside_unit_range(tiny_params, tiny_arch):
    x = np.full((1, tiny_arch.sites, tiny_arch.horizon), 2.0)
    with pytest.warns(UserWarning, match="outside"):
        criticize(tiny_params, x)


def test_features_feed_final_affine(tiny_params, tiny_arch):
    g = Graph()
    h = bind_params(g, tiny_params, trainable=False, subset="d.")
    x = g.constant(np.random.default_rng(0).random(
        (3, tiny_arch.sites, tiny_arch.horizon)))
    scores, features = discriminator_forward(g, h, tiny_arch, x, "eval")
    assert features.shape == (3, tiny_arch.feature_dim)
    # the final matmul's left operand must be the exposed feature node
    final_matmuls = [n for n in g.nodes
                     if n.kind == "matmul" and n.inputs[1] == h["d.out.w"].node_id]
    assert len(final_matmuls) == 1
    assert final_matmuls[0].inputs[0] == features.node_id


def test_parameter_count_matches_actual(tiny_arch):
    params = init_params(tiny_arch, seed=0)
    assert parameter_count(tiny_arch) == sum(v.size for v in params.tensors.values())


def test_parameter_count_default_architecture():
    cfg = default_architecture(4, 24)
    params = init_params(cfg, seed=0)
    assert parameter_count(cfg) == sum(v.size for v in params.tensors.values())


# -- checkpoints ---------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_params):
    tiny_params.iteration = 1234
    tiny_params.extras = {"train_state": {"opt_d_t": 5}}
    tiny_params.opt_tensors = {"d_m/d.out.w": np.array([[0.5]])}
    path = tmp_path / "ck.bin"
    save_params(tiny_params, path)
    loaded = load_params(path)
    assert loaded.equal(tiny_params)


def test_checkpoint_corruption_detected(tmp_path, tiny_params):
    path = tmp_path / "ck.bin"
    save_params(tiny_params, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_params(path)


def test_checkpoint_config_mismatch(tmp_path, tiny_params, tiny_arch):
    path = tmp_path / "ck.bin"
    save_params(tiny_params, path)
    other = ArchitectureConfig(sites=tiny_arch.sites, horizon=tiny_arch.horizon,
                               latent_dim=8, gen_dense_widths=(8,),
                               gen_base_channels=4, gen_base_len=1,
                               gen_deconv=((4, 3, 2), (2, 3, 2)),
                               disc_widths=(8, 4))
    with pytest.raises(ConfigMismatchError):
        load_params(path, expect_config=other)
    assert load_params(path, expect_config=tiny_arch).config == tiny_arch


def test_checkpoint_rejects_non_checkpoint(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CheckpointError):
        load_params(path)


def test_checkpoint_bytes_deterministic(tmp_path, tiny_params):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_params(tiny_params, a)
    save_params(tiny_params, b)
    assert a.read_bytes() == b.read_bytes()
