import numpy as np
import pytest

from gradcon import autodiff as ad
from gradcon import checkpoint as ckpt
from gradcon import nn
from gradcon.training import GradientMemory


def test_param_count_1_channel():
    model = nn.build_model(nn.CAE, 1, seed=0)
    assert nn.param_count(model) == 230_721


def test_param_count_3_channel():
    model = nn.build_model(nn.CAE, 3, seed=0)
    assert nn.param_count(model) == 232_771


def test_param_count_matches_enumeration():
    model = nn.build_model(nn.CAE, 1, seed=3)
    total = sum(p.size for p in model.parameters())
    assert nn.param_count(model) == total


def test_param_count_empty_model():
    model = nn.ModelParams(nn.CAE, 1, [], [])
    assert nn.param_count(model) == 0


def test_unsupported_channel_count():
    with pytest.raises(ValueError):
        nn.build_model(nn.CAE, 2, seed=0)


def test_encoder_shape_chain():
    model = nn.build_model(nn.CAE, 1, seed=0)
    x = ad.constant(np.zeros((1, 1, 32, 32)))
    shapes = []
    for spec, (w, b) in zip(model.encoder_specs, model.encoder):
        x = nn._apply_layer(x, spec, w, b)
        shapes.append(x.shape[2])
    assert shapes == [16, 8, 4, 3]
    assert x.shape == (1, 64, 3, 3)


def test_reconstruction_shape_and_range():
    model = nn.build_model(nn.CAE, 1, seed=0)
    batch = np.random.default_rng(0).uniform(0, 1, (16, 1, 32, 32))
    out = nn.forward(model, batch)
    assert out["reconstruction"].shape == (16, 1, 32, 32)
    rec = out["reconstruction"].data
    assert rec.min() > 0.0 and rec.max() < 1.0


def test_mirror_invariant():
    for channels in (1, 3):
        model = nn.build_model(nn.CAE, channels, seed=0)
        enc, dec = model.encoder_specs, model.decoder_specs
        n = len(enc)
        for i in range(n):
            assert dec[i].out_channels == enc[n - 1 - i].in_channels
            assert dec[i].in_channels == enc[n - 1 - i].out_channels


def test_wrong_spatial_size_rejected():
    model = nn.build_model(nn.CAE, 1, seed=0)
    with pytest.raises(ad.ShapeMismatchError):
        nn.forward(model, np.zeros((1, 1, 28, 28)))
    with pytest.raises(ad.ShapeMismatchError):
        nn.forward(model, np.zeros((1, 3, 32, 32)))


def test_init_determinism():
    a = nn.build_model(nn.CAE, 1, seed=42)
    b = nn.build_model(nn.CAE, 1, seed=42)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)
    c = nn.build_model(nn.CAE, 1, seed=43)
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)


def test_vae_latent_split_and_reparameterization():
    model = nn.build_model(nn.VAE, 1, seed=0)
    # final encoder layer has doubled output channels
    assert model.encoder_specs[-1].out_channels == 128
    batch = np.random.default_rng(1).uniform(0, 1, (2, 1, 32, 32))
    out = nn.forward(model, batch, rng=np.random.default_rng(5))
    assert out["mu"].shape == (2, 64, 3, 3)
    assert out["logvar"].shape == (2, 64, 3, 3)
    assert out["reconstruction"].shape == batch.shape
    # latent = mu + exp(logvar/2) * eps with the supplied noise source
    h = nn.encode(model, batch)
    mu = nn._channel_slice(h, 0, 64).data
    logvar = nn._channel_slice(h, 64, 128).data
    eps = np.random.default_rng(5).standard_normal((2, 64, 3, 3))
    assert np.allclose(out["latent"].data, mu + np.exp(0.5 * logvar) * eps)


def test_vae_channel_slice_gradient_flows():
    model = nn.build_model(nn.VAE, 1, seed=0)
    batch = np.random.default_rng(2).uniform(0, 1, (2, 1, 32, 32))
    out = nn.forward(model, batch, rng=np.random.default_rng(0))
    loss = ad.add(ad.bce_loss(out["reconstruction"], ad.constant(batch)),
                  ad.kl_div_gaussian(out["mu"], out["logvar"]))
    grads = ad.grad(loss, model.parameters())
    assert all(np.isfinite(g.data).all() for g in grads)
    assert any(np.abs(g.data).max() > 0 for g in grads)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = ad.Var(np.array([1.0, -2.0]), requires_grad=True)
    state = nn.AdamState.for_params([p])
    before = p.data.copy()
    nn.adam_step(state, [p], [np.zeros(2)])
    assert np.array_equal(p.data, before)
    assert state.step_count == 1


def test_adam_first_step_magnitude_is_lr():
    p = ad.Var(np.array([0.0]), requires_grad=True)
    state = nn.AdamState.for_params([p])
    nn.adam_step(state, [p], [np.ones(1)])
    assert abs(abs(p.data[0]) - state.lr) < 1e-9


def test_adam_decreases_quadratic():
    p = ad.Var(np.array([3.0, -2.0]), requires_grad=True)
    state = nn.AdamState.for_params([p], lr=0.1)
    losses = []
    for _ in range(10):
        losses.append(float(np.sum(p.data ** 2)))
        nn.adam_step(state, [p], [2.0 * p.data])
    losses.append(float(np.sum(p.data ** 2)))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_shape_mismatch():
    p = ad.Var(np.array([1.0, 2.0]), requires_grad=True)
    state = nn.AdamState.for_params([p])
    with pytest.raises(ad.ShapeMismatchError):
        nn.adam_step(state, [p], [np.zeros(3)])


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    model = nn.build_model(nn.CAE, 1, seed=9)
    memory = GradientMemory.for_model(model)
    memory.update([np.random.default_rng(0).normal(size=a.size)
                   for a in memory.averages])
    path = tmp_path / "model.gcon"
    ckpt.save_checkpoint(path, model, memory)
    model2, memory2 = ckpt.load_checkpoint(path)
    assert model2.variant == model.variant
    assert model2.in_channels == model.in_channels
    for pa, pb in zip(model.parameters(), model2.parameters()):
        assert np.array_equal(pa.data, pb.data)
    assert memory2.count == 1
    for a, b in zip(memory.averages, memory2.averages):
        assert np.array_equal(a, b)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.gcon"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(path)


def test_checkpoint_truncation(tmp_path):
    model = nn.build_model(nn.CAE, 1, seed=9)
    memory = GradientMemory.for_model(model)
    path = tmp_path / "model.gcon"
    ckpt.save_checkpoint(path, model, memory)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(path)
