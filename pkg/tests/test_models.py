import json

import numpy as np
import pytest

from domadapt.adaptation import dann_domain_loss
from domadapt.autodiff import Tensor, ops
from domadapt.models import (
    ClassifierConfig,
    DiscriminatorConfig,
    EncoderConfig,
    build_model,
    classify,
    discriminate,
    embed,
    encode,
    load_checkpoint,
    predict,
    save_checkpoint,
)


def _count(dims, bn_hidden, bn_last):
    """Independent parameter count for a chain of dense layers."""
    total = 0
    n = len(dims) - 1
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        total += a * b + b
        if (bn_hidden and i < n - 1) or (bn_last and i == n - 1):
            total += 2 * b
    return total


def test_parameter_count_matches_closed_form():
    g, c = 500, 5
    model = build_model(EncoderConfig(g), ClassifierConfig(c), DiscriminatorConfig())
    expected = (
        _count([g, 256, 256, 256, 256], True, True)
        + _count([256, 128, 64, c], True, False)
        + _count([256, 256, 128, 64, 1], False, False)
    )
    assert model.num_parameters() == expected
    names = model.named_parameters()
    assert "encoder.layer3.gamma" in names and "discriminator.layer3.W" in names
    assert not any(k.startswith("discriminator") and k.endswith("gamma") for k in names)


def test_same_seed_same_parameters_and_different_seed_differs():
    a = build_model(EncoderConfig(20), ClassifierConfig(3), seed=4).state_dict()
    b = build_model(EncoderConfig(20), ClassifierConfig(3), seed=4).state_dict()
    c = build_model(EncoderConfig(20), ClassifierConfig(3), seed=5).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        ClassifierConfig(1)
    with pytest.raises(ValueError):
        build_model(EncoderConfig(10, (32,)), ClassifierConfig(3, latent_dim=64))
    with pytest.raises(ValueError):
        DiscriminatorConfig(mode="other")
    with pytest.raises(ValueError):
        EncoderConfig(10, ())


def test_variant_is_immutable():
    m = build_model(EncoderConfig(10), ClassifierConfig(2), variant="wass_sup")
    with pytest.raises(AttributeError):
        m.variant = "dann_sup"
    with pytest.raises(ValueError):
        build_model(EncoderConfig(10), ClassifierConfig(2), variant="gan")


@pytest.mark.parametrize("m", [1, 2, 7])
def test_shapes_eval_mode(m, rng):
    model = build_model(EncoderConfig(12), ClassifierConfig(4))
    x = rng.normal(size=(m, 12))
    z = encode(model, x)
    assert z.shape == (m, 256)
    assert classify(model, z).shape == (m, 4)
    assert discriminate(model, z).shape == (m, 1)


def test_train_mode_needs_two_rows(rng):
    model = build_model(EncoderConfig(12), ClassifierConfig(4))
    assert encode(model, rng.normal(size=(2, 12)), training=True).shape == (2, 256)
    with pytest.raises(ValueError):
        encode(model, rng.normal(size=(1, 12)), training=True)
    with pytest.raises(ValueError):
        encode(model, rng.normal(size=(3, 11)))


def test_zero_encoder_without_batchnorm_gives_zero_latent(rng):
    model = build_model(EncoderConfig(6, (8, 8), use_batchnorm=False), ClassifierConfig(2, latent_dim=8))
    for p in model.encoder.parameters():
        p.data[...] = 0.0
    assert np.all(encode(model, rng.normal(size=(3, 6))).data == 0.0)


def test_he_uniform_first_layer_variance(rng):
    g = 300
    model = build_model(EncoderConfig(g), ClassifierConfig(2), seed=1)
    x = rng.normal(size=(1000, g))
    pre = x @ model.encoder.layers[0].W.data
    target = 2.0  # fan_in * (2 / fan_in) for unit-variance input
    assert 0.5 * target <= pre.var() <= 2.0 * target


def test_discriminator_is_unsquashed_and_dann_loss_applies_sigmoid():
    model = build_model(EncoderConfig(4, (4,)), ClassifierConfig(2, latent_dim=4), DiscriminatorConfig(4, (4,), "wasserstein"))
    for p in model.discriminator.parameters():
        p.data[...] = 0.0
    model.discriminator.layers[0].W.data[0, 0] = 50.0
    model.discriminator.layers[1].W.data[0, 0] = 50.0
    out = discriminate(model, Tensor(np.array([[1.0, 0, 0, 0]]))).item()
    assert abs(out) > 1.0
    zero = Tensor(np.zeros((1, 1)))
    assert ops.sigmoid(zero).item() == 0.5
    assert dann_domain_loss(zero, zero).item() == pytest.approx(np.log(2))


def test_checkpoint_round_trip(tmp_path, rng):
    model = build_model(EncoderConfig(9, (16, 8)), ClassifierConfig(3, latent_dim=8, hidden=(6,)), seed=3, variant="wass_unsup")
    model.encoder.layers[0].bn.running_mean[:] = rng.normal(size=16)
    path = save_checkpoint(model, tmp_path / "m.npz")
    loaded = load_checkpoint(path)
    assert loaded.variant == "wass_unsup"
    a, b = model.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    x = rng.normal(size=(5, 9))
    np.testing.assert_array_equal(embed(model, x), embed(loaded, x))
    np.testing.assert_array_equal(predict(model, x), predict(loaded, x))
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        assert z["encoder.layer0.W"].dtype == np.float64
    assert meta["variant"] == "wass_unsup" and meta["configs"]["encoder"]["input_dim"] == 9


def test_load_state_dict_rejects_mismatch():
    model = build_model(EncoderConfig(5, (4,)), ClassifierConfig(2, latent_dim=4))
    state = model.state_dict()
    state["encoder.layer0.W"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        model.load_state_dict(state)
    del state["encoder.layer0.W"]
    with pytest.raises(KeyError):
        model.load_state_dict(state)
