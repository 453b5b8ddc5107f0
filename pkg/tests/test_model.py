"""Network shape contracts, label handling, the latent sampling rule and
checkpoint round trips."""

import numpy as np
import pytest

from meshdvae import autodiff as ad
from meshdvae.model import (Architecture, ClassifierC, ClassifierCRecon,
                            DvaeModel, ModelError, VaeModel, one_hot)


RNG = np.random.default_rng(0)


def small_arch(latent=4, in_channels=3):
    return Architecture(n_vertices=12, level_factors=(2, 2), channels=(4, 8),
                        in_channels=in_channels, cheb_order=3, latent=latent)


@pytest.fixture()
def dvae(hier12):
    return DvaeModel.init(small_arch(), hier12, np.random.default_rng(1))


@pytest.fixture()
def clf(hier12):
    return ClassifierC.init(small_arch(), hier12, np.random.default_rng(2))


# -- one-hot -----------------------------------------------------------------------


def test_one_hot_basic():
    np.testing.assert_array_equal(one_hot([0, 1, 1]),
                                  [[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])


def test_one_hot_rejects_other_labels():
    with pytest.raises(ModelError):
        one_hot([0, 2])


# -- shapes and probability contracts ----------------------------------------------


def test_classifier_probabilities_normalized(clf):
    x = RNG.standard_normal((5, 12, 3))
    p = clf.encode_label(x)
    assert p.shape == (5, 2)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert (p > 0).all()


def test_classifier_tie_breaks_toward_class_zero(clf):
    p = np.array([[0.5, 0.5]])
    assert int(np.argmax(p, axis=-1)[0]) == 0  # documents the numpy rule we rely on
    # End to end: identical logits arise from a zero-weight head.
    clf.params["q0.W"].data[:] = 0.0
    clf.params["q0.b"].data[:] = 0.0
    x = RNG.standard_normal((3, 12, 3))
    np.testing.assert_array_equal(clf.classify(x), [0, 0, 0])


def test_classifier_rejects_wrong_vertex_count(clf):
    with pytest.raises(ModelError, match="expected"):
        clf.encode_label(RNG.standard_normal((13, 3)))


def test_dvae_latent_shapes(dvae):
    x = RNG.standard_normal((4, 12, 3))
    y = one_hot([0, 1, 0, 1])
    mu, logvar = dvae.encode_latent(x, y)
    assert mu.shape == (4, 4)
    assert logvar.shape == (4, 4)
    out = dvae.decode(mu, y)
    assert out.shape == (4, 12, 3)


def test_vae_has_wider_latent_and_no_label_head(hier12):
    vae = VaeModel.init(small_arch(), hier12, np.random.default_rng(3))
    x = RNG.standard_normal((2, 12, 3))
    mu, logvar = vae.encode_latent(x)
    assert mu.shape == (2, 6)  # latent + 2
    with pytest.raises(ModelError):
        vae.encode_label(x)
    assert vae.reconstruct(x).shape == (2, 12, 3)


def test_crecon_consumes_six_channels(hier12):
    cr = ClassifierCRecon.init(small_arch(), hier12, np.random.default_rng(4))
    x = RNG.standard_normal((3, 12, 3))
    a = RNG.standard_normal((3, 12, 3))
    b = RNG.standard_normal((3, 12, 3))
    x6 = cr.assemble_input(x, a, b)
    assert x6.shape == (3, 12, 6)
    np.testing.assert_array_equal(x6[..., :3], x - a)
    np.testing.assert_array_equal(x6[..., 3:], x - b)
    p = cr.classify_recon(x, a, b)
    assert p.shape == (3, 2)


def test_decoder_final_layer_is_linear(dvae):
    # Doubling the final conv weights (with zero bias) doubles the output.
    z = RNG.standard_normal((1, 4))
    y = one_hot([1])
    last = max(int(k.split("conv")[1].split(".")[0])
               for k in dvae.params if k.startswith("dec.conv"))
    wkey, bkey = f"dec.conv{last}.W", f"dec.conv{last}.b"
    dvae.params[bkey].data[:] = 0.0
    out1 = dvae.decode(z, y)
    dvae.params[wkey].data *= 2.0
    out2 = dvae.decode(z, y)
    np.testing.assert_allclose(out2, 2.0 * out1, rtol=1e-10)


def test_label_pathway_reaches_both_heads(dvae):
    # mu and the decoder output must change when y flips.
    x = RNG.standard_normal((1, 12, 3))
    mu0, _ = dvae.encode_latent(x, one_hot([0]))
    mu1, _ = dvae.encode_latent(x, one_hot([1]))
    assert np.abs(mu0 - mu1).max() > 1e-8
    z = RNG.standard_normal((1, 4))
    out0 = dvae.decode(z, one_hot([0]))
    out1 = dvae.decode(z, one_hot([1]))
    assert np.abs(out0 - out1).max() > 1e-8


def test_label_head_is_independent_of_latent_heads(dvae):
    # q0 has its own trunk: scrambling the q1/q2 trunk leaves logits unchanged.
    x = RNG.standard_normal((2, 12, 3))
    before = dvae.encode_label(x)
    for name, p in dvae.params.items():
        if name.startswith("enc."):
            p.data += 1.0
    np.testing.assert_array_equal(dvae.encode_label(x), before)


def test_reparameterize_rule():
    mu = np.array([[1.0, -2.0]])
    logvar = np.array([[0.0, np.log(4.0)]])
    eps = np.array([[0.5, 1.0]])
    z = DvaeModel.reparameterize(mu, logvar, eps)
    np.testing.assert_allclose(z, [[1.5, 0.0]], atol=1e-12)


def test_reparameterize_statistics_match_mu_sigma():
    rng = np.random.default_rng(5)
    mu = np.array([0.7, -1.2])
    logvar = np.array([np.log(0.25), np.log(2.0)])
    eps = rng.standard_normal((200000, 2))
    z = DvaeModel.reparameterize(mu, logvar, eps)
    np.testing.assert_allclose(z.mean(axis=0), mu, atol=0.02)
    np.testing.assert_allclose(z.var(axis=0), [0.25, 2.0], atol=0.03)


def test_reconstruct_uses_mu_deterministically(dvae):
    x = RNG.standard_normal((2, 12, 3))
    a = dvae.reconstruct(x, [0, 1])
    b = dvae.reconstruct(x, [0, 1])
    np.testing.assert_array_equal(a, b)


def test_flip_changes_only_the_decoder_label(dvae):
    x = RNG.standard_normal((1, 12, 3))
    y = np.array([0])
    mu, _ = dvae.encode_latent(x, one_hot(y, dvae.dtype))
    flipped = dvae.reconstruct(x, y, flip=True)
    np.testing.assert_allclose(flipped, dvae.decode(mu, one_hot([1], dvae.dtype)),
                               rtol=1e-12)


# -- initialization ------------------------------------------------------------------


def test_init_weights_bounded_by_inverse_sqrt_fan_in(hier12):
    model = DvaeModel.init(small_arch(), hier12, np.random.default_rng(6))
    for name, p in model.params.items():
        if name.endswith(".b"):
            np.testing.assert_array_equal(p.data, 0.0)
        else:
            fan_in = p.data.shape[0]
            assert np.abs(p.data).max() <= 1.0 / np.sqrt(fan_in)


def test_init_is_deterministic_given_seed(hier12):
    m1 = DvaeModel.init(small_arch(), hier12, np.random.default_rng(7))
    m2 = DvaeModel.init(small_arch(), hier12, np.random.default_rng(7))
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name].data, m2.params[name].data)


# -- checkpoints ----------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, dvae, hier12):
    x = RNG.standard_normal((2, 12, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / "model.ckpt"
    dvae.save(path)
    back = DvaeModel.load(path, hier12)
    assert isinstance(back, DvaeModel)
    assert back.arch == dvae.arch
    # float32 storage: outputs agree to single precision.
    np.testing.assert_allclose(back.encode_label(x), dvae.encode_label(x),
                               atol=1e-6)


def test_checkpoint_restores_the_saved_kind(tmp_path, clf, hier12):
    path = tmp_path / "c.ckpt"
    clf.save(path)
    from meshdvae.model import _MeshNetwork
    back = _MeshNetwork.load(path, hier12)
    assert isinstance(back, ClassifierC)
    assert back.kind == "classifier"


def test_checkpoint_rejects_bad_magic(tmp_path, hier12):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"WRONGMAG" + b"\x00" * 32)
    with pytest.raises(ModelError, match="magic"):
        DvaeModel.load(path, hier12)


def test_checkpoint_refuses_other_versions_naming_both(tmp_path, dvae, hier12):
    path = tmp_path / "model.ckpt"
    dvae.save(path)
    raw = bytearray(path.read_bytes())
    raw[8] = 99  # version byte
    path.write_bytes(bytes(raw))
    with pytest.raises(ModelError, match="99.*1"):
        DvaeModel.load(path, hier12)
