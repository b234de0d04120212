import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from spectralgan.data import RingSpec, sample_ring
from spectralgan.estimators import GANTrainer, SpectralNormalizer
from spectralgan.tensor import explicit_conv_matrix


def test_normalizer_dense():
    w = np.random.default_rng(0).standard_normal((5, 3))
    sn = SpectralNormalizer().fit(w)
    assert sn.divisor_ == pytest.approx(np.linalg.norm(w, 2), rel=1e-9)
    out = sn.transform(w)
    assert np.linalg.norm(out, 2) == pytest.approx(1.0, rel=1e-9)
    np.testing.assert_allclose(sn.inverse_transform(out), w, rtol=1e-12)


def test_normalizer_scale_and_none():
    w = np.random.default_rng(1).standard_normal((4, 4))
    out = SpectralNormalizer(scale=2.0).fit_transform(w)
    assert np.linalg.norm(out, 2) == pytest.approx(2.0, rel=1e-9)
    np.testing.assert_allclose(SpectralNormalizer(mode="none", scale=3.0).fit_transform(w), 3 * w)


def test_normalizer_conv_operator():
    k = np.random.default_rng(2).standard_normal((2, 3, 3, 3))
    sn = SpectralNormalizer(mode="sn_conv", input_shape=(3, 5, 5), pad=1).fit(k)
    M = explicit_conv_matrix(k, (3, 5, 5), 1, 1)
    assert sn.divisor_ == pytest.approx(np.linalg.norm(M, 2), rel=1e-6)
    assert sn.report_.sigma_conv == pytest.approx(np.linalg.norm(M, 2), rel=1e-6)


def test_normalizer_validation():
    sn = SpectralNormalizer()
    with pytest.raises(NotFittedError):
        sn.transform(np.ones((2, 2)))
    sn.fit(np.eye(3))
    with pytest.raises(ValueError):
        sn.transform(np.eye(2))
    with pytest.raises(ValueError):
        SpectralNormalizer().fit(np.ones((2, 2, 2)))


def test_params_and_clone():
    sn = SpectralNormalizer(mode="bsn", scale=1.5)
    assert sn.get_params()["mode"] == "bsn"
    c = clone(sn.set_params(scale=2.5))
    assert c.get_params()["scale"] == 2.5 and not hasattr(c, "divisor_")
    g = GANTrainer(iters=10, disc_width=8)
    assert clone(g).get_params() == g.get_params()


def test_gan_trainer_fit_sample():
    X = sample_ring(RingSpec(), 500, rng=0)
    g = GANTrainer(iters=6, log_every=3, disc_width=8, gen_hidden=(8,), batch_size=16, n_dis=1)
    with pytest.raises(NotFittedError):
        g.sample(3)
    g.fit(X)
    assert g.n_features_in_ == 2
    assert g.sample(7, random_state=0).shape == (7, 2)
    assert {m.iter for m in g.metrics_} == {3, 6}
    np.testing.assert_array_equal(g.sample(4, random_state=1), g.sample(4, random_state=1))
