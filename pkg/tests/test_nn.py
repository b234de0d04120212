import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectralgan.nn import (SIGMOID_MAX_CURVATURE, STRICT, Activation, BoundError, Layer, Network, backward,
                            build_network, forward, hessian_sigma_estimate, hvp, kink_free,
                            layer_grad_bound, layer_sigmas, load_architecture, network_from_dict,
                            network_to_dict, overall_grad_bound, per_sample_grad_norms,
                            raw_weight_grads)
from spectralgan.specnorm import NormMode
from spectralgan.tensor import ShapeError, explicit_conv_matrix, make_rng
from spectralgan.theorems import random_dense_net, strict_normalize


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def conv_net(seed=0, final="identity", act="relu"):
    arch = {"input_shape": [2, 6, 6],
            "layers": [{"kind": "conv", "c_out": 3, "k": 3, "pad": 1, "activation": act},
                       {"kind": "conv", "c_out": 2, "k": 3, "stride": 2, "activation": act},
                       {"kind": "dense", "out": 4, "activation": act},
                       {"kind": "dense", "out": 1}], "final": final}
    return build_network(arch, seed=seed)


# --- activations ------------------------------------------------------------

def test_activation_parse_and_lipschitz():
    assert Activation.parse("lrelu:0.1") == Activation("lrelu", 0.1)
    assert str(Activation.parse("lrelu")) == "lrelu:0.2"
    assert [Activation(k).lipschitz for k in ("relu", "sigmoid", "identity")] == [1.0, 0.25, 1.0]
    with pytest.raises(ValueError):
        Activation("lrelu", 1.5)


def test_relu_derivative_at_zero_is_zero():
    assert Activation("relu").deriv(np.array([0.0]))[0] == 0.0


def test_sigmoid_curvature_maximum():
    z = np.linspace(-6, 6, 200001)
    assert np.max(np.abs(Activation("sigmoid").second_deriv(z))) == pytest.approx(SIGMOID_MAX_CURVATURE, rel=1e-8)
    assert SIGMOID_MAX_CURVATURE < 0.1


# --- network validation -----------------------------------------------------

def test_network_validation():
    w = np.ones((3, 2))
    with pytest.raises(ValueError):
        Network((Layer("dense", w, Activation("sigmoid")), Layer("dense", np.ones((1, 3)), Activation("identity"))))
    with pytest.raises(ShapeError):
        Network((Layer("dense", w), Layer("dense", np.ones((1, 4)), Activation("identity"))))
    with pytest.raises(ValueError):
        Network((Layer("dense", np.ones((1, 2)), Activation("relu")),))
    with pytest.raises(ShapeError):
        Network((Layer("dense", w, Activation("identity")),))


def test_input_shape_mismatch():
    net = random_dense_net(L=2, width=4, in_dim=3)
    with pytest.raises(ShapeError):
        forward(net, np.ones(5))


# --- forward ----------------------------------------------------------------

def test_zero_input_gives_final_activation_of_zero():
    assert forward(random_dense_net(final="identity"), np.zeros(16)).output == 0.0
    assert forward(random_dense_net(final="sigmoid"), np.zeros(16)).output == 0.5
    assert forward(conv_net(), np.zeros((2, 6, 6))).output == 0.0


def test_one_layer_identity():
    w = make_rng(0).standard_normal((1, 5))
    x = make_rng(1).standard_normal(5)
    net = Network((Layer("dense", w, Activation("identity")),))
    assert forward(net, x).output == pytest.approx(float(w[0] @ x))
    gx, gw = backward(net, forward(net, x))
    np.testing.assert_allclose(gw[0][0], x)
    np.testing.assert_allclose(gx, w[0])


def test_forward_matches_straight_line_reimplementation():
    net = random_dense_net(L=3, width=10, in_dim=6, seed=0)
    x = make_rng(1).standard_normal(6)
    W1, W2, W3 = net.weights
    h = np.maximum(W1 @ x, 0)
    h = np.maximum(W2 @ h, 0)
    expected = float((W3 @ h)[0])
    assert abs(forward(net, x).output - expected) < 1e-12


def test_batched_forward_matches_single():
    net = conv_net(seed=3)
    xs = make_rng(4).standard_normal((5, 2, 6, 6))
    out = forward(net, xs).output
    for b in range(5):
        assert out[b] == pytest.approx(forward(net, xs[b]).output, abs=1e-13)


# --- backward ---------------------------------------------------------------

def _fd_grads(net, x, h=1e-5):
    gx = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        gx[idx] = (forward(net, x + e).output - forward(net, x - e).output) / (2 * h)
    gws = []
    for t, w in enumerate(net.weights):
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            e = np.zeros_like(w)
            e[idx] = h
            g[idx] = (forward(net.with_weight(t, w + e), x).output
                      - forward(net.with_weight(t, w - e), x).output) / (2 * h)
        gws.append(g)
    return gx, gws


def _kinkless_input(net, rng, shape):
    for _ in range(50):
        x = rng.standard_normal(shape)
        if all(kink_free(net, x, t, 1e-4) for t in range(net.L)):
            return x
    raise AssertionError("no kink-free input found")


@pytest.mark.parametrize("maker", [
    lambda: random_dense_net(L=4, width=6, in_dim=5, seed=2, activation="lrelu:0.1"),
    lambda: random_dense_net(L=4, width=6, in_dim=5, seed=3, final="sigmoid"),
    lambda: conv_net(seed=4),
])
def test_backward_matches_finite_differences(maker):
    net = maker()
    x = _kinkless_input(net, make_rng(5), tuple(net.input_shape))
    gx, gw = backward(net, forward(net, x))
    fx, fw = _fd_grads(net, x)
    scale = max(np.max(np.abs(gx)), 1e-12)
    assert np.max(np.abs(gx - fx)) / scale < 1e-5
    for a, b in zip(gw, fw):
        assert np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-12) < 1e-5


def test_zero_input_zero_weight_grads():
    net = conv_net()
    _, gw = backward(net, forward(net, np.zeros((2, 6, 6))))
    assert all(not np.any(g) for g in gw)


def test_per_sample_norms_match_individual_backward():
    net = conv_net(seed=6, act="lrelu:0.2")
    xs = make_rng(7).standard_normal((4, 2, 6, 6))
    norms = per_sample_grad_norms(net, forward(net, xs))
    for b in range(4):
        _, gw = backward(net, forward(net, xs[b]))
        np.testing.assert_allclose(norms[b], [np.linalg.norm(g) for g in gw], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 2**31 - 1))
def test_positive_homogeneity(c, seed):
    net = random_dense_net(L=3, width=8, in_dim=4, seed=seed % 1000)
    x = make_rng(seed).standard_normal(4)
    assert forward(net, c * x).output == pytest.approx(c * forward(net, x).output, rel=1e-10, abs=1e-12)


# --- bounds -----------------------------------------------------------------

def test_sn_bound_simplifies_to_x_norm():
    net = strict_normalize(random_dense_net(seed=1))
    x = make_rng(2).standard_normal(16)
    sig = layer_sigmas(net)
    for t in range(net.L):
        assert layer_grad_bound(net, x, t, sig) == pytest.approx(np.linalg.norm(x), rel=1e-9)
    assert overall_grad_bound(net, x, sig) == pytest.approx(2 * np.linalg.norm(x), rel=1e-9)


def test_sigmoid_bound_quarter():
    net = strict_normalize(random_dense_net(seed=1, final="sigmoid"))
    x = make_rng(2).standard_normal(16)
    assert layer_grad_bound(net, x, 0) == pytest.approx(0.25 * np.linalg.norm(x), rel=1e-9)


def test_bound_dominates_gradients_unnormalized():
    net = random_dense_net(seed=5, width=12)
    sig = layer_sigmas(net)
    for x in make_rng(6).standard_normal((20, 16)):
        _, gw = backward(net, forward(net, x))
        for t, g in enumerate(gw):
            assert np.linalg.norm(g) <= layer_grad_bound(net, x, t, sig) * (1 + 1e-6)


def test_zero_sigma_bound_error():
    net = random_dense_net(L=2, width=3, in_dim=2)
    with pytest.raises(BoundError):
        layer_grad_bound(net, np.ones(2), 0, [0.0, 1.0])


def test_layer_sigmas_conv_is_operator_norm():
    net = conv_net(seed=8)
    sig = layer_sigmas(net)
    lay = net.layers[1]
    M = explicit_conv_matrix(lay.weight, lay.input_shape, lay.stride, lay.pad)
    assert sig[1] == pytest.approx(np.linalg.svd(M, compute_uv=False)[0], abs=1e-9)


def test_raw_weight_grads_match_finite_differences():
    raw = random_dense_net(L=3, width=5, in_dim=4, seed=9, activation="lrelu:0.2")
    raw = raw.with_layers(raw.layers, NormMode("sn_w", 1.3))
    x = make_rng(10).standard_normal((1, 4))
    grads = raw_weight_grads(raw, x)

    def D(net):
        return float(forward(net.normalized(iter_mode=STRICT, rng=0), x).output[0])

    h = 1e-6
    for t, w in enumerate(raw.weights):
        E = make_rng(11 + t).standard_normal(w.shape)
        fd = (D(raw.with_weight(t, w + h * E)) - D(raw.with_weight(t, w - h * E))) / (2 * h)
        assert np.vdot(grads[t], E) == pytest.approx(fd, rel=1e-5, abs=1e-9)


# --- second order -----------------------------------------------------------

def test_hvp_zero_direction_and_h_range():
    net = random_dense_net(L=2, width=3, in_dim=2)
    assert not np.any(hvp(net, np.ones(2), 0, np.zeros((3, 2))))
    with pytest.raises(ValueError):
        hvp(net, np.ones(2), 0, np.ones((3, 2)), h=1e-2)


def test_hvp_vanishes_identity_final():
    net = strict_normalize(random_dense_net(seed=12))
    x = _kinkless_input(net, make_rng(13), (16,))
    for t in range(net.L):
        v = make_rng(t).standard_normal(net.weights[t].shape)
        assert np.linalg.norm(hvp(net, x, t, v)) < 1e-6 * np.linalg.norm(v) * (1 + x @ x)


def test_hvp_one_layer_sigmoid_closed_form():
    rng = make_rng(14)
    w = rng.standard_normal((1, 6))
    x = rng.standard_normal(6)
    v = rng.standard_normal((1, 6))
    net = Network((Layer("dense", w, Activation("sigmoid")),))
    s = _sig(float(w[0] @ x))
    curv = s * (1 - s) * (1 - 2 * s)
    expected = curv * float(x @ v[0]) * x
    np.testing.assert_allclose(hvp(net, x, 0, v)[0], expected, atol=1e-6)


def test_hessian_sigma_one_layer_sigmoid_rank_one():
    rng = make_rng(15)
    w = rng.standard_normal((1, 5))
    x = rng.standard_normal(5)
    net = Network((Layer("dense", w, Activation("sigmoid")),))
    s = _sig(float(w[0] @ x))
    expected = abs(s * (1 - s) * (1 - 2 * s)) * float(x @ x)
    est, ok = hessian_sigma_estimate(net, x, 0)
    assert ok and est == pytest.approx(expected, rel=1e-5)


def test_hessian_identity_final_zero():
    net = strict_normalize(random_dense_net(seed=16))
    x = _kinkless_input(net, make_rng(17), (16,))
    for t in range(net.L):
        est, ok = hessian_sigma_estimate(net, x, t)
        assert ok and est < 1e-5


def test_hessian_sigmoid_final_bounded():
    net = strict_normalize(random_dense_net(seed=18, final="sigmoid"))
    for x in make_rng(19).standard_normal((5, 16)):
        if not all(kink_free(net, x, t, 1e-4) for t in range(net.L)):
            continue
        for t in range(net.L):
            est, ok = hessian_sigma_estimate(net, x, t)
            assert ok and est <= 0.1 * float(x @ x) * (1 + 1e-3)


# --- JSON -------------------------------------------------------------------

def test_network_json_roundtrip(tmp_path):
    net = conv_net(seed=20, final="sigmoid", act="lrelu:0.1")
    net = net.with_layers(net.layers, NormMode("bsn", 2.0))
    d = json.loads(json.dumps(network_to_dict(net)))
    back = network_from_dict(d)
    assert back.norm_mode == NormMode("bsn", 2.0)
    for a, b in zip(back.weights, net.weights):
        np.testing.assert_array_equal(a, b)
    p = tmp_path / "arch.json"
    p.write_text(json.dumps(network_to_dict(net, include_weights=False)))
    arch = load_architecture(p)
    assert build_network(arch, seed=1).layers[0].activation == Activation("lrelu", 0.1)


def test_build_network_deterministic():
    a, b = conv_net(seed=21), conv_net(seed=21)
    for x, y in zip(a.weights, b.weights):
        np.testing.assert_array_equal(x, y)
