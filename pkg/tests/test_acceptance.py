"""Acceptance criteria, one test each; a pass/fail summary line per criterion
is printed at the end of the pytest run."""

import itertools
import math

import numpy as np
import pytest

from spectralgan.gan import RingDataset, make_models, ring_config, train
from spectralgan.nn import backward, build_network, forward, kink_free
from spectralgan.specnorm import IterMode, conv_sigma, kernel_sigma
from spectralgan.tensor import conv_output_shape, explicit_conv_matrix, make_rng
from spectralgan.theorems import (check_allocation_optimality, check_gradient_bound,
                                  check_hessian_bounds, check_rescaling_equivalence,
                                  internal_bound_tightness, mc_variance_bsn, mc_variance_sn,
                                  random_dense_net, random_scale_vector, strict_normalize)

TIGHT = IterMode("converge", tol=1e-13, max_iters=20000)


@pytest.mark.criterion(1, "gradient-norm bound", budget=10)
def test_c01_gradient_bound(criterion):
    ident = check_gradient_bound(strict_normalize(random_dense_net(L=4, seed=11)), 100, rng=1)
    sig = check_gradient_bound(strict_normalize(random_dense_net(L=4, seed=12, final="sigmoid")),
                               100, rng=2)
    criterion.note(f"max ratio {ident.value:.6f}, sigmoid layer ratio {sig.details['max_layer_ratio']:.6f}")
    assert ident.value <= 1 + 1e-6
    # per-layer ratios are relative to 0.25 ||x|| for the sigmoid net
    assert sig.details["max_layer_ratio"] <= 1 + 1e-6
    assert ident.passed and sig.passed
    criterion.check_time()


@pytest.mark.criterion(2, "rescaling invariance", budget=5)
def test_c02_rescaling(criterion):
    net = random_dense_net(L=4, seed=21, activation="lrelu:0.2")
    worst = 0.0
    for k in range(20):
        rep = check_rescaling_equivalence(net, random_scale_vector(4, rng=100 + k), 50, rng=k)
        worst = max(worst, rep.value)
        assert rep.passed
    criterion.note(f"max rel dev {worst:.2e}")
    assert worst < 1e-9
    criterion.check_time()


@pytest.mark.criterion(3, "optimal scale allocation", budget=1)
def test_c03_allocation(criterion):
    sig = np.abs(make_rng(31).standard_normal(5)) + 0.1
    rep = check_allocation_optimality(sig, Q=1.7, num_random_c=1000, rng=32)
    criterion.note(f"F(c_opt)={rep.value:.6f}, min random {rep.details['min_random']:.6f}")
    assert abs(rep.value - rep.details["expected"]) <= 1e-9
    assert rep.details["min_random"] >= rep.value - 1e-9
    criterion.check_time()


@pytest.mark.criterion(4, "Monte Carlo variance, matrices", budget=60)
def test_c04_variance_sn(criterion):
    exact = mc_variance_sn(1, 1, trials=10000, rng=40)
    assert exact.empirical_var == exact.upper_bound == 1.0
    worst = 0.0
    for (m, n), dist in itertools.product([(3, 3), (64, 64), (3, 100)], ["gaussian", "uniform"]):
        rep = mc_variance_sn(m, n, dist=dist, trials=10000, rng=41)
        worst = max(worst, rep.empirical_var / rep.upper_bound)
        assert rep.empirical_var <= rep.upper_bound * (1 + 3 / math.sqrt(10000)), (m, n, dist)
        assert rep.passed
    criterion.note(f"max var/bound {worst:.4f}")
    criterion.check_time()


@pytest.mark.criterion(5, "Monte Carlo variance, kernels", budget=60)
def test_c05_variance_bsn(criterion):
    exact = mc_variance_bsn((1, 1, 1, 1), trials=10000, rng=50)
    assert exact.empirical_var == exact.upper_bound == 1.0
    worst = 0.0
    for shape, dist in itertools.product([(3, 3, 3, 3), (8, 4, 3, 3)], ["gaussian", "uniform"]):
        rep = mc_variance_bsn(shape, trials=10000, rng=51, dist=dist)
        c_out, c_in, kh, kw = shape
        assert rep.upper_bound == pytest.approx(2 / (c_in * kh * kw + c_out * kh * kw))
        worst = max(worst, rep.empirical_var / rep.upper_bound)
        assert rep.passed, (shape, dist)
    criterion.note(f"max var/bound {worst:.4f}")
    criterion.check_time()


@pytest.mark.criterion(6, "reshaped norm below conv operator norm", budget=30)
def test_c06_lower_inequality(criterion):
    geos = [((2, 3, 3, 3), (3, 6, 6), 1, 1), ((4, 2, 3, 3), (2, 5, 5), 1, 0),
            ((3, 3, 2, 2), (3, 6, 6), 2, 0), ((2, 1, 5, 5), (1, 7, 7), 1, 2),
            ((1, 4, 3, 3), (4, 4, 4), 1, 1)]
    worst = -math.inf
    for seed in range(100):
        shape, inp, stride, pad = geos[seed % len(geos)]
        k = make_rng(600 + seed).standard_normal(shape)
        s1, _ = kernel_sigma(k, "out_grouped", TIGHT, rng=seed)
        sc, _ = conv_sigma(k, inp, stride, pad, TIGHT, rng=seed)
        worst = max(worst, s1 - sc)
        assert s1 <= sc + 1e-6
    criterion.note(f"max sigma_w1 - sigma_conv {worst:.3g}")
    criterion.check_time()


@pytest.mark.criterion(7, "Hessian spectral norm", budget=60)
def test_c07_hessian(criterion):
    xs = make_rng(70).standard_normal((100, 8))
    ident = check_hessian_bounds(strict_normalize(random_dense_net(L=3, width=16, in_dim=8, seed=71)),
                                 xs, iters=20, rng=72)
    sig = check_hessian_bounds(strict_normalize(random_dense_net(L=3, width=16, in_dim=8, seed=73,
                                                                 final="sigmoid")),
                               xs, iters=20, rng=74)
    criterion.note(f"identity max H/||x||^2 {ident.value:.2e}; sigmoid max H/(0.1||x||^2) {sig.value:.4f}")
    assert ident.passed and ident.value < 1e-5
    assert sig.passed and sig.value <= 1 + 1e-3
    criterion.check_time()


@pytest.mark.criterion(8, "internal layer-wise bounds")
def test_c08_internal(criterion):
    for seed, final in [(81, "identity"), (82, "sigmoid")]:
        rep = check_gradient_bound(strict_normalize(random_dense_net(L=4, seed=seed, final=final)),
                                   100, rng=seed)
        assert rep.details["internal_bounds_hold"]
    ratios = [internal_bound_tightness(n=8, seed=s) for s in range(5)]
    criterion.note(f"equality case max |ratio-1| {max(abs(r - 1) for r in ratios):.2e}")
    assert all(abs(r - 1) <= 1e-6 for r in ratios)


def _geometries():
    for c_in, hw, k, stride, pad, c_out in itertools.product(
            [1, 3], [4, 9, 16], [1, 3, 5], [1, 2], [0, 1, 2], [1, 4]):
        if k > hw + 2 * pad or pad >= k:
            continue
        yield (c_out, c_in, k, k), (c_in, hw, hw), stride, pad
    yield (1, 4, 3, 3), (4, 32, 32), 1, 1
    yield (2, 16, 2, 2), (16, 16, 16), 2, 0


@pytest.mark.criterion(9, "oracle equivalence (conv norm, backward)")
def test_c09_oracles(criterion):
    count, worst = 0, 0.0
    for i, (kshape, inp, stride, pad) in enumerate(_geometries()):
        assert math.prod(inp) <= 4096
        conv_output_shape(inp, kshape, stride, pad)
        k = make_rng(900 + i).standard_normal(kshape)
        s, _ = conv_sigma(k, inp, stride, pad, TIGHT, rng=i)
        oracle = np.linalg.norm(explicit_conv_matrix(k, inp, stride, pad), 2)
        worst = max(worst, abs(s - oracle))
        assert abs(s - oracle) <= 1e-6, (kshape, inp, stride, pad)
        count += 1

    arch = {"input_shape": [2, 6, 6],
            "layers": [{"kind": "conv", "c_out": 3, "k": 3, "pad": 1, "activation": "lrelu:0.1"},
                       {"kind": "conv", "c_out": 2, "k": 3, "stride": 2, "activation": "relu"},
                       {"kind": "dense", "out": 5, "activation": "lrelu:0.2"},
                       {"kind": "dense", "out": 1}], "final": "sigmoid"}
    nets = [build_network(arch, seed=91), random_dense_net(L=4, width=7, in_dim=5, seed=92)]
    fd_worst = 0.0
    for j, net in enumerate(nets):
        rng = make_rng(93 + j)
        for _ in range(50):
            x = rng.standard_normal(tuple(net.input_shape))
            if all(kink_free(net, x, t, 1e-4) for t in range(net.L)):
                break
        _, gw = backward(net, forward(net, x))
        h = 1e-5
        for t, w in enumerate(net.weights):
            fd = np.zeros_like(w)
            for idx in np.ndindex(w.shape):
                e = np.zeros_like(w)
                e[idx] = h
                fd[idx] = (forward(net.with_weight(t, w + e), x).output
                           - forward(net.with_weight(t, w - e), x).output) / (2 * h)
            rel = np.max(np.abs(gw[t] - fd)) / max(np.max(np.abs(gw[t])), 1e-12)
            fd_worst = max(fd_worst, rel)
    criterion.note(f"{count} geometries, max |dsigma| {worst:.1e}, max FD rel {fd_worst:.1e}")
    assert fd_worst < 1e-5


@pytest.mark.criterion(10, "ring8 training instrumentation and coverage", budget=900)
def test_c10_training(criterion):
    coverages, sigma_range = [], [math.inf, -math.inf]
    for seed in range(3):
        cfg = ring_config(seed=seed)
        ds = RingDataset()
        gen, disc = make_models(cfg, ds)
        res = train(gen, disc, ds, cfg)
        assert res.metrics
        for r in res.metrics:
            assert r.param_var <= r.var_bound, (seed, r.iter, r.layer)
            assert r.grad_fro <= r.grad_bound * (1 + 1e-3), (seed, r.iter, r.layer)
            if r.iter >= 1000:
                sigma_range[0] = min(sigma_range[0], r.sigma_w1)
                sigma_range[1] = max(sigma_range[1], r.sigma_w1)
        coverages.append(res.metrics[-1].mode_coverage)
    mean_cov = float(np.mean(coverages))
    criterion.note(f"coverage {coverages} mean {mean_cov:.3f}; "
                   f"sigma_w1 in [{sigma_range[0]:.4f}, {sigma_range[1]:.4f}]")
    assert 0.9 <= sigma_range[0] and sigma_range[1] <= 1.1
    assert mean_cov >= 7 / 8
    criterion.check_time()


@pytest.mark.criterion(11, "deterministic metrics CSV")
def test_c11_determinism(criterion, tmp_path):
    blobs = []
    for k in range(2):
        out = tmp_path / str(k)
        out.mkdir()
        cfg = ring_config(seed=7, iters=400, log_every=100)
        ds = RingDataset()
        gen, disc = make_models(cfg, ds)
        train(gen, disc, ds, cfg, out_dir=out)
        blobs.append((out / "metrics.csv").read_bytes())
    criterion.note(f"{len(blobs[0])} bytes")
    assert blobs[0] == blobs[1]
