"""Numerical checks of the gradient, rescaling, allocation, variance and
Hessian results for spectrally normalized discriminators.

Each ``check_*`` function is deterministic given its seed and returns a
:class:`CheckReport` holding a pass flag, the extremal measured value and the
raw per-sample rows (written to CSV by the CLI).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .nn import (STRICT, Activation, Layer, Network, _backprop, backward, build_network,
                 forward, hessian_sigma_estimate, kink_free, layer_sigmas, per_sample_grad_norms,
                 raw_weight_grads)
from .specnorm import NormMode, apply_normalization
from .tensor import InitScheme, make_rng, power_iteration

__all__ = [
    "CheckReport",
    "VarianceReport",
    "RatioScan",
    "PreconditionError",
    "random_dense_net",
    "strict_normalize",
    "check_gradient_bound",
    "check_rescaling_equivalence",
    "random_scale_vector",
    "optimal_allocation",
    "allocation_objective",
    "check_allocation_optimality",
    "mc_variance_sn",
    "mc_variance_bsn",
    "check_internal_bounds",
    "internal_bound_tightness",
    "setd_ratio_scan",
    "setd_member_network",
    "check_hessian_bounds",
]

MC_CHUNK = 500


class PreconditionError(ValueError):
    pass


@dataclass
class CheckReport:
    name: str
    passed: bool
    value: float
    details: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def summary(self):
        return {"suite": self.name, "pass": bool(self.passed), "value": self.value, **self.details}


@dataclass
class VarianceReport:
    shape: tuple
    dist: str
    trials: int
    empirical_var: float
    upper_bound: float
    lower_qualitative: float
    centered_var: float

    @property
    def slack(self):
        return 3.0 / math.sqrt(self.trials)

    @property
    def passed(self):
        return 0.0 < self.empirical_var <= self.upper_bound * (1.0 + self.slack)

    def to_dict(self):
        return {"shape": list(self.shape), "dist": self.dist, "trials": self.trials,
                "empirical_var": self.empirical_var, "upper_bound": self.upper_bound,
                "lower_qualitative": self.lower_qualitative, "centered_var": self.centered_var,
                "tolerance": self.slack, "pass": self.passed}


@dataclass
class RatioScan:
    rows: list
    """``(checkpoint, rescaling, i, j, grad_norm_ratio, inverse_sigma_ratio)`` tuples."""

    @property
    def pairs(self):
        return np.array([(r[4], r[5]) for r in self.rows]).reshape(-1, 2)

    def log_deviation(self):
        p = self.pairs
        if not len(p):
            return 0.0
        return float(np.max(np.abs(np.log(p[:, 0]) - np.log(p[:, 1]))))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def random_dense_net(L=4, width=32, in_dim=16, final="identity", activation="relu",
                     seed=0, init=None) -> Network:
    layers = [{"kind": "dense", "out": width, "activation": activation} for _ in range(L - 1)]
    layers.append({"kind": "dense", "out": 1})
    arch = {"input_shape": [in_dim], "layers": layers, "final": final}
    return build_network(arch, init or InitScheme("gaussian"), seed=seed)


def strict_normalize(net: Network, scale=1.0) -> Network:
    """Divide every layer by its true operator norm (full convolution for conv layers)."""
    eff, _, _ = apply_normalization(net, NormMode(_strict_kind(net), scale), iter_mode=STRICT, rng=0)
    return eff


def _strict_kind(net):
    return "sn_conv" if any(lay.kind == "conv" for lay in net.layers) else "sn_w"


def _inputs(net, num, rng):
    rng = make_rng(rng)
    return rng.standard_normal((num,) + tuple(net.input_shape))


# --------------------------------------------------------------------------
# gradient bound and internal bounds
# --------------------------------------------------------------------------

def check_gradient_bound(net: Network, num_inputs=100, rng=0, inputs=None) -> CheckReport:
    """Compare ``||grad_theta D||_F`` with ``sqrt(L) ||x|| prod Lip``.

    ``net`` must already carry normalized weights (every operator norm <= 1).
    Also checks every per-layer gradient against ``||x|| prod Lip`` and the
    internal output/gradient chains on each sample.
    """
    xs = _inputs(net, num_inputs, rng) if inputs is None else np.asarray(inputs, dtype=np.float64)
    sigmas = layer_sigmas(net)
    lip = math.prod(lay.activation.lipschitz for lay in net.layers)
    L = net.L
    trace = forward(net, xs)
    norms = per_sample_grad_norms(net, trace)
    rows, max_ratio, max_layer_ratio = [], 0.0, 0.0
    internal_ok = True
    for b, x in enumerate(xs):
        nx = float(np.linalg.norm(x))
        total = float(np.sqrt(np.sum(norms[b] ** 2)))
        if nx == 0.0:
            ratio, lratios = 0.0, np.zeros(L)
        else:
            ratio = total / (math.sqrt(L) * nx * lip)
            lratios = norms[b] / (nx * lip)
        internal_ok &= check_internal_bounds(net, x, sigmas).passed
        max_ratio = max(max_ratio, ratio)
        max_layer_ratio = max(max_layer_ratio, float(np.max(lratios)))
        rows.append([b, nx, total, ratio] + lratios.tolist())
    passed = max_ratio <= 1 + 1e-6 and max_layer_ratio <= 1 + 1e-6 and internal_ok
    return CheckReport("prop1", passed, max_ratio,
                       {"max_layer_ratio": max_layer_ratio, "internal_bounds_hold": bool(internal_ok),
                        "sigmas": sigmas, "final": str(net.final), "L": L},
                       rows)


def check_internal_bounds(net: Network, x, sigmas=None, rtol=1e-9) -> CheckReport:
    """Verify the four per-layer chains for one input.

    ``||o_a^t|| <= ||x|| prod_{i<=t} Lip_i sigma_i``,
    ``||o_l^t|| <= ||x|| prod_{i<t} Lip_i prod_{i<=t} sigma_i``,
    ``||dD/do_a^t|| <= prod_{i>t} Lip_i sigma_i`` and
    ``||dD/do_l^t|| <= prod_{i>=t} Lip_i prod_{i>t} sigma_i``.
    """
    sigmas = layer_sigmas(net) if sigmas is None else list(sigmas)
    lips = [lay.activation.lipschitz for lay in net.layers]
    trace = forward(net, x)
    deltas, _ = _backprop(net, trace, None)
    nx = float(np.linalg.norm(x))
    L = net.L
    rows, worst = [], 0.0
    for t in range(L):
        oa = float(np.linalg.norm(trace.post[t]))
        ol = float(np.linalg.norm(trace.pre[t]))
        g_ol = float(np.linalg.norm(deltas[t]))
        if t + 1 < L:
            g_oa = float(np.linalg.norm(net.layers[t + 1].linear_adjoint(deltas[t + 1])))
        else:
            g_oa = 1.0
        b_oa = nx * math.prod(lips[:t + 1]) * math.prod(sigmas[:t + 1])
        b_ol = nx * math.prod(lips[:t]) * math.prod(sigmas[:t + 1])
        b_goa = math.prod(lips[t + 1:]) * math.prod(sigmas[t + 1:])
        b_gol = math.prod(lips[t:]) * math.prod(sigmas[t + 1:])
        checks = [("o_l", ol, b_ol), ("grad_o_a", g_oa, b_goa), ("grad_o_l", g_ol, b_gol)]
        if net.layers[t].activation.kind != "sigmoid":
            # the output chain needs a(0) = 0, which sigmoid lacks
            checks.insert(0, ("o_a", oa, b_oa))
        for name, val, bound in checks:
            worst = max(worst, val / bound if bound > 0 else (0.0 if val == 0 else math.inf))
            rows.append([t, name, val, bound, val <= bound * (1 + rtol)])
    passed = all(r[4] for r in rows)
    return CheckReport("internal", passed, worst, {"L": L}, rows)


def internal_bound_tightness(n=8, seed=0, norm=3.0):
    """One-layer identity net with ``x`` along the top right singular vector.

    Returns ``||o_l^1|| / (sigma ||x||)``, which should be exactly one.
    """
    rng = make_rng(seed)
    w = rng.standard_normal((1, n))
    net = Network((Layer("dense", w, Activation("identity")),))
    sigma, st = power_iteration(lambda v: w @ v, lambda u: w.T @ u, ((n,), (1,)),
                                mode="converge", tol=1e-14, rng=seed)
    x = norm * st.v
    ol = float(np.linalg.norm(forward(net, x).pre[0]))
    return ol / (sigma * np.linalg.norm(x))


# --------------------------------------------------------------------------
# rescaling and allocation
# --------------------------------------------------------------------------

def random_scale_vector(L, rng=0, log_std=1.0):
    """Positive vector with product one: centered log-normal draws."""
    z = make_rng(rng).normal(0.0, log_std, size=L)
    return np.exp(z - z.mean())


def check_rescaling_equivalence(net: Network, c, num_inputs=50, rng=0, inputs=None) -> CheckReport:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (net.L,) or np.any(c <= 0):
        raise PreconditionError("need one positive scale per layer")
    if abs(float(np.prod(c)) - 1.0) > 1e-12:
        raise PreconditionError(f"scales must multiply to one, got {np.prod(c)!r}")
    xs = _inputs(net, num_inputs, rng) if inputs is None else np.asarray(inputs, dtype=np.float64)
    other = net.scaled(c)
    t1, t2 = forward(net, xs), forward(other, xs)
    gx1, _ = backward(net, t1)
    gx2, _ = backward(other, t2)
    d1, d2 = t1.output, t2.output
    out_dev = np.abs(d1 - d2)
    grad_dev = np.linalg.norm((gx1 - gx2).reshape(len(xs), -1), axis=1)
    scale = 1.0 + np.abs(d1)
    rel = np.maximum(out_dev, grad_dev) / scale
    rows = [[b, float(d1[b]), float(d2[b]), float(out_dev[b]), float(grad_dev[b])] for b in range(len(xs))]
    return CheckReport("prop2", bool(np.all(rel < 1e-9)), float(rel.max()),
                       {"max_out_dev": float(out_dev.max()), "max_gradx_dev": float(grad_dev.max()),
                        "c": c.tolist()}, rows)


def optimal_allocation(sigmas):
    """Scales ``c_t = lambda / sigma_t`` with ``lambda`` the geometric mean of ``sigmas``."""
    s = np.asarray(sigmas, dtype=np.float64)
    if s.ndim != 1 or not np.all(s > 0):
        raise PreconditionError("spectral norms must be positive")
    lam = float(np.exp(np.mean(np.log(s))))
    return lam / s


def allocation_objective(c, sigmas, Q=1.0):
    """``sqrt(sum_i Q^2 / (c_i sigma_i)^2)``: the overall gradient norm inside set D."""
    c = np.asarray(c, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    return float(np.sqrt(np.sum(Q ** 2 / (c * s) ** 2)))


def check_allocation_optimality(sigmas, Q=1.0, num_random_c=1000, rng=0, log_std=1.0) -> CheckReport:
    s = np.asarray(sigmas, dtype=np.float64)
    L = len(s)
    c_opt = optimal_allocation(s)
    lam = float(np.exp(np.mean(np.log(s))))
    f_opt = allocation_objective(c_opt, s, Q)
    expected = math.sqrt(L) * Q / lam
    gen = make_rng(rng)
    rows, f_min = [], math.inf
    for k in range(num_random_c):
        c = random_scale_vector(L, gen, log_std)
        f = allocation_objective(c, s, Q)
        f_min = min(f_min, f)
        rows.append([k, f] + c.tolist())
    closed_ok = abs(f_opt - expected) <= 1e-9
    never_beaten = f_min >= f_opt - 1e-9
    return CheckReport("thm2", bool(closed_ok and never_beaten), f_opt,
                       {"expected": expected, "min_random": f_min, "c_opt": c_opt.tolist(),
                        "lambda": lam, "prod_c_opt": float(np.prod(c_opt))}, rows)


# --------------------------------------------------------------------------
# Monte Carlo variance
# --------------------------------------------------------------------------

def _draw(rng, dist, size):
    if dist == "gaussian":
        return rng.standard_normal(size)
    if dist == "uniform":
        return rng.uniform(-1.0, 1.0, size)
    raise ValueError(f"unknown distribution {dist!r}")


def _sn_chunk(args):
    seq, m, n, dist, count = args
    rng = make_rng(seq)
    A = _draw(rng, dist, (count, m, n))
    sig = np.linalg.svd(A, compute_uv=False)[:, 0]
    Z = A / sig[:, None, None]
    return float(np.sum(Z * Z)), float(np.sum(Z)), Z.size


def _bsn_chunk(args):
    seq, shape, dist, count = args
    rng = make_rng(seq)
    c_out, c_in, kh, kw = shape
    K = _draw(rng, dist, (count,) + tuple(shape))
    W1 = K.reshape(count, c_out, -1)
    W2 = K.transpose(0, 2, 1, 3, 4).reshape(count, c_in, -1)
    s1 = np.linalg.svd(W1, compute_uv=False)[:, 0]
    s2 = np.linalg.svd(W2, compute_uv=False)[:, 0]
    Z = K / (0.5 * (s1 + s2))[:, None, None, None, None]
    return float(np.sum(Z * Z)), float(np.sum(Z)), Z.size


def _run_chunks(fn, make_args, trials, seed, workers):
    n_chunks = max(1, math.ceil(trials / MC_CHUNK))
    seqs = np.random.SeedSequence(seed).spawn(n_chunks)
    sizes = [min(MC_CHUNK, trials - i * MC_CHUNK) for i in range(n_chunks)]
    jobs = [make_args(sq, k) for sq, k in zip(seqs, sizes)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(fn, jobs))
    else:
        parts = [fn(j) for j in jobs]
    sq = math.fsum(p[0] for p in parts)
    s = math.fsum(p[1] for p in parts)
    count = sum(p[2] for p in parts)
    mean = s / count
    return sq / count, sq / count - mean * mean


def mc_variance_sn(m, n, dist="gaussian", trials=10000, rng=0, workers=1) -> VarianceReport:
    """Pooled variance of ``a_ij / sigma(A)`` over i.i.d. random matrices.

    The variance uses the known zero mean (mean of squares); the centered
    sample variance is reported alongside.
    """
    if trials < 1000:
        raise PreconditionError("need at least 1000 trials")
    var, centered = _run_chunks(_sn_chunk, lambda sq, k: (sq, m, n, dist, k), trials, rng, workers)
    lower = 1.0 / (max(m, n) * math.log(min(m, n))) if min(m, n) >= 2 else float("nan")
    return VarianceReport((m, n), dist, trials, var, 1.0 / max(m, n), lower, centered)


def mc_variance_bsn(shape, trials=10000, rng=0, dist="gaussian", workers=1) -> VarianceReport:
    """Pooled variance of ``w_ij / sigma_w`` with ``sigma_w = (sigma(W1) + sigma(W2)) / 2``."""
    if trials < 1000:
        raise PreconditionError("need at least 1000 trials")
    c_out, c_in, kh, kw = (int(d) for d in shape)
    if kh * kw < max(c_out / c_in, c_in / c_out):
        raise PreconditionError("need kh*kw >= max(c_out/c_in, c_in/c_out)")
    shape = (c_out, c_in, kh, kw)
    var, centered = _run_chunks(_bsn_chunk, lambda sq, k: (sq, shape, dist, k), trials, rng, workers)
    n_in, n_out = c_in * kh * kw, c_out * kh * kw
    bound = 2.0 / (n_in + n_out)
    if min(c_in, c_out) >= 2:
        lower = 1.0 / (n_in * math.log(c_out) + n_out * math.log(c_in))
    else:
        lower = float("nan")
    return VarianceReport(shape, dist, trials, var, bound, lower, centered)


# --------------------------------------------------------------------------
# set-D ratio scan
# --------------------------------------------------------------------------

def _geo_mean(x):
    return float(np.exp(np.mean(np.log(x))))


def setd_ratio_scan(checkpoints, rescalings=4, inputs=None, target_geo_mean=1.0, rng=0,
                    gradient="normalized", num_inputs=64) -> RatioScan:
    """Per-layer gradient-norm ratios against inverse spectral-norm ratios.

    Each checkpoint (a raw :class:`Network`) is strictly normalized, then
    rescaled by random ``c`` chosen so the geometric mean of the rescaled
    spectral norms equals ``target_geo_mean``. Gradient norms are averaged
    over the inputs before forming ratios. Rescaling index ``-1`` is the
    unscaled checkpoint.
    """
    gen = make_rng(rng)
    rows = []
    for k, raw in enumerate(checkpoints):
        xs = (_inputs(raw, num_inputs, gen) if inputs is None
              else np.asarray(inputs, dtype=np.float64)[:num_inputs])
        base = strict_normalize(raw) if raw.norm_mode.kind != "none" else raw
        base_sig = np.asarray(layer_sigmas(base))
        for r in range(-1, rescalings):
            c = np.ones(base.L) if r < 0 else random_scale_vector(base.L, gen)
            c = c * target_geo_mean / _geo_mean(c * base_sig)
            sig = c * base_sig
            if gradient == "raw" and raw.norm_mode.kind != "none":
                strict = raw.with_layers(raw.layers, NormMode(_strict_kind(raw), 1.0))
                g = np.zeros(raw.L)
                for x in xs:
                    grads = raw_weight_grads(strict, x[None], scales=c)
                    g += [np.linalg.norm(gr) for gr in grads]
                g /= len(xs)
            else:
                net = base.scaled(c)
                g = per_sample_grad_norms(net, forward(net, xs)).mean(axis=0)
            for i in range(base.L):
                for j in range(i + 1, base.L):
                    rows.append((k, r, i, j, float(g[i] / g[j]), float(sig[j] / sig[i])))
    return RatioScan(rows)


def setd_member_network(L=3, n=6, c=None, seed=0):
    """A network exactly inside set D: scaled permutation matrices and positive inputs.

    With nonnegative weights and inputs every ReLU passes its input through,
    so per-layer gradient norms scale as ``prod(c) / c_t``.
    Returns ``(network, inputs)``.
    """
    rng = make_rng(seed)
    c = np.ones(L) if c is None else np.asarray(c, dtype=np.float64)
    layers = []
    for t in range(L - 1):
        P = np.eye(n)[rng.permutation(n)]
        layers.append(Layer("dense", c[t] * P, Activation("relu")))
    row = np.abs(rng.standard_normal((1, n))) + 0.1
    layers.append(Layer("dense", c[-1] * row / np.linalg.norm(row), Activation("identity")))
    xs = np.abs(rng.standard_normal((64, n))) + 0.01
    return Network(tuple(layers)), xs


# --------------------------------------------------------------------------
# Hessian
# --------------------------------------------------------------------------

def check_hessian_bounds(net: Network, inputs, iters=100, h=1e-4, rng=0, max_resample=20) -> CheckReport:
    """Per-layer Hessian spectral norms against their bounds.

    General bound: ``|a_L''(o_l^L)| ||x||^2 prod sigma_i^2 / sigma_t^2``.
    Sigmoid-final nets must also satisfy ``<= 0.1 ||x||^2``; identity-final
    nets must give (numerically) zero. Inputs whose difference stencil would
    straddle a ReLU kink are redrawn from ``rng``.
    """
    xs = np.asarray(inputs, dtype=np.float64)
    gen = make_rng(rng)
    sigmas = layer_sigmas(net)
    final = net.final
    rows, worst, all_ok, resampled = [], 0.0, True, 0
    for b, x in enumerate(xs):
        for _ in range(max_resample):
            if all(kink_free(net, x, t, h) for t in range(net.L)):
                break
            x = gen.standard_normal(x.shape)
            resampled += 1
        nx2 = float(np.dot(x.ravel(), x.ravel()))
        z = forward(net, x).pre[-1].reshape(-1)
        curv = float(np.abs(final.second_deriv(z))[0])
        for t in range(net.L):
            est, ok = hessian_sigma_estimate(net, x, t, iters=iters, h=h)
            bound = curv * nx2 * math.prod(s * s for i, s in enumerate(sigmas) if i != t)
            if final.kind == "identity":
                passed = est < 1e-5 * nx2 or nx2 == 0.0
                ratio = est / nx2 if nx2 > 0 else 0.0
            else:
                passed = est <= bound * (1 + 1e-3) + 1e-12 and est <= 0.1 * nx2 * (1 + 1e-3)
                ratio = est / (0.1 * nx2) if nx2 > 0 else 0.0
            passed = bool(passed and ok)
            all_ok &= passed
            worst = max(worst, ratio)
            rows.append([b, t, est, bound, 0.1 * nx2, bool(ok), passed])
    return CheckReport("hessian", all_ok, worst,
                       {"final": str(final), "sigmas": sigmas, "resampled": resampled}, rows)
