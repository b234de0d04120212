"""Small-scale adversarial training with per-step spectral normalization.

The discriminator is a bias-free :class:`~spectralgan.nn.Network` whose raw
weights are renormalized before every forward pass using warm-started power
iteration. The generator is a plain MLP with biases.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .data import RingSpec, mode_coverage, sample_ring, write_csv
from .nn import (STRICT, Activation, Network, _sigmoid, backward, build_network, forward,
                 layer_sigmas, network_from_dict, network_to_dict, per_sample_grad_norms)
from .specnorm import (CONVERGE, DIVISOR_EPS, DivisorZeroError, IterMode, NormMode,
                       apply_normalization, divisor_gradient, norm_divisor, sigma_report)
from .tensor import InitScheme, init_weights, make_rng, tensor_from_json, tensor_to_json

__all__ = [
    "LOSS_KINDS",
    "METRICS_COLUMNS",
    "DivergenceError",
    "discriminator_loss",
    "generator_loss",
    "AdamState",
    "adam_step",
    "Generator",
    "build_generator",
    "PointDataset",
    "RingDataset",
    "ImageDataset",
    "RING_N_DIS",
    "ring_config",
    "TrainConfig",
    "MetricsRecord",
    "TrainResult",
    "snapshot_metrics",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "write_metrics_csv",
    "make_models",
    "default_ring_arch",
    "default_mnist_arch",
]

LOSS_KINDS = ("hinge", "vanilla")
METRICS_COLUMNS = ("iter", "layer", "grad_fro", "sigma_w1", "sigma_w2", "sigma_bsn",
                   "param_var", "loss_d", "loss_g", "mode_coverage")


class DivergenceError(RuntimeError):
    """Raised when a discriminator output leaves the sane range."""

    def __init__(self, iteration, value, threshold):
        super().__init__(f"discriminator diverged at iteration {iteration}: "
                         f"|D(x)| = {value:.3g} > {threshold:.3g}")
        self.iteration = iteration
        self.value = value


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _check_kind(kind):
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {kind!r}; choose from {LOSS_KINDS}")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _d_loss_and_grads(d_real, d_fake, kind):
    _check_kind(kind)
    r = np.asarray(d_real, dtype=np.float64).reshape(-1)
    f = np.asarray(d_fake, dtype=np.float64).reshape(-1)
    if not len(r) or not len(f):
        raise ValueError("loss needs non-empty batches")
    if kind == "hinge":
        loss = np.mean(np.maximum(0.0, 1.0 - r)) + np.mean(np.maximum(0.0, 1.0 + f))
        gr = -(1.0 - r > 0).astype(np.float64) / len(r)
        gf = (1.0 + f > 0).astype(np.float64) / len(f)
    else:
        # -log sigmoid(r) = softplus(-r), -log(1 - sigmoid(f)) = softplus(f)
        loss = np.mean(_softplus(-r)) + np.mean(_softplus(f))
        gr = -_sigmoid(-r) / len(r)
        gf = _sigmoid(f) / len(f)
    return float(loss), gr.astype(np.float64), gf.astype(np.float64)


def _g_loss_and_grads(d_fake, kind):
    _check_kind(kind)
    f = np.asarray(d_fake, dtype=np.float64).reshape(-1)
    if not len(f):
        raise ValueError("loss needs a non-empty batch")
    if kind == "hinge":
        return float(-np.mean(f)), np.full(len(f), -1.0 / len(f))
    # non-saturating: -log sigmoid(f)
    return float(np.mean(_softplus(-f))), -_sigmoid(-f) / len(f)


def discriminator_loss(d_real, d_fake, loss_kind="hinge") -> float:
    """Hinge ``mean(relu(1 - r)) + mean(relu(1 + f))`` or the logistic (vanilla) loss."""
    return _d_loss_and_grads(d_real, d_fake, loss_kind)[0]


def generator_loss(d_fake, loss_kind="hinge") -> float:
    """Hinge ``-mean(f)`` or the non-saturating ``-mean(log sigmoid(f))``."""
    return _g_loss_and_grads(d_fake, loss_kind)[0]


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, alpha, beta1, beta2, eps=1e-8):
    """One bias-corrected Adam update; returns new params and a new state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"param shape {np.shape(p)} != grad shape {np.shape(g)}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - alpha * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Generator:
    """MLP ``z -> x`` with biases and leaky-ReLU hidden units."""

    weights: list
    biases: list
    output: str = "identity"
    slope: float = 0.2

    def __post_init__(self):
        if self.output not in ("identity", "sigmoid"):
            raise ValueError("generator output must be identity or sigmoid")
        self._act = Activation("lrelu", self.slope)
        self._out = Activation(self.output)

    @property
    def z_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def params(self):
        return list(self.weights) + list(self.biases)

    def with_params(self, params):
        k = len(self.weights)
        return Generator(list(params[:k]), list(params[k:]), self.output, self.slope)

    def forward(self, z):
        z = np.asarray(z, dtype=np.float64)
        hs, zs = [z], []
        h = z
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w.T + b
            zs.append(a)
            h = self._out(a) if i == len(self.weights) - 1 else self._act(a)
            hs.append(h)
        return h, (hs, zs)

    def __call__(self, z):
        return self.forward(z)[0]

    def backward(self, cache, grad_out):
        """Gradients of ``sum(grad_out * G(z))`` w.r.t. ``params``."""
        hs, zs = cache
        g = np.asarray(grad_out, dtype=np.float64)
        gw, gb = [None] * len(self.weights), [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            act = self._out if i == len(self.weights) - 1 else self._act
            g = g * act.deriv(zs[i])
            gw[i] = g.T @ hs[i]
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i]
        return gw + gb

    def sample(self, n, rng=None):
        return self(make_rng(rng).standard_normal((n, self.z_dim)))

    def to_dict(self):
        return {"output": self.output, "slope": self.slope,
                "weights": [tensor_to_json(w) for w in self.weights],
                "biases": [tensor_to_json(b) for b in self.biases]}

    @classmethod
    def from_dict(cls, d):
        return cls([tensor_from_json(w) for w in d["weights"]],
                   [tensor_from_json(b) for b in d["biases"]],
                   d.get("output", "identity"), float(d.get("slope", 0.2)))


def build_generator(z_dim, hidden, out_dim, output="identity", seed=0, slope=0.2) -> Generator:
    dims = [int(z_dim)] + [int(h) for h in hidden] + [int(out_dim)]
    children = np.random.SeedSequence(seed).spawn(len(dims) - 1)
    scheme = InitScheme("kaiming", leaky_slope_a=slope)
    weights = [init_weights((dims[i + 1], dims[i]), scheme, make_rng(children[i]))
               for i in range(len(dims) - 1)]
    biases = [np.zeros(d) for d in dims[1:]]
    return Generator(weights, biases, output, slope)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

class PointDataset:
    """Uniform minibatches from a fixed ``(n, d)`` point cloud.

    The discriminator is bias-free, so by default a constant 1 is appended to
    every point it sees; that gives its first layer an affine offset.
    """

    def __init__(self, points, const_feature=True):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or not len(points):
            raise ValueError("need a non-empty (n, d) point array")
        self.points = points
        self.const_feature = const_feature

    @property
    def sample_dim(self):
        return self.points.shape[1]

    @property
    def disc_input_shape(self):
        return (self.sample_dim + int(self.const_feature),)

    def sample(self, n, rng):
        return self.points[rng.integers(0, len(self.points), size=n)]

    def disc_input(self, x):
        if not self.const_feature:
            return x
        return np.concatenate([x, np.ones((len(x), 1))], axis=1)

    def disc_input_grad(self, g):
        return g[:, :self.sample_dim]

    def coverage(self, samples):
        return None


class RingDataset(PointDataset):
    """Fresh ring-of-Gaussians draws on every call, scored by mode coverage."""

    def __init__(self, spec: RingSpec | None = None, const_feature=True):
        self.spec = spec or RingSpec()
        self.const_feature = const_feature

    @property
    def sample_dim(self):
        return 2

    def sample(self, n, rng):
        return sample_ring(self.spec, n, rng)

    def coverage(self, samples):
        return mode_coverage(samples, self.spec)


class ImageDataset:
    """Uniform minibatches from an in-memory ``(n, 1, h, w)`` image array."""

    def __init__(self, images):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or not len(images):
            raise ValueError("need a non-empty (n, c, h, w) image array")
        self.images = images

    @property
    def sample_dim(self):
        return int(np.prod(self.images.shape[1:]))

    @property
    def disc_input_shape(self):
        return tuple(self.images.shape[1:])

    def sample(self, n, rng):
        idx = rng.integers(0, len(self.images), size=n)
        return self.images[idx].reshape(n, -1)

    def disc_input(self, x):
        return x

    def disc_input_grad(self, g):
        return g.reshape(len(g), -1)

    def coverage(self, samples):
        return None


def default_ring_arch(width=64, const_feature=True):
    return {"input_shape": [3 if const_feature else 2],
            "layers": [{"kind": "dense", "out": width, "activation": "lrelu:0.2"},
                       {"kind": "dense", "out": width, "activation": "lrelu:0.2"},
                       {"kind": "dense", "out": 1}],
            "final": "identity"}


# Calibrated ring8 setup: 5 critic steps per generator step at width 64
# covers all 8 modes at the default learning rates. One step leaves the
# strictly normalized critic too weak to separate nearby modes.
RING_N_DIS = 5


def ring_config(**overrides):
    """TrainConfig used for the ring8 coverage smoke run."""
    opts = {"n_dis": RING_N_DIS, "iters": 20000, "batch_size": 64, "loss": "hinge"}
    opts.update(overrides)
    return TrainConfig(**opts)


def default_mnist_arch():
    return {"input_shape": [1, 28, 28],
            "layers": [{"kind": "conv", "c_out": 8, "k": 4, "stride": 2, "pad": 1,
                        "activation": "lrelu:0.2"},
                       {"kind": "conv", "c_out": 16, "k": 4, "stride": 2, "pad": 1,
                        "activation": "lrelu:0.2"},
                       {"kind": "dense", "out": 1}],
            "final": "identity"}


def make_models(cfg, dataset, arch=None, gen_hidden=(64, 64)):
    """Fresh ``(generator, discriminator)`` seeded from ``cfg.seed``.

    Images get a sigmoid generator output; everything else is unbounded.
    """
    if arch is None:
        arch = default_mnist_arch() if isinstance(dataset, ImageDataset) else default_ring_arch()
    disc = build_network(arch, seed=[cfg.seed, 1], norm_mode=cfg.norm_mode)
    output = "sigmoid" if isinstance(dataset, ImageDataset) else "identity"
    gen = build_generator(cfg.z_dim, gen_hidden, dataset.sample_dim, output, seed=[cfg.seed, 2])
    return gen, disc


# --------------------------------------------------------------------------
# configuration and metrics
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    alpha_g: float = 1e-4
    alpha_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    n_dis: int = 1
    batch_size: int = 64
    iters: int = 20000
    loss: str = "hinge"
    norm_mode: NormMode = field(default_factory=NormMode)
    power_iters_per_step: int = 1
    log_every: int = 500
    seed: int = 0
    z_dim: int = 16
    # 0 keeps only the initial and final checkpoints
    ckpt_every: int = 0
    # "full" differentiates through the divisor, "constant" treats it as fixed
    sigma_grad: str = "constant"
    coverage_samples: int = 1000
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if isinstance(self.norm_mode, dict):
            self.norm_mode = NormMode(**self.norm_mode)
        elif isinstance(self.norm_mode, str):
            self.norm_mode = NormMode(self.norm_mode)
        if not (self.alpha_g > 0 and self.alpha_d > 0):
            raise ValueError("learning rates must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        for name in ("n_dis", "batch_size", "power_iters_per_step", "log_every", "z_dim",
                     "coverage_samples"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iters < 0 or self.ckpt_every < 0:
            raise ValueError("iters and ckpt_every must be >= 0")
        _check_kind(self.loss)
        if self.sigma_grad not in ("full", "constant"):
            raise ValueError("sigma_grad must be 'full' or 'constant'")

    def to_dict(self):
        d = asdict(self)
        d["norm_mode"] = {"kind": self.norm_mode.kind, "scale": self.norm_mode.scale}
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRecord:
    iter: int
    layer: int
    grad_fro: float
    sigma_w1: float
    sigma_w2: float
    sigma_bsn: float
    param_var: float
    loss_d: float
    loss_g: float
    mode_coverage: Optional[float]
    # not part of the CSV
    grad_bound: float = math.nan
    lip_bound: float = math.nan
    var_bound: float = math.nan
    degenerate: bool = False

    def row(self):
        return [getattr(self, c) for c in METRICS_COLUMNS]


def _fan_max(layer):
    return max(layer.fan_in, layer.fan_out) if layer.kind == "conv" else max(layer.weight.shape)


def _normalize_lenient(disc, states):
    # like apply_normalization, but an all-zero layer stays zero instead of raising
    mode = disc.norm_mode
    states = states or [None] * disc.L
    layers = []
    for lay, st in zip(disc.layers, states):
        try:
            div, _ = norm_divisor(lay.weight, mode, lay.input_shape, lay.stride, lay.pad,
                                  st, CONVERGE, rng=0)
        except DivisorZeroError:
            div = 0.0
        if mode.kind != "none":
            div += DIVISOR_EPS
        layers.append(lay.with_weight(mode.scale * lay.weight / div))
    return disc.with_layers(layers, norm_mode=NormMode("none"))


def snapshot_metrics(disc: Network, batch, states=None, *, iteration=0, loss_d=math.nan,
                     loss_g=math.nan, coverage=None, divisors=None):
    """Per-layer instrumentation rows for the raw discriminator ``disc``.

    Gradient norms, parameter variances and the gradient bound are measured on
    a converged renormalization (working on copies of ``states``). The sigma
    columns report the exact spectral norms of the weights as training used
    them, i.e. divided by ``divisors`` when those are given.
    """
    mode = disc.norm_mode
    batch = np.asarray(batch, dtype=np.float64)
    copies = None if states is None else [{k: s.copy() for k, s in st.items()} for st in states]
    eff = _normalize_lenient(disc, copies)
    if divisors is None or mode.kind == "none":
        trained = eff
    else:
        trained = disc.with_weights([mode.scale * w / d for w, d in zip(disc.weights, divisors)])

    norms = per_sample_grad_norms(eff, forward(eff, batch)).mean(axis=0)
    sigmas = layer_sigmas(eff, STRICT, rng=0)
    xnorm = np.linalg.norm(batch.reshape(len(batch), -1), axis=1)
    lip = math.prod(lay.activation.lipschitz for lay in eff.layers)
    rows = []
    for t, (lay, lay_tr) in enumerate(zip(eff.layers, trained.layers)):
        rep = sigma_report(lay_tr.weight, iter_mode=STRICT, rng=0)
        others = math.prod(s for i, s in enumerate(sigmas) if i != t)
        rows.append(MetricsRecord(
            iter=int(iteration), layer=t, grad_fro=float(norms[t]),
            sigma_w1=rep.sigma_w1, sigma_w2=rep.sigma_w2, sigma_bsn=rep.sigma_bsn,
            param_var=float(np.var(lay.weight)), loss_d=float(loss_d), loss_g=float(loss_g),
            mode_coverage=coverage,
            grad_bound=float(np.mean(xnorm)) * lip * others,
            lip_bound=float(np.mean(xnorm)) * lip,
            var_bound=1.0 / _fan_max(lay),
            degenerate=sigmas[t] == 0.0))
    return rows


def write_metrics_csv(path, records):
    write_csv(path, METRICS_COLUMNS, [r.row() for r in records])


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, iteration, disc: Network, gen: Generator):
    with open(path, "w") as fh:
        json.dump({"iter": int(iteration), "discriminator": network_to_dict(disc),
                   "generator": gen.to_dict()}, fh)


def load_checkpoint(path):
    """Return ``(iter, discriminator, generator)``."""
    with open(path) as fh:
        d = json.load(fh)
    return int(d["iter"]), network_from_dict(d["discriminator"]), Generator.from_dict(d["generator"])


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    generator: Generator
    discriminator: Network
    checkpoints: list
    metrics: list
    states: list


def _raw_grads(disc, G, divisors, states, sigma_grad):
    mode = disc.norm_mode
    if mode.kind == "none":
        return [mode.scale * g for g in G]
    out = []
    for lay, g, d, st in zip(disc.layers, G, divisors, states):
        k = mode.scale / d
        if sigma_grad == "constant":
            out.append(k * g)
            continue
        dd = divisor_gradient(lay.weight, mode, st, lay.input_shape, lay.stride, lay.pad)
        out.append(k * (g - np.vdot(g, lay.weight / d) * dd))
    return out


def train(gen: Generator, disc: Network, dataset, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Alternate ``n_dis`` discriminator steps with one generator step.

    ``disc.norm_mode`` is replaced by ``cfg.norm_mode``. When ``out_dir`` is
    given, ``ckpt_<iter>.json`` files and ``metrics.csv`` are written there.
    Raises :class:`DivergenceError` if any discriminator output exceeds
    ``cfg.divergence_threshold`` in magnitude.
    """
    disc = disc.with_layers(disc.layers, norm_mode=cfg.norm_mode)
    if tuple(disc.input_shape) != tuple(dataset.disc_input_shape):
        raise ValueError(f"discriminator input {disc.input_shape} does not match "
                         f"dataset {dataset.disc_input_shape}")
    if gen.out_dim != dataset.sample_dim or gen.z_dim != cfg.z_dim:
        raise ValueError("generator dimensions do not match dataset / z_dim")

    data_ss, noise_ss, pi_ss, eval_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    data_rng, noise_rng, pi_rng = make_rng(data_ss), make_rng(noise_ss), make_rng(pi_ss)
    eval_rng = make_rng(eval_ss)
    z_eval = eval_rng.standard_normal((cfg.coverage_samples, cfg.z_dim))
    log_batch = dataset.disc_input(dataset.sample(cfg.batch_size, eval_rng))

    pi_mode = IterMode("persistent", k_steps=cfg.power_iters_per_step)
    adam_d = AdamState.zeros(disc.weights)
    adam_g = AdamState.zeros(gen.params)
    states = None
    divisors = None
    B = cfg.batch_size
    checkpoints, metrics = [], []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    def checkpoint(it):
        checkpoints.append((it, disc, gen))
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{it}.json"), it, disc, gen)

    def guard(d, it):
        worst = float(np.max(np.abs(d)))
        if not worst <= cfg.divergence_threshold:
            raise DivergenceError(it, worst, cfg.divergence_threshold)

    checkpoint(0)
    loss_d = loss_g = math.nan
    try:
        for it in range(1, cfg.iters + 1):
            for _ in range(cfg.n_dis):
                real = dataset.sample(B, data_rng)
                fake = gen(noise_rng.standard_normal((B, cfg.z_dim)))
                X = np.concatenate([dataset.disc_input(real), dataset.disc_input(fake)])
                eff, divisors, states = apply_normalization(disc, None, states, pi_mode, pi_rng)
                d = forward(eff, X)
                guard(d.output, it)
                loss_d, gr, gf = _d_loss_and_grads(d.output[:B], d.output[B:], cfg.loss)
                _, G = backward(eff, d, np.concatenate([gr, gf]))
                grads = _raw_grads(disc, G, divisors, states, cfg.sigma_grad)
                new_w, adam_d = adam_step(disc.weights, grads, adam_d, cfg.alpha_d,
                                          cfg.beta1, cfg.beta2)
                disc = disc.with_weights(new_w)

            z = noise_rng.standard_normal((B, cfg.z_dim))
            fake, cache = gen.forward(z)
            eff, divisors, states = apply_normalization(disc, None, states, pi_mode, pi_rng)
            d = forward(eff, dataset.disc_input(fake))
            guard(d.output, it)
            loss_g, gf = _g_loss_and_grads(d.output, cfg.loss)
            gx, _ = backward(eff, d, gf)
            grads = gen.backward(cache, dataset.disc_input_grad(gx))
            new_p, adam_g = adam_step(gen.params, grads, adam_g, cfg.alpha_g,
                                      cfg.beta1, cfg.beta2)
            gen = gen.with_params(new_p)

            if it % cfg.log_every == 0 or it == cfg.iters:
                metrics.extend(snapshot_metrics(
                    disc, log_batch, states, iteration=it, loss_d=loss_d, loss_g=loss_g,
                    coverage=dataset.coverage(gen(z_eval)), divisors=divisors))
            if (cfg.ckpt_every and it % cfg.ckpt_every == 0) or it == cfg.iters:
                checkpoint(it)
    finally:
        if out_dir is not None:
            write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics)
    return TrainResult(gen, disc, checkpoints, metrics, states)
