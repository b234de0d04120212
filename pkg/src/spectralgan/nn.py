"""Bias-free feed-forward discriminator with hand-written backprop.

``D(x) = a_L(l_L(a_{L-1}(... a_1(l_1(x)))))`` where each ``l_t`` is a dense
matrix product or a convolution. Layer indices are 0-based in code.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .specnorm import (CONVERGE, IterMode, NormMode, apply_normalization,
                       conv_sigma, divisor_gradient, kernel_sigma)
from .tensor import (InitScheme, ShapeError, as_tensor, conv2d, conv2d_adjoint,
                     conv_output_shape, fan_in_out, im2col, init_weights,
                     make_rng, power_iteration, tensor_from_json, tensor_to_json)

__all__ = [
    "Activation",
    "Layer",
    "Network",
    "ForwardTrace",
    "forward",
    "backward",
    "per_sample_grad_norms",
    "layer_sigmas",
    "layer_grad_bound",
    "overall_grad_bound",
    "raw_weight_grads",
    "hvp",
    "hessian_sigma_estimate",
    "kink_free",
    "BoundError",
    "STRICT",
    "build_network",
    "network_from_dict",
    "network_to_dict",
]

# iteration settings used whenever a bound needs the true operator norm
STRICT = IterMode("converge", tol=1e-13, max_iters=20000)

SIGMOID_MAX_CURVATURE = 1.0 / (6.0 * math.sqrt(3.0))


class BoundError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in ("relu", "lrelu", "sigmoid", "identity"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "lrelu" and not 0.0 < self.slope < 1.0:
            raise ValueError("leaky ReLU slope must lie in (0, 1)")

    @classmethod
    def parse(cls, spec):
        if isinstance(spec, Activation):
            return spec
        name, _, arg = str(spec).partition(":")
        name = {"leaky_relu": "lrelu", "leakyrelu": "lrelu", "linear": "identity"}.get(name, name)
        if name == "lrelu":
            return cls("lrelu", float(arg) if arg else 0.2)
        return cls(name)

    def __str__(self):
        return f"lrelu:{self.slope:g}" if self.kind == "lrelu" else self.kind

    @property
    def lipschitz(self):
        return 0.25 if self.kind == "sigmoid" else 1.0

    @property
    def piecewise_linear(self):
        return self.kind in ("relu", "lrelu")

    def __call__(self, z):
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "lrelu":
            return np.where(z > 0, z, self.slope * z)
        if self.kind == "sigmoid":
            return _sigmoid(z)
        return z

    def deriv(self, z):
        # subgradient at exactly 0 is taken as 0 for ReLU (slope for leaky ReLU)
        if self.kind == "relu":
            return (z > 0).astype(np.float64)
        if self.kind == "lrelu":
            return np.where(z > 0, 1.0, self.slope)
        if self.kind == "sigmoid":
            s = _sigmoid(z)
            return s * (1.0 - s)
        return np.ones_like(z)

    def second_deriv(self, z):
        if self.kind == "sigmoid":
            s = _sigmoid(z)
            return s * (1.0 - s) * (1.0 - 2.0 * s)
        return np.zeros_like(z)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True, eq=False)
class Layer:
    """One bias-free linear map followed by an activation.

    Dense weights are ``(m, n)``; conv weights are ``(c_out, c_in, kh, kw)``
    and need ``input_shape = (c_in, H, W)``.
    """

    kind: str
    weight: np.ndarray
    activation: Activation = Activation("relu")
    stride: int = 1
    pad: int = 0
    input_shape: Optional[tuple] = None

    def __post_init__(self):
        w = as_tensor(self.weight, name="weight")
        object.__setattr__(self, "weight", w)
        if self.kind == "dense":
            if w.ndim != 2:
                raise ShapeError(f"dense weight must be 2-D, got {w.shape}")
            object.__setattr__(self, "input_shape", (w.shape[1],))
        elif self.kind == "conv":
            if w.ndim != 4:
                raise ShapeError(f"conv weight must be 4-D, got {w.shape}")
            if self.input_shape is None or len(self.input_shape) != 3:
                raise ShapeError("conv layer needs input_shape (c_in, H, W)")
            object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
            conv_output_shape(self.input_shape, w.shape, self.stride, self.pad)
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def output_shape(self):
        if self.kind == "dense":
            return (self.weight.shape[0],)
        return conv_output_shape(self.input_shape, self.weight.shape, self.stride, self.pad)

    @property
    def fan_in(self):
        return fan_in_out(self.weight.shape)[0]

    @property
    def fan_out(self):
        return fan_in_out(self.weight.shape)[1]

    def with_weight(self, weight):
        return replace(self, weight=weight)

    def linear(self, x):
        """Apply the linear map to a batch shaped ``(B, *input_shape)``."""
        if self.kind == "dense":
            return x @ self.weight.T
        return conv2d(x, self.weight, self.stride, self.pad)

    def linear_adjoint(self, g):
        if self.kind == "dense":
            return g @ self.weight
        return conv2d_adjoint(g, self.weight, self.stride, self.pad, self.input_shape)

    def weight_grad(self, x, g):
        """Sum over the batch of the gradient w.r.t. the weight, given inputs and upstream grads."""
        if self.kind == "dense":
            return g.T @ x
        c_out, c_in, kh, kw = self.weight.shape
        cols, _ = im2col(x, kh, kw, self.stride, self.pad)
        gm = g.reshape(g.shape[0], c_out, -1)
        return np.einsum("bop,bkp->ok", gm, cols).reshape(self.weight.shape)

    def weight_grad_norms(self, x, g):
        """Per-sample Frobenius norms of the weight gradient."""
        if self.kind == "dense":
            # rank-one outer products: ||g x^T|| = ||g|| ||x||
            return np.linalg.norm(g, axis=1) * np.linalg.norm(x, axis=1)
        c_out, c_in, kh, kw = self.weight.shape
        cols, _ = im2col(x, kh, kw, self.stride, self.pad)
        gm = g.reshape(g.shape[0], c_out, -1)
        per = np.einsum("bop,bkp->bok", gm, cols)
        return np.sqrt(np.einsum("bok,bok->b", per, per))


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    norm_mode: NormMode = field(default_factory=lambda: NormMode("none"))

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for i, layer in enumerate(layers[:-1]):
            if not layer.activation.piecewise_linear:
                raise ValueError(f"internal layer {i} must use ReLU or leaky ReLU")
            nxt = layers[i + 1]
            if int(np.prod(layer.output_shape)) != int(np.prod(nxt.input_shape)):
                raise ShapeError(f"layer {i} output {layer.output_shape} does not feed "
                                 f"layer {i + 1} input {nxt.input_shape}")
        if layers[-1].activation.kind not in ("sigmoid", "identity"):
            raise ValueError("final activation must be sigmoid or identity")
        if int(np.prod(layers[-1].output_shape)) != 1:
            raise ShapeError("discriminator must produce a scalar")

    @property
    def L(self):
        return len(self.layers)

    @property
    def final(self):
        return self.layers[-1].activation

    @property
    def input_shape(self):
        return self.layers[0].input_shape

    @property
    def weights(self):
        return [layer.weight for layer in self.layers]

    def with_layers(self, layers, norm_mode=None):
        return Network(tuple(layers), self.norm_mode if norm_mode is None else norm_mode)

    def with_weights(self, weights):
        return self.with_layers([lay.with_weight(w) for lay, w in zip(self.layers, weights)])

    def with_weight(self, t, weight):
        weights = self.weights
        weights[t] = weight
        return self.with_weights(weights)

    def scaled(self, c):
        return self.with_weights([ci * w for ci, w in zip(c, self.weights)])

    def with_final(self, final):
        last = self.layers[-1]
        return self.with_layers(self.layers[:-1] + (replace(last, activation=Activation.parse(final)),))

    def normalized(self, states=None, iter_mode: IterMode = CONVERGE, rng=None):
        """Effective-weight network under this network's norm mode."""
        net, _, _ = apply_normalization(self, self.norm_mode, states, iter_mode, rng)
        return net


@dataclass
class ForwardTrace:
    x: np.ndarray
    pre: list
    post: list
    batched: bool

    @property
    def output(self):
        out = self.post[-1].reshape(-1)
        return out if self.batched else float(out[0])


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    shape = tuple(net.input_shape)
    if x.shape == shape:
        return x.reshape((1,) + shape), False
    if x.ndim >= 1 and x.shape[1:] == shape:
        return x, True
    if x.ndim == 2 and len(shape) == 3 and x.shape[1] == int(np.prod(shape)):
        return x.reshape((x.shape[0],) + shape), True
    if x.ndim == 1 and x.size == int(np.prod(shape)):
        return x.reshape((1,) + shape), False
    raise ShapeError(f"input shape {x.shape} does not match network input {shape}")


def forward(net: Network, x) -> ForwardTrace:
    """Evaluate ``net`` on one sample or a batch, caching pre/post activations."""
    x0, batched = _as_batch(net, x)
    h = x0
    pre, post = [], []
    for layer in net.layers:
        h = h.reshape((h.shape[0],) + tuple(layer.input_shape))
        z = layer.linear(h)
        h = layer.activation(z)
        pre.append(z)
        post.append(h)
    return ForwardTrace(x=x0, pre=pre, post=post, batched=batched)


def _backprop(net, trace, upstream):
    B = trace.x.shape[0]
    if upstream is None:
        upstream = np.ones(B)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(B)
    g_post = upstream.reshape((B,) + trace.post[-1].shape[1:])
    deltas = [None] * net.L
    for t in range(net.L - 1, -1, -1):
        layer = net.layers[t]
        g_pre = g_post * layer.activation.deriv(trace.pre[t])
        deltas[t] = g_pre
        g_in = layer.linear_adjoint(g_pre)
        if t > 0:
            g_post = g_in.reshape(trace.post[t - 1].shape)
    return deltas, g_in.reshape(trace.x.shape)


def _layer_inputs(net, trace):
    ins = [trace.x] + trace.post[:-1]
    return [h.reshape((h.shape[0],) + tuple(lay.input_shape)) for h, lay in zip(ins, net.layers)]


def backward(net: Network, trace: ForwardTrace, upstream=None):
    """Gradients of ``sum_b upstream_b * D(x_b)`` w.r.t. the input and every weight.

    Returns ``(grad_x, grads_w)``; for a single-sample trace ``grad_x`` has the
    sample's shape.
    """
    deltas, grad_x = _backprop(net, trace, upstream)
    grads_w = [lay.weight_grad(h, d) for lay, h, d in zip(net.layers, _layer_inputs(net, trace), deltas)]
    if not trace.batched:
        grad_x = grad_x[0]
    return grad_x, grads_w


def per_sample_grad_norms(net: Network, trace: ForwardTrace):
    """``(B, L)`` array of ``||grad_{w_t} D(x_b)||_F``."""
    deltas, _ = _backprop(net, trace, None)
    cols = [lay.weight_grad_norms(h, d)
            for lay, h, d in zip(net.layers, _layer_inputs(net, trace), deltas)]
    return np.stack(cols, axis=1)


# --------------------------------------------------------------------------
# bounds
# --------------------------------------------------------------------------

def layer_sigmas(net: Network, iter_mode: IterMode = STRICT, rng=0):
    """Operator norm of every layer's linear map (conv layers: the full convolution)."""
    out = []
    for layer in net.layers:
        if layer.kind == "dense":
            s, _ = kernel_sigma(layer.weight, "out_grouped", iter_mode, rng=rng)
        else:
            s, _ = conv_sigma(layer.weight, layer.input_shape, layer.stride, layer.pad,
                              iter_mode, rng=rng)
        out.append(s)
    return out


def layer_grad_bound(net: Network, x, t, sigmas=None) -> float:
    """``||x|| * prod Lip(a_i) * prod sigma_i / sigma_t``."""
    sigmas = layer_sigmas(net) if sigmas is None else list(sigmas)
    if not sigmas[t] > 0:
        raise BoundError(f"layer {t} has zero spectral norm; bound undefined")
    lip = math.prod(lay.activation.lipschitz for lay in net.layers)
    others = math.prod(s for i, s in enumerate(sigmas) if i != t)
    return float(np.linalg.norm(x)) * lip * others


def overall_grad_bound(net: Network, x, sigmas=None) -> float:
    """``sqrt(sum_t bound_t^2)``; equals ``sqrt(L)*||x||*prod Lip`` when every sigma is 1."""
    sigmas = layer_sigmas(net) if sigmas is None else list(sigmas)
    return math.sqrt(sum(layer_grad_bound(net, x, t, sigmas) ** 2 for t in range(net.L)))


def raw_weight_grads(raw: Network, x, states=None, iter_mode: IterMode = STRICT, rng=0,
                     scales=None):
    """Gradients of ``sum_b D(x_b)`` w.r.t. raw weights, differentiating through the divisor.

    With ``w_eff = s_t * w / d(w)`` this is ``(s_t/d) * (G - <G, w/d> * grad d)``
    per layer, where ``G`` is the gradient w.r.t. the effective weight.
    ``scales`` overrides the norm mode's scale with one value per layer.
    """
    mode = raw.norm_mode
    s = [mode.scale] * raw.L if scales is None else list(scales)
    unit, divisors, states = apply_normalization(raw, NormMode(mode.kind, 1.0), states,
                                                 iter_mode, rng)
    eff = unit.scaled(s)
    _, G = backward(eff, forward(eff, x))
    out = []
    for lay, g, d, st, k in zip(raw.layers, G, divisors, states, s):
        if mode.kind == "none":
            out.append(k * g)
            continue
        dd = divisor_gradient(lay.weight, mode, st, lay.input_shape, lay.stride, lay.pad)
        out.append((k / d) * (g - np.vdot(g, lay.weight / d) * dd))
    return out


# --------------------------------------------------------------------------
# second order
# --------------------------------------------------------------------------

def _weight_grad_single(net, x, t):
    trace = forward(net, x)
    return backward(net, trace)[1][t]


def hvp(net: Network, x, t, v, h=1e-4) -> np.ndarray:
    """Central-difference Hessian-vector product of ``D(x)`` w.r.t. layer ``t`` weights."""
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    v = np.asarray(v, dtype=np.float64)
    w = net.layers[t].weight
    if v.shape != w.shape:
        raise ShapeError(f"direction shape {v.shape} != weight shape {w.shape}")
    if not np.any(v):
        return np.zeros_like(w)
    gp = _weight_grad_single(net.with_weight(t, w + h * v), x, t)
    gm = _weight_grad_single(net.with_weight(t, w - h * v), x, t)
    return (gp - gm) / (2.0 * h)


def kink_free(net: Network, x, t, radius):
    """True if perturbing layer ``t`` weights by Frobenius norm ``radius`` cannot
    flip any internal ReLU/leaky-ReLU at ``x``.

    A weight perturbation moves ``o_l^t`` by at most ``radius * ||o_a^{t-1}||``,
    and each later layer can amplify that by at most its operator norm.
    """
    trace = forward(net, x)
    h_in = trace.x if t == 0 else trace.post[t - 1]
    reach = radius * float(np.linalg.norm(h_in))
    sigmas = None
    for i in range(t, net.L - 1):
        if i > t:
            if sigmas is None:
                sigmas = layer_sigmas(net, CONVERGE)
            reach *= sigmas[i] * (1 + 1e-6)
        if float(np.min(np.abs(trace.pre[i]))) <= reach:
            return False
    return True


def hessian_sigma_estimate(net: Network, x, t, iters=100, h=1e-4, tol=1e-10, rng=0):
    """Power iteration over :func:`hvp`; returns ``(sigma, ok)``.

    ``ok`` is False when a ReLU kink lies inside the difference stencil, the
    iteration did not settle, or the Richardson check at ``h/2`` disagrees.
    """
    shape = net.layers[t].weight.shape
    op = lambda v: hvp(net, x, t, v, h)  # noqa: E731  (the Hessian is symmetric)
    sigma, st = power_iteration(op, op, (shape, shape), mode="converge",
                                tol=tol, max_iters=iters, rng=rng)
    scale = 1.0 + float(np.vdot(x, x))
    negligible = sigma <= 1e-9 * scale
    ok = kink_free(net, x, t, h) and (st.converged or st.degenerate or negligible)
    if ok and not negligible:
        half = float(np.linalg.norm(hvp(net, x, t, st.v, h / 2)))
        if abs(half - sigma) > 1e-3 * sigma:
            ok = False
    if not ok:
        warnings.warn(f"Hessian power iteration for layer {t} is unreliable", RuntimeWarning)
    return sigma, ok


# --------------------------------------------------------------------------
# construction and JSON
# --------------------------------------------------------------------------

def build_network(arch: dict, init: InitScheme | None = None, seed=0,
                  norm_mode: NormMode | None = None) -> Network:
    """Instantiate an architecture description with freshly initialized weights.

    ``arch`` looks like ``{"input_shape": [2], "layers": [{"kind": "dense",
    "out": 64, "activation": "lrelu:0.2"}, ..., {"kind": "dense", "out": 1}],
    "final": "identity"}``; conv entries take ``c_out``, ``k`` (or ``kh``/``kw``),
    ``stride`` and ``pad``.
    """
    init = init or InitScheme(arch.get("init", "lecun"))
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(len(arch["layers"]))
    shape = tuple(int(d) for d in arch["input_shape"])
    layers = []
    for i, spec in enumerate(arch["layers"]):
        last = i == len(arch["layers"]) - 1
        act = Activation.parse(arch.get("final", "identity") if last else spec.get("activation", "relu"))
        if spec["kind"] == "dense":
            n = int(np.prod(shape))
            m = int(spec.get("out", 1))
            w = init_weights((m, n), init, make_rng(children[i]))
            layer = Layer("dense", w, act)
        elif spec["kind"] == "conv":
            if len(shape) != 3:
                raise ShapeError("conv layer needs a (C, H, W) input")
            kh = int(spec.get("kh", spec.get("k", 3)))
            kw = int(spec.get("kw", spec.get("k", 3)))
            dims = (int(spec["c_out"]), shape[0], kh, kw)
            w = init_weights(dims, init, make_rng(children[i]))
            layer = Layer("conv", w, act, int(spec.get("stride", 1)), int(spec.get("pad", 0)), shape)
        else:
            raise ValueError(f"unknown layer kind {spec['kind']!r}")
        layers.append(layer)
        shape = layer.output_shape
    return Network(tuple(layers), norm_mode or NormMode("none"))


def network_to_dict(net: Network, include_weights=True) -> dict:
    layers = []
    for lay in net.layers:
        d = {"kind": lay.kind, "activation": str(lay.activation)}
        if lay.kind == "dense":
            d["out"] = int(lay.weight.shape[0])
        else:
            d.update(c_out=int(lay.weight.shape[0]), kh=int(lay.weight.shape[2]),
                     kw=int(lay.weight.shape[3]), stride=lay.stride, pad=lay.pad)
        if include_weights:
            d["weight"] = tensor_to_json(lay.weight)
        layers.append(d)
    return {"input_shape": list(net.input_shape), "layers": layers, "final": str(net.final),
            "norm": {"kind": net.norm_mode.kind, "scale": net.norm_mode.scale}}


def network_from_dict(d: dict) -> Network:
    net = build_network(d, seed=0, norm_mode=NormMode(**d.get("norm", {"kind": "none"})))
    if all("weight" in spec for spec in d["layers"]):
        net = net.with_weights([tensor_from_json(spec["weight"]) for spec in d["layers"]])
    return net


def load_architecture(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
