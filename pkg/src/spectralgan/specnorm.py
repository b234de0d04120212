"""Spectral-norm estimators and the weight normalizers built on them.

Three divisors are supported for a convolution kernel ``w`` of shape
``(c_out, c_in, kh, kw)``:

* ``sn_w``    -- sigma of the out-grouped reshape ``W1`` (``c_out x c_in*kh*kw``)
* ``sn_conv`` -- operator norm of the convolution map for a fixed input geometry
* ``bsn``     -- mean of sigma(W1) and sigma(W2), where ``W2`` is the in-grouped
  reshape (``c_in x c_out*kh*kw``)

Dense ``(m, n)`` weights use the plain matrix spectral norm under every mode.
Every normalized weight is additionally multiplied by a fixed scale ``s``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .tensor import (ShapeError, as_tensor, conv2d, conv2d_adjoint,
                     conv_output_shape, im2col, power_iteration)

__all__ = [
    "NORM_KINDS",
    "NormMode",
    "IterMode",
    "CONVERGE",
    "PERSISTENT",
    "SigmaReport",
    "DivisorZeroError",
    "reshape_kernel",
    "unreshape_kernel",
    "kernel_sigma",
    "conv_sigma",
    "norm_divisor",
    "divisor_gradient",
    "sigma_report",
    "apply_normalization",
    "DIVISOR_EPS",
]

NORM_KINDS = ("none", "sn_w", "sn_conv", "bsn")
DIVISOR_EPS = 1e-12

_ALIASES = {"snw": "sn_w", "sn": "sn_w", "snconv": "sn_conv", "sn-conv": "sn_conv",
            "sn-w": "sn_w", "None": "none"}


class DivisorZeroError(ArithmeticError):
    """A layer's weight is (numerically) zero, so it cannot be normalized."""


@dataclass(frozen=True)
class NormMode:
    kind: str = "sn_w"
    scale: float = 1.0

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.kind!r}; choose from {NORM_KINDS}")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")


@dataclass(frozen=True)
class IterMode:
    """How power iteration is run: a fixed number of warm-started steps, or to convergence."""

    kind: str = "converge"
    k_steps: int = 1
    tol: float = 1e-10
    max_iters: int = 1000

    def kwargs(self):
        return dict(mode=self.kind, k_steps=self.k_steps, tol=self.tol, max_iters=self.max_iters)


CONVERGE = IterMode()
PERSISTENT = IterMode("persistent", k_steps=1)


@dataclass
class SigmaReport:
    sigma_w1: float
    sigma_w2: float
    sigma_conv: Optional[float]
    sigma_bsn: float

    def to_dict(self):
        return asdict(self)


def reshape_kernel(kernel, grouping="out_grouped") -> np.ndarray:
    """Flatten a 4-D kernel into ``W1`` (out-grouped) or ``W2`` (in-grouped)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-D, got shape {kernel.shape}")
    c_out, c_in = kernel.shape[:2]
    if grouping == "out_grouped":
        return kernel.reshape(c_out, -1)
    if grouping == "in_grouped":
        return np.ascontiguousarray(kernel.transpose(1, 0, 2, 3)).reshape(c_in, -1)
    raise ValueError(f"unknown grouping {grouping!r}")


def unreshape_kernel(matrix, kernel_shape, grouping="out_grouped") -> np.ndarray:
    """Inverse of :func:`reshape_kernel`."""
    c_out, c_in, kh, kw = kernel_shape
    if grouping == "out_grouped":
        return np.asarray(matrix).reshape(c_out, c_in, kh, kw)
    return np.asarray(matrix).reshape(c_in, c_out, kh, kw).transpose(1, 0, 2, 3).copy()


def _matrix_of(weight, grouping):
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim == 2:
        return weight if grouping == "out_grouped" else weight.T
    return reshape_kernel(weight, grouping)


def _matrix_sigma(M, iter_mode, state, rng):
    m, n = M.shape
    return power_iteration(lambda v: M @ v, lambda u: M.T @ u, ((n,), (m,)),
                           state=state, rng=rng, **iter_mode.kwargs())


def kernel_sigma(kernel, grouping="out_grouped", iter_mode: IterMode = CONVERGE,
                 state=None, rng=None):
    """Spectral norm of a reshaped kernel (or of a dense matrix) by power iteration."""
    return _matrix_sigma(_matrix_of(kernel, grouping), iter_mode, state, rng)


def conv_sigma(kernel, input_shape, stride=1, pad=0, iter_mode: IterMode = CONVERGE,
               state=None, rng=None):
    """Operator norm of ``x -> conv2d(x, kernel)`` on inputs of ``input_shape``."""
    kernel = as_tensor(kernel, ndim=4, name="kernel")
    input_shape = tuple(int(d) for d in input_shape)
    out_shape = conv_output_shape(input_shape, kernel.shape, stride, pad)
    return power_iteration(
        lambda v: conv2d(v, kernel, stride, pad),
        lambda u: conv2d_adjoint(u, kernel, stride, pad, input_shape),
        (input_shape, out_shape), state=state, rng=rng, **iter_mode.kwargs())


def _get(states, key):
    return None if states is None else states.get(key)


def norm_divisor(weight, mode: NormMode, input_shape=None, stride=1, pad=0,
                 states=None, iter_mode: IterMode = CONVERGE, rng=None):
    """Return ``(divisor, states)`` for one layer.

    ``states`` maps ``"w1"``, ``"w2"`` and ``"conv"`` to power-iteration
    states; a new dict is returned and the argument is left untouched.
    The divisor excludes the scale and the epsilon floor.
    """
    weight = np.asarray(weight, dtype=np.float64)
    new = dict(states or {})
    if mode.kind == "none":
        return 1.0, new
    if weight.ndim == 2 or mode.kind == "sn_w":
        sigma, new["w1"] = kernel_sigma(weight, "out_grouped", iter_mode, _get(states, "w1"), rng)
    elif mode.kind == "bsn":
        s1, new["w1"] = kernel_sigma(weight, "out_grouped", iter_mode, _get(states, "w1"), rng)
        s2, new["w2"] = kernel_sigma(weight, "in_grouped", iter_mode, _get(states, "w2"), rng)
        sigma = 0.5 * (s1 + s2)
    else:
        if input_shape is None:
            raise ValueError("sn_conv needs the layer's input shape")
        sigma, new["conv"] = conv_sigma(weight, input_shape, stride, pad, iter_mode,
                                        _get(states, "conv"), rng)
    if not sigma > 0.0:
        raise DivisorZeroError("zero spectral norm; reinitialize the layer")
    return sigma, new


def divisor_gradient(weight, mode: NormMode, states, input_shape=None, stride=1, pad=0):
    """Gradient of the divisor w.r.t. the raw weight, ``u v^T`` in the relevant geometry.

    Uses the singular vectors held in ``states``; exact when they have converged.
    """
    weight = np.asarray(weight, dtype=np.float64)
    if mode.kind == "none":
        return np.zeros_like(weight)

    def outer(key, grouping):
        st = states[key]
        g = np.outer(st.u, st.v)
        if weight.ndim == 2:
            return g if grouping == "out_grouped" else g.T
        return unreshape_kernel(g, weight.shape, grouping)

    if weight.ndim == 2 or mode.kind == "sn_w":
        return outer("w1", "out_grouped")
    if mode.kind == "bsn":
        return 0.5 * (outer("w1", "out_grouped") + outer("w2", "in_grouped"))
    st = states["conv"]
    # d<u, conv(v, w)>/dw: correlate the right vector with the left one
    c_out, c_in, kh, kw = weight.shape
    cols, _ = im2col(st.v[None], kh, kw, stride, pad)
    return (st.u.reshape(c_out, -1) @ cols[0].T).reshape(weight.shape)


def sigma_report(kernel, input_shape=None, stride=1, pad=0,
                 iter_mode: IterMode = CONVERGE, rng=None) -> SigmaReport:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim == 2:
        kernel = kernel[:, :, None, None]
    s1, _ = kernel_sigma(kernel, "out_grouped", iter_mode, rng=rng)
    s2, _ = kernel_sigma(kernel, "in_grouped", iter_mode, rng=rng)
    sc = None
    if input_shape is not None:
        sc, _ = conv_sigma(kernel, input_shape, stride, pad, iter_mode, rng=rng)
    return SigmaReport(sigma_w1=s1, sigma_w2=s2, sigma_conv=sc, sigma_bsn=(s1 + s2) / 2.0)


def apply_normalization(network, mode: NormMode | None = None, states=None,
                        iter_mode: IterMode = CONVERGE, rng=None):
    """Reparameterize every layer as ``scale * w / divisor``.

    Returns ``(normalized_network, divisors, states)``. The normalized network
    carries the effective weights and ``norm_mode`` ``none``; the raw network
    is not modified. ``states`` is a list with one dict per layer.
    """
    mode = mode or network.norm_mode
    states = list(states) if states is not None else [None] * len(network.layers)
    if len(states) != len(network.layers):
        raise ValueError("need one power-iteration state per layer")
    layers, divisors, new_states = [], [], []
    for layer, st in zip(network.layers, states):
        div, st = norm_divisor(layer.weight, mode, getattr(layer, "input_shape", None),
                               getattr(layer, "stride", 1), getattr(layer, "pad", 0),
                               st, iter_mode, rng)
        if mode.kind != "none":
            div = div + DIVISOR_EPS
        divisors.append(div)
        new_states.append(st)
        layers.append(layer.with_weight(mode.scale * layer.weight / div))
    return network.with_layers(layers, norm_mode=NormMode("none")), divisors, new_states
