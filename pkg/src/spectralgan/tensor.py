"""Dense tensor plumbing: linear and convolution operators, their adjoints,
weight initialization and power iteration.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Convolutions are cross-correlations with zero padding and no bias, acting on
``(C, H, W)`` inputs or ``(B, C, H, W)`` batches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

__all__ = [
    "ShapeError",
    "CapacityError",
    "make_rng",
    "as_tensor",
    "matmul",
    "conv_output_shape",
    "im2col",
    "col2im",
    "conv2d",
    "conv2d_adjoint",
    "explicit_conv_matrix",
    "InitScheme",
    "fan_in_out",
    "init_weights",
    "PowerIterState",
    "power_iteration",
    "tensor_to_json",
    "tensor_from_json",
    "dump_tensor",
    "load_tensor",
]

EXPLICIT_MATRIX_CAP = 4096


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


class CapacityError(ValueError):
    """Problem exceeds the size cap of a dense oracle."""


def make_rng(seed=None) -> np.random.Generator:
    """Counter-based (Philox) generator; same seed gives the same stream on every platform."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def as_tensor(x, ndim=None, name="tensor") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim not in np.atleast_1d(ndim):
        raise ShapeError(f"{name} must have {ndim} dims, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def matmul(A, B) -> np.ndarray:
    A = as_tensor(A, ndim=(1, 2), name="A")
    B = as_tensor(B, ndim=(1, 2), name="B")
    if A.shape[-1] != B.shape[0]:
        raise ShapeError(f"inner dims disagree: {A.shape} @ {B.shape}")
    return A @ B


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_output_shape(input_shape, kernel_shape, stride=1, pad=0):
    """Return ``(c_out, H', W')`` for a ``(c_in, H, W)`` input."""
    c_in, H, W = input_shape
    c_out, kc_in, kh, kw = kernel_shape
    if kc_in != c_in:
        raise ShapeError(f"kernel expects {kc_in} input channels, input has {c_in}")
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be >= 1 and pad >= 0")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1 or H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(f"non-positive output size for input {tuple(input_shape)} "
                         f"kernel {tuple(kernel_shape)} stride {stride} pad {pad}")
    return (c_out, Ho, Wo)


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold a ``(B, C, H, W)`` batch into ``(B, C*kh*kw, H'*W')`` patch columns.

    Column rows are ordered (c, i, j), matching ``kernel.reshape(c_out, -1)``.
    """
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo)
    return cols, (Ho, Wo)


def col2im(cols, input_shape, kh, kw, stride=1, pad=0):
    """Adjoint of :func:`im2col`: scatter-add patch columns back to a batch."""
    B = cols.shape[0]
    C, H, W = input_shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    patches = cols.reshape(B, C, kh, kw, Ho, Wo)
    out = np.zeros((B, C, Hp, Wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += patches[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"conv input must be (C,H,W) or (B,C,H,W), got {x.shape}")


def conv2d(x, kernel, stride=1, pad=0) -> np.ndarray:
    """Cross-correlation of ``x`` with a ``(c_out, c_in, kh, kw)`` kernel."""
    kernel = as_tensor(kernel, ndim=4, name="kernel")
    xb, single = _batched(x)
    c_out, c_in, kh, kw = kernel.shape
    _, Ho, Wo = conv_output_shape(xb.shape[1:], kernel.shape, stride, pad)
    cols, _ = im2col(xb, kh, kw, stride, pad)
    out = np.matmul(kernel.reshape(c_out, -1), cols).reshape(xb.shape[0], c_out, Ho, Wo)
    return out[0] if single else out


def conv2d_adjoint(grad_out, kernel, stride, pad, input_shape) -> np.ndarray:
    """Transpose of :func:`conv2d` as a linear map on inputs of ``input_shape``."""
    kernel = as_tensor(kernel, ndim=4, name="kernel")
    input_shape = tuple(int(d) for d in input_shape[-3:])
    expected = conv_output_shape(input_shape, kernel.shape, stride, pad)
    gb, single = _batched(grad_out)
    if tuple(gb.shape[1:]) != expected:
        raise ShapeError(f"grad_out shape {gb.shape[1:]} does not match conv output {expected}")
    c_out, c_in, kh, kw = kernel.shape
    g = gb.reshape(gb.shape[0], c_out, -1)
    cols = np.matmul(kernel.reshape(c_out, -1).T, g)
    out = col2im(cols, input_shape, kh, kw, stride, pad)
    return out[0] if single else out


def explicit_conv_matrix(kernel, input_shape, stride=1, pad=0) -> np.ndarray:
    """Dense matrix ``M`` with ``M @ x.ravel() == conv2d(x).ravel()``.

    Built by direct index bookkeeping, independent of the im2col path.
    """
    kernel = as_tensor(kernel, ndim=4, name="kernel")
    input_shape = tuple(int(d) for d in input_shape)
    n_in = int(np.prod(input_shape))
    if n_in > EXPLICIT_MATRIX_CAP:
        raise CapacityError(f"input size {n_in} exceeds explicit-matrix cap {EXPLICIT_MATRIX_CAP}")
    c_out, Ho, Wo = conv_output_shape(input_shape, kernel.shape, stride, pad)
    _, c_in, kh, kw = kernel.shape
    _, H, W = input_shape
    M = np.zeros((c_out * Ho * Wo, n_in))
    for o in range(c_out):
        for p in range(Ho):
            for q in range(Wo):
                row = (o * Ho + p) * Wo + q
                for c in range(c_in):
                    for i in range(kh):
                        r = p * stride + i - pad
                        if r < 0 or r >= H:
                            continue
                        for j in range(kw):
                            s = q * stride + j - pad
                            if 0 <= s < W:
                                M[row, (c * H + r) * W + s] += kernel[o, c, i, j]
    return M


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

INIT_KINDS = ("lecun", "xavier", "kaiming", "gaussian", "uniform")


@dataclass(frozen=True)
class InitScheme:
    kind: str = "lecun"
    scale: float = 1.0
    leaky_slope_a: float = 0.0

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ValueError(f"unknown init kind {self.kind!r}; choose from {INIT_KINDS}")
        if not self.scale > 0:
            raise ValueError("init scale must be > 0")
        if not 0.0 <= self.leaky_slope_a < 1.0:
            raise ValueError("leaky_slope_a must lie in [0, 1)")

    def std(self, fan_in, fan_out):
        if self.kind == "lecun":
            return self.scale / math.sqrt(fan_in)
        if self.kind == "xavier":
            return self.scale * math.sqrt(2.0 / (fan_in + fan_out))
        if self.kind == "kaiming":
            return self.scale * math.sqrt(2.0 / ((1.0 + self.leaky_slope_a ** 2) * fan_in))
        return self.scale


def fan_in_out(dims):
    """Fan-in and fan-out of a dense ``(m, n)`` or conv ``(c_out, c_in, kh, kw)`` weight."""
    dims = tuple(int(d) for d in dims)
    if len(dims) == 2:
        m, n = dims
        return n, m
    if len(dims) == 4:
        c_out, c_in, kh, kw = dims
        return c_in * kh * kw, c_out * kh * kw
    raise ShapeError(f"weight dims must be 2-D or 4-D, got {dims}")


def init_weights(dims, scheme: InitScheme | None = None, rng_seed=None) -> np.ndarray:
    scheme = scheme or InitScheme()
    rng = make_rng(rng_seed)
    fan_in, fan_out = fan_in_out(dims)
    std = scheme.std(fan_in, fan_out)
    if scheme.kind == "uniform":
        half = std * math.sqrt(3.0)
        return rng.uniform(-half, half, size=tuple(dims))
    return rng.normal(0.0, std, size=tuple(dims))


# --------------------------------------------------------------------------
# power iteration
# --------------------------------------------------------------------------

@dataclass
class PowerIterState:
    """Left/right singular-vector estimates carried between calls."""

    u: np.ndarray
    v: np.ndarray
    last_sigma: float = 0.0
    n_iter: int = 0
    converged: bool = False
    degenerate: bool = False

    def copy(self):
        return replace(self, u=self.u.copy(), v=self.v.copy())


def _unit(x):
    nrm = float(np.linalg.norm(x))
    if nrm == 0.0 or not math.isfinite(nrm):
        return x, 0.0
    return x / nrm, nrm


def _fresh_state(in_shape, out_shape, rng):
    u, _ = _unit(rng.standard_normal(out_shape))
    v, _ = _unit(rng.standard_normal(in_shape))
    return PowerIterState(u=u, v=v)


def _ritz_polish(apply, adjoint, in_shape, u, v, sigma, tol, block=64, cycles=200):
    # Restarted Krylov (Rayleigh-Ritz) refinement seeded with the power iterate.
    # Plain power iteration stalls when the top two singular values nearly
    # coincide; the best value over a Krylov span converges at the square root
    # of that gap and never drops below the seed's estimate.
    n = int(np.prod(in_shape))
    m = min(block, n)
    for _ in range(cycles):
        V = np.empty((m, n))
        V[0] = v.ravel()
        AV = []
        for i in range(m):
            w = np.asarray(apply(V[i].reshape(in_shape)), dtype=np.float64).ravel()
            AV.append(w)
            if i + 1 == m:
                break
            z = np.asarray(adjoint(w.reshape(u.shape)), dtype=np.float64).ravel()
            for _ in range(2):
                z -= V[:i + 1].T @ (V[:i + 1] @ z)
            nz = np.linalg.norm(z)
            if nz <= 1e-13 * max(sigma * sigma, 1e-300):
                break
            V[i + 1] = z / nz
        k = len(AV)
        _, S, Rt = np.linalg.svd(np.array(AV).T, full_matrices=False)
        new = float(S[0])
        if not new > sigma:
            break
        v, _ = _unit((Rt[0] @ V[:k]).reshape(in_shape))
        u, _ = _unit(np.asarray(apply(v), dtype=np.float64))
        gain, sigma = new - sigma, new
        if gain < tol or k < m:
            break
    return sigma, u, v


def power_iteration(apply: Callable, adjoint: Callable, dims, mode="converge", *,
                    k_steps=1, tol=1e-10, max_iters=1000,
                    state: PowerIterState | None = None, rng=None):
    """Estimate the largest singular value of the operator ``apply``.

    ``dims`` is ``(in_shape, out_shape)``. ``mode="persistent"`` runs exactly
    ``k_steps`` update pairs starting from ``state``; ``mode="converge"`` stops
    once successive estimates differ by less than ``tol`` or after
    ``max_iters`` pairs. Returns ``(sigma, new_state)``; the input state is not
    mutated.
    """
    in_shape, out_shape = (tuple(np.atleast_1d(d).tolist()) for d in dims)
    if state is None:
        st = _fresh_state(in_shape, out_shape, make_rng(rng))
    else:
        st = state.copy()
    if mode == "persistent":
        steps, check = int(k_steps), False
        if steps < 1:
            raise ValueError("k_steps must be >= 1")
    elif mode == "converge":
        steps, check = int(max_iters), True
    else:
        raise ValueError(f"unknown power iteration mode {mode!r}")

    u, v = st.u, st.v
    sigma = prev = None
    converged = False
    for it in range(steps):
        v, nv = _unit(adjoint(u))
        if nv == 0.0:
            sigma = None
            break
        Av = apply(v)
        u, sigma = _unit(Av)
        if sigma == 0.0:
            sigma = None
            break
        if check and prev is not None and abs(sigma - prev) < tol:
            converged = True
            break
        prev = sigma
    else:
        it = steps - 1

    if sigma is None:
        # zero operator (or a state orthogonal to its range): restart from noise
        fresh = _fresh_state(in_shape, out_shape, make_rng(rng))
        fresh.degenerate = True
        return 0.0, fresh
    sigma = max(float(sigma), 0.0)
    if check:
        sigma, u, v = _ritz_polish(apply, adjoint, in_shape, u, v, sigma, tol)
    return sigma, PowerIterState(u=u, v=v, last_sigma=sigma, n_iter=st.n_iter + it + 1,
                                 converged=converged or not check)


# --------------------------------------------------------------------------
# JSON interchange
# --------------------------------------------------------------------------

def tensor_to_json(x) -> dict:
    x = np.asarray(x, dtype=np.float64)
    return {"shape": list(x.shape), "data": x.ravel().tolist()}


def tensor_from_json(obj) -> np.ndarray:
    try:
        shape = [int(d) for d in obj["shape"]]
        data = obj["data"]
    except (KeyError, TypeError) as exc:
        raise ValueError("tensor JSON needs 'shape' and 'data' fields") from exc
    if any(d < 1 for d in shape):
        raise ShapeError(f"tensor dims must be positive, got {shape}")
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 1 or arr.size != int(np.prod(shape)):
        raise ShapeError(f"data length {arr.size} does not match shape {shape}")
    return as_tensor(arr.reshape(shape))


def dump_tensor(x, path):
    with open(path, "w") as fh:
        json.dump(tensor_to_json(x), fh)


def load_tensor(path) -> np.ndarray:
    with open(path) as fh:
        return tensor_from_json(json.load(fh))
