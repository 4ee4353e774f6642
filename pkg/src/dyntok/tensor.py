"""Deterministic float32 kernels.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Every reduction
here runs in a fixed order so results are reproducible bit-for-bit:

* ``matmul`` accumulates over the inner index k = 0, 1, ..., K-1.
* convolutions accumulate over (input channel, kernel row, kernel column) in
  that nesting order, then add the bias.
* row reductions (softmax, layer norm) are left-to-right running sums.

No BLAS call is involved anywhere, so the order cannot change with the
threading library or the CPU.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import GeometryError, NonFiniteError, ShapeError

F32 = np.float32

GELU_COEF = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def row_sum(a: np.ndarray) -> np.ndarray:
    """Left-to-right sum along the last axis, in float32."""
    return np.add.accumulate(a, axis=-1, dtype=F32)[..., -1]


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=F32)
    tmp = np.empty_like(out)
    for k in range(a.shape[1]):
        np.multiply(a[:, k, None], b[k], out=tmp)
        out += tmp
    return check_finite(out, "matmul output")


def linear(x, weight, bias=None) -> np.ndarray:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    y = matmul(x, weight)
    if bias is not None:
        y += as_tensor(bias)
    return y


def softmax_rows(a) -> np.ndarray:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {a.shape}")
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return check_finite(e / row_sum(e)[:, None], "softmax output")


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    a = as_tensor(a)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if a.ndim != 2 or np.shape(gamma) != (a.shape[1],) or np.shape(beta) != (a.shape[1],):
        raise ShapeError(f"layer_norm shape mismatch: {a.shape}, {np.shape(gamma)}, {np.shape(beta)}")
    n = F32(a.shape[1])
    mean = row_sum(a) / n
    centered = a - mean[:, None]
    var = row_sum(centered * centered) / n
    out = centered / np.sqrt(var + F32(eps))[:, None]
    return check_finite(out * as_tensor(gamma) + as_tensor(beta), "layer_norm output")


def gelu(x) -> np.ndarray:
    """Tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    inner = F32(GELU_SCALE) * (x + F32(GELU_COEF) * x * x * x)
    return F32(0.5) * x * (F32(1.0) + np.tanh(inner))


def depthwise_conv3x3(fmap, weights, bias) -> np.ndarray:
    """Per-channel 3x3 cross-correlation, stride 1, zero padding 1."""
    fmap = as_tensor(fmap)
    weights = as_tensor(weights)
    if fmap.ndim != 3:
        raise ShapeError(f"expected a C x H x W map, got {fmap.shape}")
    c, h, w = fmap.shape
    if weights.shape != (c, 3, 3) or np.shape(bias) != (c,):
        raise ShapeError(f"depthwise weights {weights.shape} / bias {np.shape(bias)} do not match {c} channels")
    padded = np.pad(fmap, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(fmap)
    for ky in range(3):
        for kx in range(3):
            out += weights[:, ky, kx, None, None] * padded[:, ky:ky + h, kx:kx + w]
    out += as_tensor(bias)[:, None, None]
    return check_finite(out, "depthwise conv output")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def strided_conv(fmap, weights, stride: int, padding: int = 0, bias=None) -> np.ndarray:
    """Dense cross-correlation of a Cin x H x W map with Cout x Cin x k x k weights."""
    fmap = as_tensor(fmap)
    weights = as_tensor(weights)
    if fmap.ndim != 3 or weights.ndim != 4 or weights.shape[1] != fmap.shape[0]:
        raise ShapeError(f"conv shape mismatch: map {fmap.shape}, weights {weights.shape}")
    cout, cin, kh, kw = weights.shape
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride {stride} / padding {padding}")
    _, h, w = fmap.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if (h + 2 * padding - kh) < 0 or (w + 2 * padding - kw) < 0 or ho < 1 or wo < 1:
        raise GeometryError(f"kernel {kh} stride {stride} padding {padding} does not fit a {h}x{w} map")
    padded = np.pad(fmap, ((0, 0), (padding, padding), (padding, padding))) if padding else fmap
    out = np.zeros((cout, ho, wo), dtype=F32)
    tmp = np.empty_like(out)
    row_stop = stride * (ho - 1) + 1
    col_stop = stride * (wo - 1) + 1
    for ci in range(cin):
        for ky in range(kh):
            for kx in range(kw):
                window = padded[ci, ky:ky + row_stop:stride, kx:kx + col_stop:stride]
                np.multiply(weights[:, ci, ky, kx, None, None], window, out=tmp)
                out += tmp
    if bias is not None:
        if np.shape(bias) != (cout,):
            raise ShapeError(f"conv bias {np.shape(bias)} does not match {cout} outputs")
        out += as_tensor(bias)[:, None, None]
    return check_finite(out, "conv output")


# --- seeded initialization -------------------------------------------------

MASK64 = (1 << 64) - 1
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SplitMix64:
    """Vigna's splitmix64 generator.

    ``next_u64`` is the scalar reference; ``next_block`` produces the same
    stream vectorized, using the fact that the i-th state is seed + i*gamma.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + SPLITMIX_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return z ^ (z >> 31)

    def next_block(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(SPLITMIX_GAMMA)
        self.state = (self.state + n * SPLITMIX_GAMMA) & MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def _unit_open_closed(bits: np.ndarray) -> np.ndarray:
    # top 53 bits -> (0, 1]; never 0 so log() is safe
    return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)


def seeded_normal(rng: SplitMix64, shape, stddev: float) -> np.ndarray:
    """Gaussian tensor from Box-Muller over consecutive splitmix64 pairs.

    Each pair (u1, u2) yields r*cos(2*pi*u2), r*sin(2*pi*u2) with
    r = sqrt(-2 ln u1), emitted in that order. An odd element count drops
    the final sine; pairs never straddle two tensors. Math runs in float64
    and the scaled result is rounded to float32.
    """
    if stddev <= 0:
        raise ValueError("stddev must be positive")
    shape = tuple(int(s) for s in shape)
    n = math.prod(shape)
    pairs = (n + 1) // 2
    bits = rng.next_block(2 * pairs)
    u1 = _unit_open_closed(bits[0::2])
    u2 = _unit_open_closed(bits[1::2])
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = radius * np.cos(theta)
    z[1::2] = radius * np.sin(theta)
    return (z[:n] * stddev).astype(F32).reshape(shape)
