import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dyntok.errors import GeometryError, NonFiniteError, ShapeError
from dyntok.tensor import (F32, SplitMix64, depthwise_conv3x3, gelu, layer_norm, matmul,
                           seeded_normal, softmax_rows, strided_conv)


# --- naive oracles -----------------------------------------------------------

def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=F32)
    for i in range(m):
        for j in range(n):
            acc = F32(0)
            for t in range(k):
                acc = F32(acc + F32(a[i, t] * b[t, j]))
            out[i, j] = acc
    return out


def naive_conv(x, w, stride, pad, bias=None):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad), dtype=F32)
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo), dtype=F32)
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = F32(0)
                for ci in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            acc = F32(acc + F32(w[co, ci, ky, kx] * xp[ci, i * stride + ky, j * stride + kx]))
                if bias is not None:
                    acc = F32(acc + bias[co])
                out[co, i, j] = acc
    return out


def naive_depthwise(x, w, bias):
    c, h, wd = x.shape
    xp = np.zeros((c, h + 2, wd + 2), dtype=F32)
    xp[:, 1:-1, 1:-1] = x
    out = np.zeros_like(x)
    for ch in range(c):
        for i in range(h):
            for j in range(wd):
                acc = F32(0)
                for ky in range(3):
                    for kx in range(3):
                        acc = F32(acc + F32(w[ch, ky, kx] * xp[ch, i + ky, j + kx]))
                out[ch, i, j] = F32(acc + bias[ch])
    return out


def reference_splitmix64(seed, count):
    """Straight transcription of the published C reference."""
    state = seed
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) % 2**64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
        out.append(z ^ (z >> 31))
    return out


# --- matmul ------------------------------------------------------------------

def test_matmul_identity(rng):
    b = rng.normal(size=(3, 5)).astype(F32)
    assert np.array_equal(matmul(np.eye(3), b), b)


def test_matmul_hand_example():
    assert matmul([[1, 2], [3, 4]], [[1], [1]]).tolist() == [[3], [7]]


def test_matmul_bit_exact_against_naive_loop(rng):
    a = rng.normal(size=(8, 8)).astype(F32)
    b = rng.normal(size=(8, 8)).astype(F32)
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        matmul([[np.inf]], [[1.0]])


def test_matmul_repeatable(rng):
    a = rng.normal(size=(20, 33)).astype(F32)
    b = rng.normal(size=(33, 7)).astype(F32)
    assert matmul(a, b).tobytes() == matmul(a, b).tobytes()


# --- softmax / layer norm / gelu -----------------------------------------------

def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], atol=1e-7)


@pytest.mark.parametrize("c", [-30.0, 0.0, 2.5, 80.0])
def test_softmax_closed_form(c):
    np.testing.assert_allclose(softmax_rows([[c, c + math.log(3)]]), [[0.25, 0.75]], atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 40)),
              elements=st.floats(-80, 80, width=32)),
       st.floats(-40, 40, width=32))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    s = softmax_rows(x)
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.astype(np.float64).sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax_rows(x + F32(c)), s, atol=1e-6)


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(np.full((2, 5), 3.25, F32), np.ones(5), np.zeros(5))
    assert np.array_equal(out, np.zeros((2, 5), F32))


def test_layer_norm_two_values():
    np.testing.assert_allclose(layer_norm([[1.0, 3.0]], np.ones(2), np.zeros(2), eps=1e-12), [[-1, 1]], atol=1e-6)


def test_layer_norm_statistics_and_beta_shift(rng):
    x = rng.normal(3.0, 5.0, size=(16, 32)).astype(F32)
    y = layer_norm(x, np.ones(32), np.zeros(32))
    assert np.all(np.abs(y.mean(axis=1)) < 1e-5)
    assert np.all(np.abs(y.var(axis=1) - 1) < 1e-3)
    beta = rng.normal(size=32).astype(F32)
    np.testing.assert_array_equal(layer_norm(x, np.ones(32), beta), y + beta)


def test_layer_norm_requires_positive_eps():
    with pytest.raises(ValueError):
        layer_norm(np.ones((1, 2)), np.ones(2), np.zeros(2), eps=0)


def test_gelu_reference_points():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(gelu(x), ref, rtol=1e-6, atol=1e-7)
    assert gelu([0.0])[0] == 0.0


# --- convolutions --------------------------------------------------------------

def test_depthwise_delta_kernel_is_identity(rng):
    x = rng.normal(size=(4, 5, 6)).astype(F32)
    w = np.zeros((4, 3, 3), F32)
    w[:, 1, 1] = 1
    assert np.array_equal(depthwise_conv3x3(x, w, np.zeros(4)), x)


def test_depthwise_ones_kernel_on_constant_map():
    out = depthwise_conv3x3(np.full((1, 5, 5), 2.0), np.ones((1, 3, 3)), np.zeros(1))
    assert out[0, 2, 2] == 18.0
    assert out[0, 0, 0] == 8.0  # corner sees 4 in-bounds taps


def test_depthwise_matches_naive(rng):
    x = rng.normal(size=(1, 5, 5)).astype(F32)
    w = rng.normal(size=(1, 3, 3)).astype(F32)
    b = rng.normal(size=1).astype(F32)
    assert np.array_equal(depthwise_conv3x3(x, w, b), naive_depthwise(x, w, b))


def test_depthwise_shape_errors():
    with pytest.raises(ShapeError):
        depthwise_conv3x3(np.ones((2, 4, 4)), np.ones((3, 3, 3)), np.zeros(2))


def test_conv_1x1_is_per_pixel_linear_map(rng):
    x = rng.normal(size=(3, 4, 5)).astype(F32)
    w = rng.normal(size=(2, 3, 1, 1)).astype(F32)
    out = strided_conv(x, w, 1, 0)
    pix = matmul(x.reshape(3, -1).T, w[:, :, 0, 0].T)
    np.testing.assert_array_equal(out, pix.T.reshape(2, 4, 5))


def test_conv_averaging_on_constant_map():
    w = np.full((1, 1, 2, 2), 0.25, F32)
    out = strided_conv(np.full((1, 4, 4), 7.0), w, 2, 0)
    assert out.shape == (1, 2, 2)
    assert np.all(out == 7.0)


def test_conv_matches_naive(rng):
    x = rng.normal(size=(2, 6, 6)).astype(F32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(F32)
    b = rng.normal(size=3).astype(F32)
    got = strided_conv(x, w, 2, 1, b)
    assert got.shape == (3, 3, 3)
    assert np.array_equal(got, naive_conv(x, w, 2, 1, b))


def test_conv_invalid_geometry():
    with pytest.raises(GeometryError):
        strided_conv(np.ones((1, 2, 2)), np.ones((1, 1, 5, 5)), 1, 0)


# --- seeded rng ----------------------------------------------------------------

def test_splitmix64_published_vectors():
    assert SplitMix64(0).next_u64() == 0xE220A8397B1DCDAF
    r = SplitMix64(1234567)
    assert [r.next_u64() for _ in range(3)] == [6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_splitmix64_seed_42_against_reference():
    expected = reference_splitmix64(42, 5)
    assert expected[0] == 0xBDD732262FEB6E95
    r = SplitMix64(42)
    assert [r.next_u64() for _ in range(5)] == expected


def test_splitmix64_block_matches_scalar_stream():
    a, b = SplitMix64(99), SplitMix64(99)
    block = [int(v) for v in a.next_block(17)]
    assert block == [b.next_u64() for _ in range(17)]
    assert a.state == b.state
    assert a.next_u64() == b.next_u64()


def test_seeded_normal_deterministic():
    x = seeded_normal(SplitMix64(7), (4, 5), 0.5)
    y = seeded_normal(SplitMix64(7), (4, 5), 0.5)
    assert x.dtype == F32 and x.shape == (4, 5)
    assert x.tobytes() == y.tobytes()


def test_seeded_normal_statistics():
    x = seeded_normal(SplitMix64(2024), (100_000,), 1.0).astype(np.float64)
    assert np.all(np.isfinite(x))
    assert abs(x.mean()) < 0.02
    assert abs(x.std() - 1) < 0.02


def test_seeded_normal_odd_count_drops_last_sine():
    odd = seeded_normal(SplitMix64(3), (5,), 1.0)
    even = seeded_normal(SplitMix64(3), (6,), 1.0)
    assert np.array_equal(odd, even[:5])


def test_seeded_normal_rejects_bad_stddev():
    with pytest.raises(ValueError):
        seeded_normal(SplitMix64(0), (2,), 0.0)
