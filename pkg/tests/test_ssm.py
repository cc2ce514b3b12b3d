import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselnet.checks import check_function
from vesselnet.ssm import (S6Block, SelectiveScanParams, discretize, dump_selective_params, scan_chunked,
                           scan_naive, selective_scan)
from vesselnet.io import read_tensor
from vesselnet.tensor import DimensionError, ParameterError, Tensor


def random_params(rng, L, D=3, N=4, batch=(), h0=False):
    return SelectiveScanParams(
        x=rng.normal(size=batch + (L, D)),
        delta=rng.uniform(0.01, 1.0, size=batch + (L, D)),
        A=-rng.uniform(0.1, 2.0, size=(D, N)),
        B=rng.normal(size=batch + (L, N)),
        C=rng.normal(size=batch + (L, N)),
        h0=rng.normal(size=batch + (D, N)) if h0 else None,
    )


def test_discretize_zero_step_limit():
    a_bar, b_bar = discretize(np.array([-1.0]), np.array([1.0]), np.array([1e-12]))
    assert a_bar[0] == pytest.approx(1.0) and abs(b_bar[0]) < 1e-11


def test_discretize_half_life():
    a_bar, _ = discretize(np.array([-1.0]), np.array([1.0]), np.array([math.log(2.0)]))
    assert a_bar[0] == pytest.approx(0.5, abs=1e-15)


def test_discretize_closed_form():
    a_bar, b_bar = discretize(np.array([-2.0, -0.5]), np.array([3.0, 3.0]), np.array(1.0))
    np.testing.assert_allclose(a_bar, [math.exp(-2.0), math.exp(-0.5)], rtol=1e-15)
    np.testing.assert_allclose(b_bar, [3.0, 3.0])


def test_discretize_rejects_non_positive_step():
    with pytest.raises(ParameterError):
        discretize(np.array([-1.0]), np.array([1.0]), np.array([0.0]))


def test_zero_input_zero_output():
    p = random_params(np.random.default_rng(0), 6)
    p.x = np.zeros_like(p.x)
    np.testing.assert_array_equal(scan_naive(p), 0.0)


def test_single_step():
    p = random_params(np.random.default_rng(1), 1)
    expected = (p.C[0] * p.B[0]).sum() * p.delta[0] * p.x[0]
    np.testing.assert_allclose(scan_naive(p)[0], expected, rtol=1e-13)


def test_hand_unrolled_length_four():
    rng = np.random.default_rng(2)
    p = random_params(rng, 4, D=2, N=3, h0=True)
    a = [np.exp(p.delta[t][:, None] * p.A) for t in range(4)]
    u = [(p.delta[t] * p.x[t])[:, None] * p.B[t][None, :] for t in range(4)]
    h1 = a[0] * p.h0 + u[0]
    h2 = a[1] * a[0] * p.h0 + a[1] * u[0] + u[1]
    h3 = a[2] * a[1] * a[0] * p.h0 + a[2] * a[1] * u[0] + a[2] * u[1] + u[2]
    h4 = a[3] * a[2] * a[1] * a[0] * p.h0 + a[3] * a[2] * a[1] * u[0] + a[3] * a[2] * u[1] + a[3] * u[2] + u[3]
    y = np.stack([(h * p.C[t]).sum(-1) for t, h in enumerate([h1, h2, h3, h4])])
    np.testing.assert_allclose(scan_naive(p), y, atol=1e-12)


def test_chunk_equal_to_length_is_bitwise():
    p = random_params(np.random.default_rng(3), 37, batch=(2,), h0=True)
    assert np.array_equal(scan_chunked(p, 37), scan_naive(p))


def test_long_sequence_chunked():
    p = random_params(np.random.default_rng(4), 257)
    assert np.max(np.abs(scan_chunked(p, 32) - scan_naive(p))) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 80), st.integers(1, 90))
def test_chunked_matches_naive(seed, L, chunk):
    p = random_params(np.random.default_rng(seed), L, batch=(2,))
    np.testing.assert_allclose(scan_chunked(p, chunk), scan_naive(p), atol=1e-12)


def test_validation_errors():
    p = random_params(np.random.default_rng(5), 5)
    p.A = np.abs(p.A)
    with pytest.raises(ParameterError):
        scan_naive(p)
    p = random_params(np.random.default_rng(5), 5)
    p.B = p.B[:4]
    with pytest.raises(DimensionError):
        scan_naive(p)
    p = random_params(np.random.default_rng(5), 5)
    p.delta[2, 1] = 0.0
    with pytest.raises(ParameterError):
        scan_naive(p)
    with pytest.raises(ParameterError):
        scan_chunked(random_params(np.random.default_rng(5), 5), 0)


def test_scan_op_gradients_f64():
    rng = np.random.default_rng(6)
    p = random_params(rng, 9, D=2, N=3, batch=(2,), h0=True)
    err = check_function(lambda x, d, a, b, c, h: selective_scan(x, d, a, b, c, h, chunk=4),
                         [p.x, p.delta, p.A, p.B, p.C, p.h0])
    assert err < 1e-6


def test_s6_zero_tokens_give_zero():
    blk = S6Block(4, 5, rng=np.random.default_rng(0), dtype=np.float64)
    assert np.array_equal(blk(Tensor(np.zeros((2, 7, 4)))).data, np.zeros((2, 7, 4)))


def test_s6_single_token_closed_form():
    rng = np.random.default_rng(1)
    blk = S6Block(4, 3, rng=rng, dtype=np.float64)
    tok = rng.normal(size=(1, 1, 4))
    x = tok @ blk.in_proj.weight.data.T
    z = x @ blk.dt_proj.weight.data.T + blk.dt_proj.bias.data
    delta = np.log1p(np.exp(z))
    B = x @ blk.B_proj.weight.data.T + blk.B_proj.bias.data
    C = x @ blk.C_proj.weight.data.T + blk.C_proj.bias.data
    y = delta * x * (B * C).sum(-1, keepdims=True)
    g = tok @ blk.gate_proj.weight.data.T
    expected = (y * g / (1 + np.exp(-g))) @ blk.out_proj.weight.data.T
    np.testing.assert_allclose(blk(Tensor(tok)).data, expected, rtol=1e-12)


def test_s6_a_is_strictly_negative():
    blk = S6Block(3, 6, rng=np.random.default_rng(0))
    assert np.all(blk.A().data < 0)


def test_s6_gradient_fd_float32():
    rng = np.random.default_rng(2)
    blk = S6Block(4, 4, rng=rng, dtype=np.float32)
    tokens = rng.normal(size=(1, 8, 4))
    blk64 = S6Block(4, 4, rng=np.random.default_rng(2), dtype=np.float64)

    def fn(t):
        return (blk64 if t.dtype == np.float64 else blk)(t)

    assert check_function(fn, [tokens], "float32") < 1e-3


def test_dump_constant_and_zero_inputs(tmp_path):
    blk = S6Block(3, 4, rng=np.random.default_rng(0), dtype=np.float64)
    const = Tensor(np.broadcast_to(np.arange(1.0, 4.0)[None, :, None, None], (1, 3, 5, 6)).copy())
    maps = dump_selective_params(blk, const, tmp_path)
    assert maps["delta"].shape == (1, 5, 6)
    assert np.ptp(maps["delta"]) == 0.0
    zero = dump_selective_params(blk, Tensor(np.zeros((2, 3, 4, 4))), tmp_path / "z")
    np.testing.assert_allclose(zero["b_norm"], np.linalg.norm(blk.B_proj.bias.data))
    np.testing.assert_array_equal(read_tensor(tmp_path / "z" / "b_norm.mvnt"), zero["b_norm"])
