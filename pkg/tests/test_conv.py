import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import conv_shift_add, numeric_grad, rel_err
from volconv.conv import (BenchRecord, ConvFilter, GemmShape, Workspace, col2im, conv3d_backward,
                          conv3d_forward, gemm, gemm_shape, im2col, timed_conv)
from volconv.errors import ShapeError


def random_case(seed, N, X, Y, Z, C, M, l=3, dtype=np.float32):
    """Input and filter drawn from U[-1, 1)."""
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, (N, X, Y, Z, C)).astype(dtype)
    f = ConvFilter(r.uniform(-1, 1, (C, l, l, l, M)).astype(dtype),
                   r.uniform(-1, 1, M).astype(dtype))
    return x, f


# --- shapes --------------------------------------------------------------------

def test_gemm_shape_baseline_first_layer():
    s = gemm_shape((4, 41, 49, 41, 1), (1, 3, 3, 3, 8))
    assert (s.k, s.n) == (27, 329476)


def test_gemm_shape_segmented_first_layer():
    assert gemm_shape((4, 23, 27, 23, 8), (8, 3, 3, 3, 64)) == GemmShape(64, 216, 57132)


def test_gemm_shape_bench_family():
    assert gemm_shape((4, 72, 72, 72, 1), (1, 3, 3, 3, 8)) == GemmShape(8, 27, 1492992)
    assert gemm_shape((4, 12, 12, 12, 216), (216, 3, 3, 3, 8)) == GemmShape(8, 5832, 6912)
    s36 = gemm_shape((4, 2, 2, 2, 46656), (46656, 3, 3, 3, 8))
    assert (s36.k, s36.n) == (1259712, 32)
    assert s36.flops == gemm_shape((4, 72, 72, 72, 1), (1, 3, 3, 3, 8)).flops


def test_gemm_shape_channel_mismatch():
    with pytest.raises(ShapeError):
        gemm_shape((1, 4, 4, 4, 2), (3, 3, 3, 3, 8))


def test_filter_validation():
    with pytest.raises(ValueError):
        ConvFilter(np.zeros((1, 2, 2, 2, 1)), np.zeros(1))
    with pytest.raises(ShapeError):
        ConvFilter(np.zeros((1, 3, 3, 3, 2)), np.zeros(3))


# --- im2col -------------------------------------------------------------------

def test_im2col_single_voxel():
    cols = im2col(np.full((1, 1, 1, 1, 1), 7.0, np.float32), 3)
    assert cols.shape == (27, 1)
    expect = np.zeros(27)
    expect[13] = 7.0
    np.testing.assert_array_equal(cols[:, 0], expect)


def test_im2col_row_order():
    # row (c, dx, dy, dz), column (n, x, y, z): compare with a padded lookup
    x = np.arange(2 * 3 * 4 * 2 * 2, dtype=np.float64).reshape(2, 3, 4, 2, 2) + 1
    cols = im2col(x, 3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    N, X, Y, Z, C = x.shape
    for c in range(C):
        for d in range(27):
            dx, dy, dz = np.unravel_index(d, (3, 3, 3))
            expect = xp[:, dx:dx + X, dy:dy + Y, dz:dz + Z, c].reshape(-1)
            np.testing.assert_array_equal(cols[c * 27 + d], expect)


def test_im2col_even_side():
    with pytest.raises(ValueError):
        im2col(np.zeros((1, 2, 2, 2, 1)), 2)


def test_col2im_is_adjoint():
    r = np.random.default_rng(3)
    x = r.standard_normal((2, 4, 3, 5, 2))
    c = r.standard_normal((2 * 27, 2 * 4 * 3 * 5))
    assert np.isclose(np.sum(im2col(x, 3) * c), np.sum(x * col2im(c, x.shape, 3)))


# --- gemm -------------------------------------------------------------------------

@pytest.mark.parametrize("m,k,n", [(1, 1, 1), (8, 27, 300), (70, 130, 2100), (5, 300, 17)])
def test_blocked_gemm_matches_matmul(m, k, n):
    r = np.random.default_rng(m + k + n)
    a, b = r.standard_normal((m, k)), r.standard_normal((k, n))
    np.testing.assert_allclose(gemm(a, b, "blocked"), a @ b, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gemm(a, b, "blocked", blocks=(3, 5, 7)), a @ b,
                               rtol=1e-12, atol=1e-12)


def test_gemm_errors():
    with pytest.raises(ShapeError):
        gemm(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        gemm(np.zeros((2, 3)), np.zeros((3, 2)), "fft")


# --- forward ----------------------------------------------------------------------

def test_identity_kernel():
    x, _ = random_case(0, 2, 5, 4, 3, 1, 1)
    w = np.zeros((1, 3, 3, 3, 1), np.float32)
    w[0, 1, 1, 1, 0] = 1
    f = ConvFilter(w, np.zeros(1, np.float32))
    np.testing.assert_array_equal(conv3d_forward(x, f), x)
    np.testing.assert_array_equal(conv3d_forward(x, f, mode="naive"), x)


def test_all_ones_kernel_counts_taps():
    f = ConvFilter(np.ones((1, 3, 3, 3, 1), np.float32), np.zeros(1, np.float32))
    y = conv3d_forward(np.ones((1, 5, 5, 5, 1), np.float32), f)
    assert y[0, 2, 2, 2, 0] == 27.0
    assert y[0, 0, 0, 0, 0] == 8.0
    assert y[0, 0, 2, 2, 0] == 18.0


def test_random_case_gemm_vs_naive():
    x, f = random_case(1, 2, 7, 6, 5, 3, 4)
    a = conv3d_forward(x, f)
    b = conv3d_forward(x, f, mode="naive")
    assert np.max(np.abs(a - b)) < 1e-5


@pytest.mark.parametrize("kernel", ["blocked", "blas"])
@pytest.mark.parametrize("seed", range(6))
def test_forward_matches_shift_add_oracle(kernel, seed):
    r = np.random.default_rng(100 + seed)
    dims = r.integers(1, 7, size=3)
    C, M = r.integers(1, 9, size=2)
    l = (1, 3, 5)[seed % 3]
    x, f = random_case(seed, int(r.integers(1, 3)), *map(int, dims), int(C), int(M), l,
                       dtype=np.float64)
    np.testing.assert_allclose(conv3d_forward(x, f, kernel=kernel),
                               conv_shift_add(x, f.weights, f.bias), rtol=1e-10, atol=1e-10)


def test_forward_chunking_is_exact():
    x, f = random_case(4, 3, 6, 5, 4, 2, 3, dtype=np.float64)
    whole = conv3d_forward(x, f)
    sliced = conv3d_forward(x, f, budget_bytes=1)
    np.testing.assert_array_equal(whole, sliced)
    ws = Workspace()
    np.testing.assert_array_equal(conv3d_forward(x, f, workspace=ws), whole)
    np.testing.assert_array_equal(conv3d_forward(x, f, workspace=ws), whole)


def test_forward_channel_mismatch():
    x, f = random_case(0, 1, 3, 3, 3, 2, 2)
    with pytest.raises(ShapeError):
        conv3d_forward(x[..., :1], f)
    with pytest.raises(ValueError):
        conv3d_forward(x, f, mode="winograd")


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_forward_linearity(a, b, seed):
    x, f = random_case(seed, 1, 4, 3, 3, 2, 3, dtype=np.float64)
    y = np.random.default_rng(seed + 1).standard_normal(x.shape)
    f0 = ConvFilter(f.weights, np.zeros_like(f.bias))
    lhs = conv3d_forward(a * x + b * y, f0)
    rhs = a * conv3d_forward(x, f0) + b * conv3d_forward(y, f0)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


# --- backward -----------------------------------------------------------------------

def test_backward_zero_grad():
    x, f = random_case(0, 1, 3, 4, 3, 2, 3)
    gx, gw, gb = conv3d_backward(x, f, np.zeros((1, 3, 4, 3, 3), np.float32))
    assert not gx.any() and not gw.any() and not gb.any()


def test_backward_identity_kernel():
    x, _ = random_case(0, 2, 4, 3, 5, 1, 1, dtype=np.float64)
    w = np.zeros((1, 3, 3, 3, 1))
    w[0, 1, 1, 1, 0] = 1
    g = np.random.default_rng(1).standard_normal(x.shape)
    gx, _, _ = conv3d_backward(x, ConvFilter(w, np.zeros(1)), g)
    np.testing.assert_allclose(gx, g, rtol=0, atol=1e-15)


def test_backward_shape_mismatch():
    x, f = random_case(0, 1, 3, 3, 3, 2, 3)
    with pytest.raises(ShapeError):
        conv3d_backward(x, f, np.zeros((1, 3, 3, 3, 2), np.float32))


def conv_grad_check(seed, kernel="blas"):
    r = np.random.default_rng(500 + seed)
    N = int(r.integers(1, 3))
    X, Y, Z = (int(v) for v in r.integers(1, 5, size=3))
    C, M = (int(v) for v in r.integers(1, 4, size=2))
    x, f = random_case(seed, N, X, Y, Z, C, M, dtype=np.float64)
    g = r.standard_normal((N, X, Y, Z, M))

    def loss():
        return float(np.sum(g * conv3d_forward(x, f, kernel=kernel)))

    gx, gw, gb = conv3d_backward(x, f, g, kernel=kernel)
    return (rel_err(gx, numeric_grad(loss, x, 1e-5)),
            rel_err(gw, numeric_grad(loss, f.weights, 1e-5)),
            rel_err(gb, numeric_grad(loss, f.bias, 1e-5)))


@pytest.mark.parametrize("seed", range(20))
def test_backward_finite_differences(seed):
    errs = conv_grad_check(seed, kernel="blocked" if seed % 2 else "blas")
    assert max(errs) < 1e-6, errs


def test_backward_chunking_is_exact():
    x, f = random_case(9, 2, 5, 4, 3, 2, 3, dtype=np.float64)
    g = np.random.default_rng(9).standard_normal((2, 5, 4, 3, 3))
    a = conv3d_backward(x, f, g)
    b = conv3d_backward(x, f, g, budget_bytes=1)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
    gx, _, _ = conv3d_backward(x, f, g, need_input_grad=False)
    assert gx is None


# --- timing ---------------------------------------------------------------------------

def test_timed_conv_record():
    rec = timed_conv((1, 6, 6, 6, 1), (1, 3, 3, 3, 8), reps=1)
    assert len(rec.samples_ms) == 1
    assert rec.shape == GemmShape(8, 27, 216)
    assert rec.mean_ms == rec.total_ms
    assert rec.std_ms == 0.0
    rec3 = timed_conv((1, 6, 6, 6, 1), (1, 3, 3, 3, 8), reps=3)
    assert np.isclose(rec3.mean_ms, rec3.total_ms / 3)
    with pytest.raises(ValueError):
        timed_conv((1, 6, 6, 6, 1), (1, 3, 3, 3, 8), reps=0)


def test_bench_record_csv():
    rec = BenchRecord(k=2, shape=GemmShape(8, 216, 4), reps=2, threads=1, samples_ms=[1.0, 3.0])
    assert BenchRecord.CSV_HEADER.split(",")[:9] == \
        "k,m,kdim,n,reps,threads,total_ms,mean_ms,std_ms".split(",")
    fields = rec.csv_row().split(",")
    assert fields[:6] == ["2", "8", "216", "4", "2", "1"]
    assert float(fields[6]) == 4.0 and float(fields[7]) == 2.0
    assert np.isclose(float(fields[8]), np.sqrt(2.0))
    assert int(fields[9]) == 2 * 8 * 216 * 4
