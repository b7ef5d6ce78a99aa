"""The numba kernels must agree with the pure-numpy fallbacks."""
import numpy as np
import pytest

from imponderous import kernels

pytestmark = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba not installed")

NP, NB = kernels.NUMPY_KERNELS, kernels.NUMBA_KERNELS


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


@pytest.mark.parametrize("shape,k,stride,pad", [
    ((2, 3, 8, 8), 3, 1, 1),
    ((1, 1, 12, 12), 5, 1, 2),
    ((2, 4, 7, 9), 3, 2, 1),
    ((1, 2, 6, 6), 1, 1, 0),
    ((1, 2, 5, 5), 2, 1, 0),
])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_col2im_parity(rng, shape, k, stride, pad, dtype):
    n, c, h, w = shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    x = rng.normal(size=shape).astype(dtype)
    a = NP["im2col"](x, k, k, stride, pad, ho, wo)
    b = NB["im2col"](x, k, k, stride, pad, ho, wo)
    np.testing.assert_array_equal(a, b)
    cols = rng.normal(size=a.shape).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(NP["col2im"](cols, c, h, w, k, k, stride, pad, ho, wo),
                               NB["col2im"](cols, c, h, w, k, k, stride, pad, ho, wo), rtol=tol, atol=tol)


def test_col2im_is_adjoint_of_im2col(rng):
    # <im2col(x), y> == <x, col2im(y)>
    x = rng.normal(size=(2, 3, 7, 7))
    ho = wo = out_size(7, 3, 2, 1)
    cols = kernels.im2col(x, 3, 3, 2, 1, ho, wo)
    y = rng.normal(size=cols.shape)
    lhs = float((cols * y).sum())
    rhs = float((x * kernels.col2im(y, 3, 7, 7, 3, 3, 2, 1, ho, wo)).sum())
    assert abs(lhs - rhs) < 1e-9


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_maxpool_parity(rng, dtype):
    x = rng.normal(size=(2, 3, 10, 12)).astype(dtype)
    x[0, 0, :2, :2] = 1.0  # a full tie
    out_a, arg_a = NP["maxpool2_forward"](x)
    out_b, arg_b = NB["maxpool2_forward"](x)
    np.testing.assert_array_equal(out_a, out_b)
    np.testing.assert_array_equal(arg_a, arg_b)
    assert arg_a[0, 0, 0, 0] == 0
    g = rng.normal(size=out_a.shape).astype(dtype)
    np.testing.assert_array_equal(NP["maxpool2_backward"](g, arg_a), NB["maxpool2_backward"](g, arg_b))


@pytest.mark.parametrize("tile,h,w", [(2, 8, 6), (4, 8, 12)])
def test_winograd_transform_parity(rng, tile, h, w):
    x = rng.normal(size=(2, 5, h, w)).astype(np.float32)
    va = NP["winograd_input"](x, 1, tile)
    vb = NB["winograd_input"](x, 1, tile)
    assert va.shape == ((tile + 2) ** 2, 5, 2 * (h // tile) * (w // tile))
    np.testing.assert_allclose(va, vb, rtol=1e-5, atol=1e-5)
    m = rng.normal(size=(va.shape[0], 4, va.shape[2])).astype(np.float32)
    bias = rng.normal(size=4).astype(np.float32)
    np.testing.assert_allclose(NP["winograd_output"](m, bias, 2, h // tile, w // tile, tile),
                               NB["winograd_output"](m, bias, 2, h // tile, w // tile, tile),
                               rtol=1e-5, atol=1e-4)


@pytest.mark.parametrize("tile", [2, 4])
def test_winograd_filter_matches_matrix_form(rng, tile):
    g = rng.normal(size=(3, 2, 3, 3))
    u = kernels.winograd_filter(g, tile)
    G = kernels.WINO_MATRICES[tile][0]
    for o in range(3):
        for i in range(2):
            np.testing.assert_allclose(u[:, o, i].reshape(tile + 2, tile + 2), G @ g[o, i] @ G.T, atol=1e-12)


@pytest.mark.parametrize("tile", [2, 4])
def test_winograd_single_tile_equals_direct_correlation(rng, tile):
    # A^T [ (G g G^T) * (B^T d B) ] A is the valid 3x3 correlation of one tile
    G, BT, AT = kernels.WINO_MATRICES[tile]
    d = rng.normal(size=(tile + 2, tile + 2))
    g = rng.normal(size=(3, 3))
    y = AT @ ((G @ g @ G.T) * (BT @ d @ BT.T)) @ AT.T
    ref = np.array([[np.sum(d[i:i + 3, j:j + 3] * g) for j in range(tile)] for i in range(tile)])
    np.testing.assert_allclose(y, ref, atol=1e-10)


def test_tile_planes_layout_and_scratch_reuse():
    t = kernels.tile_planes(16, 4, 256, np.float32)
    assert t.shape == (16, 4, 256)
    assert t.strides[0] % 4096 != 0
    a = kernels.tile_planes(36, 8, 64, np.float32, role="test")
    b = kernels.tile_planes(16, 8, 64, np.float32, role="test")
    assert np.shares_memory(a, b)
    kernels.release_scratch()


@pytest.mark.parametrize("tile", [2, 4])
def test_winograd_output_mfm_parity(rng, tile):
    m = rng.normal(size=((tile + 2) ** 2, 6, 2 * 3 * 2)).astype(np.float32)
    bias = rng.normal(size=6).astype(np.float32)
    ya, fa = NP["winograd_output_mfm"](m, bias, 2, 3, 2, tile)
    yb, fb = NB["winograd_output_mfm"](m, bias, 2, 3, 2, tile)
    assert ya.shape == (2, 3, 3 * tile, 2 * tile)
    np.testing.assert_allclose(ya, yb, rtol=1e-5, atol=1e-4)
    full = NB["winograd_output"](m, bias, 2, 3, 2, tile)
    np.testing.assert_array_equal(yb, np.maximum(full[:, :3], full[:, 3:]))
    np.testing.assert_array_equal(fb, full[:, :3] >= full[:, 3:])
