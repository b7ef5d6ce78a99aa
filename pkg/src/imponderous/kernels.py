"""Hot inner loops: im2col / col2im, 2x2 max pooling and Winograd tile transforms.

Every kernel exists twice, once as plain numpy and once compiled with
numba.  ``IMPONDEROUS_BACKEND=numpy`` forces the numpy path; otherwise the
numba path is used whenever numba imports cleanly.  Both paths return
bit-identical results (they only move data or take maxima, never reorder a
floating point reduction), which the test-suite checks.
"""
from __future__ import annotations

import os
import threading

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------

def im2col_numpy(x, kh, kw, stride, pad, ho, wo):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im_numpy(cols, c, h, w, kh, kw, stride, pad, ho, wo):
    n = cols.shape[0]
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp


def maxpool2_forward_numpy(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    # argmax returns the first maximum: row-major tie-break inside the window
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward_numpy(gout, arg):
    n, c, ho, wo = gout.shape
    g4 = np.zeros((n, c, ho, wo, 4), dtype=gout.dtype)
    np.put_along_axis(g4, arg[..., None].astype(np.intp), gout[..., None], axis=-1)
    return g4.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)


def maxpool2_gather(x, arg):
    """Pool by the given window offsets instead of each window's own maximum."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    return np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]


# Winograd F(m x m, 3x3): an (m+2)x(m+2) input tile and a 3x3 filter give an
# m x m output tile.  m = 2 needs 16 multiplies per tile instead of 36;
# m = 4 needs 36 instead of 144.
WINO_G = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0.0, 0.0, 1.0]])
WINO_BT = np.array([[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 1.0, 0.0], [0.0, -1.0, 1.0, 0.0], [0.0, 1.0, 0.0, -1.0]])
WINO_AT = np.array([[1.0, 1.0, 1.0, 0.0], [0.0, 1.0, -1.0, -1.0]])

WINO4_G = np.array([[1 / 4, 0, 0], [-1 / 6, -1 / 6, -1 / 6], [-1 / 6, 1 / 6, -1 / 6],
                    [1 / 24, 1 / 12, 1 / 6], [1 / 24, -1 / 12, 1 / 6], [0, 0, 1]])
WINO4_BT = np.array([[4, 0, -5, 0, 1, 0], [0, -4, -4, 1, 1, 0], [0, 4, -4, -1, 1, 0],
                     [0, -2, -1, 2, 1, 0], [0, 2, -1, -2, 1, 0], [0, 4, 0, -5, 0, 1]], dtype=float)
WINO4_AT = np.array([[1, 1, 1, 1, 1, 0], [0, 1, -1, 2, -2, 0],
                     [0, 1, 1, 4, 4, 0], [0, 1, -1, 8, -8, 1]], dtype=float)

WINO_MATRICES = {2: (WINO_G, WINO_BT, WINO_AT), 4: (WINO4_G, WINO4_BT, WINO4_AT)}
# G g G^T as one linear map from the 9 filter taps to the (m+2)^2 tile entries
WINO_FILTER_MAPS = {m: np.einsum("ia,jb->ijab", g, g).reshape((m + 2) ** 2, 9)
                    for m, (g, _, _) in WINO_MATRICES.items()}
WINO_FILTER_MAP = WINO_FILTER_MAPS[2]

_scratch = threading.local()


def tile_planes(count, rows, cols, dtype, role=None):
    """``[count, rows, cols]`` array whose planes are not 4 KiB apart.

    The transforms stream through all planes at once; planes spaced by a
    multiple of the page size would all land in one L1 set.  With a
    ``role`` the memory comes from a per-thread buffer that is reused by
    the next request for the same role, so only pass one for temporaries.
    """
    dtype = np.dtype(dtype)
    plane = rows * cols + 16
    size = count * plane
    if role is None:
        flat = np.empty(size, dtype=dtype)
    else:
        pool = getattr(_scratch, "buffers", None)
        if pool is None:
            pool = _scratch.buffers = {}
        buf = pool.get((role, dtype))
        if buf is None or buf.size < size:
            buf = pool[(role, dtype)] = np.empty(size, dtype=dtype)
        flat = buf[:size]
    it = dtype.itemsize
    return np.lib.stride_tricks.as_strided(flat, shape=(count, rows, cols), strides=(plane * it, cols * it, it))


def release_scratch():
    """Drop this thread's reusable transform buffers."""
    _scratch.buffers = {}


def winograd_filter(kernel, tile=2, role=None):
    """``[Cout, Cin, 3, 3] -> [(m+2)^2, Cout, Cin]`` (G g G^T, flattened tile index first)."""
    cout, cin = kernel.shape[:2]
    fmap = WINO_FILTER_MAPS[tile].astype(kernel.dtype)
    u = tile_planes(fmap.shape[0], cout, cin, kernel.dtype, role)
    flat = np.lib.stride_tricks.as_strided(u, shape=(fmap.shape[0], cout * cin),
                                           strides=(u.strides[0], kernel.dtype.itemsize))
    np.matmul(fmap, kernel.reshape(cout * cin, 9).T, out=flat)
    return u


def _padded(x, pad):
    # (pad=1) the last tile reads two rows/columns past the last output
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def winograd_input_numpy(x, pad, tile=2, role=None):
    """``[N, C, H, W] -> [(m+2)^2, C, N*TH*TW]`` with TH = H/m output tiles per column."""
    n, c, h, w = x.shape
    a = tile + 2
    th, tw = h // tile, w // tile
    xp = _padded(x, pad)
    s = xp.strides
    d = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, th, tw, a, a), strides=(s[0], s[1], tile * s[2], tile * s[3], s[2], s[3]))
    bt = WINO_MATRICES[tile][1].astype(x.dtype)
    v = tile_planes(a * a, c, n * th * tw, x.dtype, role)
    v[...] = np.einsum("ia,nctwab,jb->ijcntw", bt, d, bt, optimize=True).reshape(a * a, c, n * th * tw)
    return v


def winograd_output_numpy(m, bias, n, th, tw, tile=2):
    """``[(m+2)^2, Cout, N*TH*TW] -> [N, Cout, m*TH, m*TW]`` plus bias."""
    cout = m.shape[1]
    a = tile + 2
    at = WINO_MATRICES[tile][2].astype(m.dtype)
    y = np.einsum("ia,abontw,jb->notiwj", at, m.reshape(a, a, cout, n, th, tw), at, optimize=True)
    y = y.reshape(n, cout, tile * th, tile * tw)
    y += bias[:, None, None]
    return y


def winograd_output_mfm_numpy(m, bias, n, th, tw, tile=2):
    """Output transform followed by max-feature-map: ``(y [N, Cout/2, H, W], take_first mask)``."""
    y = winograd_output_numpy(m, bias, n, th, tw, tile)
    c = y.shape[1] // 2
    take_first = y[:, :c] >= y[:, c:]
    return np.where(take_first, y[:, :c], y[:, c:]), take_first


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _ox_range(j, stride, pad, w, wo):
        # output columns whose source column ox*stride + j - pad lies inside [0, w)
        lo = 0
        while lo < wo and lo * stride + j - pad < 0:
            lo += 1
        hi = wo
        while hi > lo and (hi - 1) * stride + j - pad >= w:
            hi -= 1
        return lo, hi

    @njit(cache=True, nogil=True)
    def _im2col_nb(x, kh, kw, stride, pad, ho, wo, cols):
        # zero padding is fused: no padded copy of x is ever built
        n, c, h, w = x.shape
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        lo, hi = _ox_range(j, stride, pad, w, wo)
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            base = oy * wo
                            if iy < 0 or iy >= h:
                                for ox in range(wo):
                                    cols[b, row, base + ox] = 0.0
                                continue
                            for ox in range(lo):
                                cols[b, row, base + ox] = 0.0
                            for ox in range(lo, hi):
                                cols[b, row, base + ox] = x[b, ch, iy, ox * stride + j - pad]
                            for ox in range(hi, wo):
                                cols[b, row, base + ox] = 0.0
        return cols

    @njit(cache=True, nogil=True)
    def _col2im_nb(cols, kh, kw, stride, pad, ho, wo, dx):
        n, c, h, w = dx.shape
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        lo, hi = _ox_range(j, stride, pad, w, wo)
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            base = oy * wo
                            for ox in range(lo, hi):
                                dx[b, ch, iy, ox * stride + j - pad] += cols[b, row, base + ox]
        return dx

    @njit(cache=True, nogil=True)
    def _maxpool2_fwd_nb(x, out, arg):
        n, c, ho, wo = out.shape
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        y0 = 2 * oy
                        x0 = 2 * ox
                        best = x[b, ch, y0, x0]
                        k = 0
                        v = x[b, ch, y0, x0 + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, ch, y0 + 1, x0]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, ch, y0 + 1, x0 + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[b, ch, oy, ox] = best
                        arg[b, ch, oy, ox] = k
        return out, arg

    @njit(cache=True, nogil=True)
    def _maxpool2_bwd_nb(gout, arg, gx):
        n, c, ho, wo = gout.shape
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        k = arg[b, ch, oy, ox]
                        gx[b, ch, 2 * oy + k // 2, 2 * ox + k % 2] = gout[b, ch, oy, ox]
        return gx

    def im2col_numba(x, kh, kw, stride, pad, ho, wo):
        n, c = x.shape[:2]
        cols = np.empty((n, c * kh * kw, ho * wo), dtype=x.dtype)
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad, ho, wo, cols)

    def col2im_numba(cols, c, h, w, kh, kw, stride, pad, ho, wo):
        dx = np.zeros((cols.shape[0], c, h, w), dtype=cols.dtype)
        return _col2im_nb(np.ascontiguousarray(cols), kh, kw, stride, pad, ho, wo, dx)

    def maxpool2_forward_numba(x):
        n, c, h, w = x.shape
        out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
        arg = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
        return _maxpool2_fwd_nb(np.ascontiguousarray(x), out, arg)

    def maxpool2_backward_numba(gout, arg):
        n, c, ho, wo = gout.shape
        gx = np.zeros((n, c, 2 * ho, 2 * wo), dtype=gout.dtype)
        return _maxpool2_bwd_nb(np.ascontiguousarray(gout), arg, gx)

    @njit(cache=True, nogil=True)
    def _wino_input_nb(xp, th, tw, v):
        # xp is already zero-padded; scalar temporaries keep the tile in registers
        n, c = xp.shape[0], xp.shape[1]
        for ch in range(c):
            for b in range(n):
                for ty in range(th):
                    r0 = xp[b, ch, 2 * ty]
                    r1 = xp[b, ch, 2 * ty + 1]
                    r2 = xp[b, ch, 2 * ty + 2]
                    r3 = xp[b, ch, 2 * ty + 3]
                    base = (b * th + ty) * tw
                    for tx in range(tw):
                        x0 = 2 * tx
                        # B^T d, column by column
                        t00 = r0[x0] - r2[x0]
                        t01 = r0[x0 + 1] - r2[x0 + 1]
                        t02 = r0[x0 + 2] - r2[x0 + 2]
                        t03 = r0[x0 + 3] - r2[x0 + 3]
                        t10 = r1[x0] + r2[x0]
                        t11 = r1[x0 + 1] + r2[x0 + 1]
                        t12 = r1[x0 + 2] + r2[x0 + 2]
                        t13 = r1[x0 + 3] + r2[x0 + 3]
                        t20 = r2[x0] - r1[x0]
                        t21 = r2[x0 + 1] - r1[x0 + 1]
                        t22 = r2[x0 + 2] - r1[x0 + 2]
                        t23 = r2[x0 + 3] - r1[x0 + 3]
                        t30 = r1[x0] - r3[x0]
                        t31 = r1[x0 + 1] - r3[x0 + 1]
                        t32 = r1[x0 + 2] - r3[x0 + 2]
                        t33 = r1[x0 + 3] - r3[x0 + 3]
                        col = base + tx
                        # (B^T d) B
                        v[0, ch, col] = t00 - t02
                        v[1, ch, col] = t01 + t02
                        v[2, ch, col] = t02 - t01
                        v[3, ch, col] = t01 - t03
                        v[4, ch, col] = t10 - t12
                        v[5, ch, col] = t11 + t12
                        v[6, ch, col] = t12 - t11
                        v[7, ch, col] = t11 - t13
                        v[8, ch, col] = t20 - t22
                        v[9, ch, col] = t21 + t22
                        v[10, ch, col] = t22 - t21
                        v[11, ch, col] = t21 - t23
                        v[12, ch, col] = t30 - t32
                        v[13, ch, col] = t31 + t32
                        v[14, ch, col] = t32 - t31
                        v[15, ch, col] = t31 - t33
        return v

    @njit(cache=True, nogil=True)
    def _wino_output_nb(m, bias, n, th, tw, y):
        cout = m.shape[1]
        for o in range(cout):
            bo = bias[o]
            for b in range(n):
                for ty in range(th):
                    for tx in range(tw):
                        col = (b * th + ty) * tw + tx
                        # A^T m, one column of the 4x4 tile at a time
                        r00 = m[0, o, col] + m[4, o, col] + m[8, o, col]
                        r01 = m[1, o, col] + m[5, o, col] + m[9, o, col]
                        r02 = m[2, o, col] + m[6, o, col] + m[10, o, col]
                        r03 = m[3, o, col] + m[7, o, col] + m[11, o, col]
                        r10 = m[4, o, col] - m[8, o, col] - m[12, o, col]
                        r11 = m[5, o, col] - m[9, o, col] - m[13, o, col]
                        r12 = m[6, o, col] - m[10, o, col] - m[14, o, col]
                        r13 = m[7, o, col] - m[11, o, col] - m[15, o, col]
                        oy = 2 * ty
                        ox = 2 * tx
                        y[b, o, oy, ox] = r00 + r01 + r02 + bo
                        y[b, o, oy, ox + 1] = r01 - r02 - r03 + bo
                        y[b, o, oy + 1, ox] = r10 + r11 + r12 + bo
                        y[b, o, oy + 1, ox + 1] = r11 - r12 - r13 + bo
        return y

    @njit(inline="always")
    def _bt6(d0, d1, d2, d3, d4, d5, c2, c4, c5):
        return (c4 * d0 - c5 * d2 + d4, d3 + d4 - c4 * (d1 + d2), c4 * (d1 - d2) - d3 + d4,
                c2 * (d3 - d1) - d2 + d4, c2 * (d1 - d3) - d2 + d4, c4 * d1 - c5 * d3 + d5)

    @njit(inline="always")
    def _at6(m0, m1, m2, m3, m4, m5, c2, c4, c8):
        s12 = m1 + m2
        d12 = m1 - m2
        s34 = m3 + m4
        d34 = m3 - m4
        return (m0 + s12 + s34, d12 + c2 * d34, s12 + c4 * s34, d12 + c8 * d34 + m5)

    @njit(cache=True, nogil=True)
    def _wino4_input_nb(xp, th, tw, v, cst):
        # constants arrive as an array so float32 arithmetic stays float32;
        # each 6x6 tile lives in tuples, i.e. registers
        n, c = xp.shape[0], xp.shape[1]
        c2, c4, c5 = cst[0], cst[1], cst[2]
        for ch in range(c):
            for b in range(n):
                for ty in range(th):
                    y0 = 4 * ty
                    q0 = xp[b, ch, y0]
                    q1 = xp[b, ch, y0 + 1]
                    q2 = xp[b, ch, y0 + 2]
                    q3 = xp[b, ch, y0 + 3]
                    q4 = xp[b, ch, y0 + 4]
                    q5 = xp[b, ch, y0 + 5]
                    base = (b * th + ty) * tw
                    for tx in range(tw):
                        x0 = 4 * tx
                        # B^T d: combine the six rows, one column at a time
                        t0 = _bt6(q0[x0], q1[x0], q2[x0], q3[x0], q4[x0], q5[x0], c2, c4, c5)
                        t1 = _bt6(q0[x0 + 1], q1[x0 + 1], q2[x0 + 1], q3[x0 + 1], q4[x0 + 1], q5[x0 + 1], c2, c4, c5)
                        t2 = _bt6(q0[x0 + 2], q1[x0 + 2], q2[x0 + 2], q3[x0 + 2], q4[x0 + 2], q5[x0 + 2], c2, c4, c5)
                        t3 = _bt6(q0[x0 + 3], q1[x0 + 3], q2[x0 + 3], q3[x0 + 3], q4[x0 + 3], q5[x0 + 3], c2, c4, c5)
                        t4 = _bt6(q0[x0 + 4], q1[x0 + 4], q2[x0 + 4], q3[x0 + 4], q4[x0 + 4], q5[x0 + 4], c2, c4, c5)
                        t5 = _bt6(q0[x0 + 5], q1[x0 + 5], q2[x0 + 5], q3[x0 + 5], q4[x0 + 5], q5[x0 + 5], c2, c4, c5)
                        col = base + tx
                        # (B^T d) B, row i of the tile
                        for i in range(6):
                            o = _bt6(t0[i], t1[i], t2[i], t3[i], t4[i], t5[i], c2, c4, c5)
                            for j in range(6):
                                v[6 * i + j, ch, col] = o[j]
        return v

    @njit(inline="always")
    def _at6_columns(m, o, col, c2, c4, c8):
        # A^T applied down each of the six tile columns of output channel o
        return (
            _at6(m[0, o, col], m[6, o, col], m[12, o, col], m[18, o, col], m[24, o, col], m[30, o, col], c2, c4, c8),
            _at6(m[1, o, col], m[7, o, col], m[13, o, col], m[19, o, col], m[25, o, col], m[31, o, col], c2, c4, c8),
            _at6(m[2, o, col], m[8, o, col], m[14, o, col], m[20, o, col], m[26, o, col], m[32, o, col], c2, c4, c8),
            _at6(m[3, o, col], m[9, o, col], m[15, o, col], m[21, o, col], m[27, o, col], m[33, o, col], c2, c4, c8),
            _at6(m[4, o, col], m[10, o, col], m[16, o, col], m[22, o, col], m[28, o, col], m[34, o, col], c2, c4, c8),
            _at6(m[5, o, col], m[11, o, col], m[17, o, col], m[23, o, col], m[29, o, col], m[35, o, col], c2, c4, c8),
        )

    @njit(cache=True, nogil=True)
    def _wino4_output_nb(m, bias, n, th, tw, y, cst):
        cout = m.shape[1]
        c2, c4, c8 = cst[0], cst[1], cst[3]
        for o in range(cout):
            bo = bias[o]
            for b in range(n):
                for ty in range(th):
                    for tx in range(tw):
                        col = (b * th + ty) * tw + tx
                        a0, a1, a2, a3, a4, a5 = _at6_columns(m, o, col, c2, c4, c8)
                        for i in range(4):
                            r = _at6(a0[i], a1[i], a2[i], a3[i], a4[i], a5[i], c2, c4, c8)
                            for j in range(4):
                                y[b, o, 4 * ty + i, 4 * tx + j] = r[j] + bo
        return y

    @njit(cache=True, nogil=True)
    def _wino4_output_mfm_nb(m, bias, n, th, tw, y, take_first, cst):
        # both halves of a channel pair are transformed together and only the
        # winner is written, so the 2C-channel map never exists
        half = m.shape[1] // 2
        c2, c4, c8 = cst[0], cst[1], cst[3]
        for o in range(half):
            p = o + half
            ba = bias[o]
            bb = bias[p]
            for b in range(n):
                for ty in range(th):
                    for tx in range(tw):
                        col = (b * th + ty) * tw + tx
                        a0, a1, a2, a3, a4, a5 = _at6_columns(m, o, col, c2, c4, c8)
                        b0, b1, b2, b3, b4, b5 = _at6_columns(m, p, col, c2, c4, c8)
                        for i in range(4):
                            ra = _at6(a0[i], a1[i], a2[i], a3[i], a4[i], a5[i], c2, c4, c8)
                            rb = _at6(b0[i], b1[i], b2[i], b3[i], b4[i], b5[i], c2, c4, c8)
                            yy = 4 * ty + i
                            for j in range(4):
                                va = ra[j] + ba
                                vb = rb[j] + bb
                                first = va >= vb
                                y[b, o, yy, 4 * tx + j] = va if first else vb
                                take_first[b, o, yy, 4 * tx + j] = first
        return y, take_first

    def winograd_output_mfm_numba(m, bias, n, th, tw, tile=2):
        if tile != 4:
            y = winograd_output_numba(m, bias, n, th, tw, tile)
            c = y.shape[1] // 2
            take_first = y[:, :c] >= y[:, c:]
            return np.where(take_first, y[:, :c], y[:, c:]), take_first
        half = m.shape[1] // 2
        y = np.empty((n, half, 4 * th, 4 * tw), dtype=m.dtype)
        take_first = np.empty((n, half, 4 * th, 4 * tw), dtype=np.bool_)
        return _wino4_output_mfm_nb(m, bias, n, th, tw, y, take_first, np.array([2, 4, 5, 8], dtype=m.dtype))

    def winograd_input_numba(x, pad, tile=2, role=None):
        n, c, h, w = x.shape
        th, tw = h // tile, w // tile
        xp = _padded(x, pad)
        v = tile_planes((tile + 2) ** 2, c, n * th * tw, x.dtype, role)
        if tile == 2:
            return _wino_input_nb(xp, th, tw, v)
        return _wino4_input_nb(xp, th, tw, v, np.array([2, 4, 5, 8], dtype=x.dtype))

    def winograd_output_numba(m, bias, n, th, tw, tile=2):
        y = np.empty((n, m.shape[1], tile * th, tile * tw), dtype=m.dtype)
        if tile == 2:
            return _wino_output_nb(m, bias, n, th, tw, y)
        return _wino4_output_nb(m, bias, n, th, tw, y, np.array([2, 4, 5, 8], dtype=m.dtype))


NUMPY_KERNELS = {
    "im2col": im2col_numpy,
    "col2im": col2im_numpy,
    "maxpool2_forward": maxpool2_forward_numpy,
    "maxpool2_backward": maxpool2_backward_numpy,
    "winograd_input": winograd_input_numpy,
    "winograd_output": winograd_output_numpy,
    "winograd_output_mfm": winograd_output_mfm_numpy,
}

if HAS_NUMBA:
    NUMBA_KERNELS = {
        "im2col": im2col_numba,
        "col2im": col2im_numba,
        "maxpool2_forward": maxpool2_forward_numba,
        "maxpool2_backward": maxpool2_backward_numba,
        "winograd_input": winograd_input_numba,
        "winograd_output": winograd_output_numba,
        "winograd_output_mfm": winograd_output_mfm_numba,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = None


def _select_backend():
    requested = os.environ.get("IMPONDEROUS_BACKEND", "numba").strip().lower()
    if requested not in ("numba", "numpy"):
        raise ValueError(f"IMPONDEROUS_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and HAS_NUMBA:
        return "numba"
    return "numpy"


BACKEND = _select_backend()
_ACTIVE = NUMBA_KERNELS if BACKEND == "numba" else NUMPY_KERNELS

# numpy's strided-window copy beats the numba loops for im2col/col2im on every
# shape the network uses, so both backends take it; the numba versions stay in
# NUMBA_KERNELS for parity tests and the kernel benchmark
im2col = im2col_numpy
col2im = col2im_numpy
maxpool2_forward = _ACTIVE["maxpool2_forward"]
maxpool2_backward = _ACTIVE["maxpool2_backward"]
winograd_input = _ACTIVE["winograd_input"]
winograd_output = _ACTIVE["winograd_output"]
winograd_output_mfm = _ACTIVE["winograd_output_mfm"]
