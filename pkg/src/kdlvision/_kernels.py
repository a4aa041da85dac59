"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The numba path is used when numba imports and ``KDLVISION_NUMBA`` is not set
to ``0``. Both paths produce identical results for the copy/compare kernels
(im2col, max-pool, LBP, Haar); accumulating kernels (col2im, pool backward)
agree to rounding.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
    # an outdated system TBB makes numba warn on every first parallel launch
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("KDLVISION_NUMBA", "1").lower() not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path

def im2col_numpy(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # [N, C, Ho, Wo, kh, kw] -> [N, Ho, Wo, C, kh, kw]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im_numpy(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    cols6 = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += cols6[..., u, v]
    return out


def maxpool_forward_numpy(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool_backward_numpy(g, idx, h, w, k, stride):
    n, c, ho, wo = g.shape
    out = np.zeros((n, c, h, w), dtype=g.dtype)
    rows = (np.arange(ho) * stride)[:, None] + idx // k
    cols = (np.arange(wo) * stride)[None, :] + idx % k
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(out, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), g)
    return out


def flush_subnormal_numpy(a):
    """Zero subnormal entries in place; they slow BLAS down by two orders of magnitude."""
    if a.dtype.kind == "f":
        a[np.abs(a) < np.finfo(a.dtype).tiny] = 0
    return a


def lbp_numpy(img):
    h, w = img.shape
    p = np.pad(img, 1, mode="edge")
    center = p[1:-1, 1:-1]
    out = np.zeros((h, w), dtype=np.uint8)
    # clockwise from top-left, top-left lands on the most significant bit
    offsets = ((0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0))
    for i, (dy, dx) in enumerate(offsets):
        out |= (p[dy : dy + h, dx : dx + w] >= center).astype(np.uint8) << (7 - i)
    return out


def haar_forward_numpy(x):
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    return (a + b + c + d) / 4.0, (a - b + c - d) / 4.0, (a + b - c - d) / 4.0, (a - b - c + d) / 4.0


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(parallel=True, cache=True, nogil=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n, ho, wo, c, kh, kw), dtype=xp.dtype)
        for b in prange(n):
            for ch in range(c):
                for u in range(kh):
                    for v in range(kw):
                        for i in range(ho):
                            r = i * stride + u
                            for j in range(wo):
                                cols[b, i, j, ch, u, v] = xp[b, ch, r, j * stride + v]
        return cols.reshape(n * ho * wo, c * kh * kw)

    @njit(parallel=True, cache=True, nogil=True)
    def _col2im_nb(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
        cols6 = cols.reshape(n, ho, wo, c, kh, kw)
        out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        for b in prange(n):
            for ch in range(c):
                for u in range(kh):
                    for v in range(kw):
                        for i in range(ho):
                            r = i * stride + u
                            for j in range(wo):
                                out[b, ch, r, j * stride + v] += cols6[b, i, j, ch, u, v]
        return out

    @njit(parallel=True, cache=True, nogil=True)
    def _maxpool_forward_nb(x, k, stride):
        n, c, h, w = x.shape
        ho = (h - k) // stride + 1
        wo = (w - k) // stride + 1
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        idx = np.empty((n, c, ho, wo), dtype=np.int64)
        for b in prange(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = x[b, ch, i * stride, j * stride]
                        arg = 0
                        for u in range(k):
                            for v in range(k):
                                val = x[b, ch, i * stride + u, j * stride + v]
                                if val > best:
                                    best = val
                                    arg = u * k + v
                        out[b, ch, i, j] = best
                        idx[b, ch, i, j] = arg
        return out, idx

    @njit(parallel=True, cache=True, nogil=True)
    def _maxpool_backward_nb(g, idx, h, w, k, stride):
        n, c, ho, wo = g.shape
        out = np.zeros((n, c, h, w), dtype=g.dtype)
        for b in prange(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        a = idx[b, ch, i, j]
                        out[b, ch, i * stride + a // k, j * stride + a % k] += g[b, ch, i, j]
        return out

    @njit(cache=True, nogil=True)
    def _lbp_nb(img):
        h, w = img.shape
        out = np.empty((h, w), dtype=np.uint8)
        dys = (-1, -1, -1, 0, 1, 1, 1, 0)
        dxs = (-1, 0, 1, 1, 1, 0, -1, -1)
        for y in range(h):
            for x in range(w):
                center = img[y, x]
                code = 0
                for i in range(8):
                    yy = min(max(y + dys[i], 0), h - 1)
                    xx = min(max(x + dxs[i], 0), w - 1)
                    if img[yy, xx] >= center:
                        code |= 1 << (7 - i)
                out[y, x] = code
        return out

    @njit(cache=True, nogil=True)
    def _haar_forward_nb(x):
        h2, w2 = x.shape[0] // 2, x.shape[1] // 2
        ll = np.empty((h2, w2))
        lh = np.empty((h2, w2))
        hl = np.empty((h2, w2))
        hh = np.empty((h2, w2))
        for i in range(h2):
            for j in range(w2):
                a = x[2 * i, 2 * j]
                b = x[2 * i, 2 * j + 1]
                c = x[2 * i + 1, 2 * j]
                d = x[2 * i + 1, 2 * j + 1]
                ll[i, j] = (a + b + c + d) / 4.0
                lh[i, j] = (a - b + c - d) / 4.0
                hl[i, j] = (a + b - c - d) / 4.0
                hh[i, j] = (a - b - c + d) / 4.0
        return ll, lh, hl, hh

    @njit(parallel=True, cache=True, nogil=True)
    def _flush_subnormal_nb(flat, tiny):
        for i in prange(flat.size):
            if abs(flat[i]) < tiny:
                flat[i] = 0

    def im2col_numba(xp, kh, kw, stride, ho, wo):
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)

    def col2im_numba(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
        return _col2im_nb(np.ascontiguousarray(cols), n, c, hp, wp, kh, kw, stride, ho, wo)

    def maxpool_forward_numba(x, k, stride):
        return _maxpool_forward_nb(np.ascontiguousarray(x), k, stride)

    def maxpool_backward_numba(g, idx, h, w, k, stride):
        return _maxpool_backward_nb(np.ascontiguousarray(g), idx, h, w, k, stride)

    def lbp_numba(img):
        return _lbp_nb(np.ascontiguousarray(img))

    def haar_forward_numba(x):
        return _haar_forward_nb(np.ascontiguousarray(x, dtype=np.float64))

    def flush_subnormal_numba(a):
        if a.dtype.kind != "f" or a.size == 0:
            return a
        if not a.flags.c_contiguous or not a.flags.writeable:
            return flush_subnormal_numpy(a)
        _flush_subnormal_nb(a.reshape(-1), a.dtype.type(np.finfo(a.dtype).tiny))
        return a


KERNELS = ("im2col", "col2im", "maxpool_forward", "maxpool_backward", "lbp", "haar_forward", "flush_subnormal")


def implementation(name, backend=None):
    """Return kernel ``name`` for ``backend`` (``"numba"``/``"numpy"``, default: active)."""
    backend = backend or BACKEND
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    return globals()[f"{name}_{backend}"]


im2col = implementation("im2col")
col2im = implementation("col2im")
maxpool_forward = implementation("maxpool_forward")
maxpool_backward = implementation("maxpool_backward")
lbp = implementation("lbp")
haar_forward = implementation("haar_forward")
flush_subnormal = implementation("flush_subnormal")
