"""Hot numeric kernels: dilated 3D convolution, 2x max pooling, voxel voting.

Every kernel has a pure-numpy implementation and a numba ``@njit`` twin with
the same contract. The public functions dispatch on :mod:`voxsegnet._accel`.

Layouts are channels-major: feature maps are ``(B, C, D, H, W)`` and conv
weights ``(C_out, C_in, KD, KH, KW)``. Taps sit at ``index * stride + tap *
dilation`` of the zero-padded input, which with ``padding = dilation*(K-1)/2``
is the centered ("same") convolution.
"""

import numpy as np

from . import _accel
from ._accel import njit, prange


def out_size(n, k, dilation, stride, padding):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad(x, padding):
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _tap_slice(l, m, n, r, s, do, ho, wo):
    return (
        slice(None),
        slice(None),
        slice(l * r, l * r + s * (do - 1) + 1, s),
        slice(m * r, m * r + s * (ho - 1) + 1, s),
        slice(n * r, n * r + s * (wo - 1) + 1, s),
    )


def _out_shape(x_shape, w_shape, r, s, padding):
    return tuple(
        out_size(x_shape[2 + i], w_shape[2 + i], r, s, padding[i]) for i in range(3)
    )


# --------------------------------------------------------------------------
# numpy path: one GEMM per kernel tap


def _tap_major(w):
    # BLAS only engages on contiguous operands; w[:, :, l, m, n] is strided
    return np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))

def _conv_fwd_np(xp, w, r, s, osz):
    B, cin = xp.shape[:2]
    cout, _, kd, kh, kw = w.shape
    do, ho, wo = osz
    taps = _tap_major(w)
    out = np.zeros((B, cout, do * ho * wo), dtype=xp.dtype)
    for l in range(kd):
        for m in range(kh):
            for n in range(kw):
                patch = xp[_tap_slice(l, m, n, r, s, do, ho, wo)].reshape(B, cin, -1)
                out += np.matmul(taps[l, m, n], patch)
    return out.reshape(B, cout, do, ho, wo)


def _conv_gin_np(g, w, xp_shape, r, s):
    B, cout, do, ho, wo = g.shape
    _, cin, kd, kh, kw = w.shape
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    g2 = g.reshape(B, cout, -1)
    taps = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
    for l in range(kd):
        for m in range(kh):
            for n in range(kw):
                contrib = np.matmul(taps[l, m, n], g2)
                gxp[_tap_slice(l, m, n, r, s, do, ho, wo)] += contrib.reshape(
                    B, cin, do, ho, wo
                )
    return gxp


def _conv_gw_np(g, xp, w_shape, r, s):
    B, cout, do, ho, wo = g.shape
    _, cin, kd, kh, kw = w_shape
    gw = np.empty(w_shape, dtype=g.dtype)
    g2 = g.reshape(B, cout, -1)
    for l in range(kd):
        for m in range(kh):
            for n in range(kw):
                patch = xp[_tap_slice(l, m, n, r, s, do, ho, wo)].reshape(B, cin, -1)
                gw[:, :, l, m, n] = np.matmul(g2, patch.transpose(0, 2, 1)).sum(axis=0)
    return gw


# --------------------------------------------------------------------------
# numba path. The stride-1 forward (also used for the stride-1 input gradient)
# treats a block of output rows at the padded row pitch as one flat run, so
# each tap is a long contiguous axpy; the few columns that fall in the padding
# are computed and dropped. Other strides use plain scatter/gather loops. Loop
# order is fixed, so results are deterministic run to run. 1x1x1 kernels and
# stride-1 weight gradients stay on the BLAS path under either backend.

_ROW_BLOCK = 512


@njit(fastmath=True, cache=True)
def _conv_fwd_nb_s1(xp, w, r, do, ho, wo):
    B, cin, dp, hp, wp = xp.shape
    cout, kd, kh, kw = w.shape[0], w.shape[2], w.shape[3], w.shape[4]
    out = np.empty((B, cout, do, ho, wo), dtype=xp.dtype)
    yb = max(1, _ROW_BLOCK // wp)
    acc = np.empty((cout, yb * wp), dtype=xp.dtype)
    xf = xp.reshape(B, cin, dp, hp * wp)
    for b in range(B):
        for z in range(do):
            for y0 in range(0, ho, yb):
                ny = min(yb, ho - y0)
                L = (ny - 1) * wp + wo
                acc[:, :L] = 0
                for c in range(cin):
                    for l in range(kd):
                        plane = xf[b, c, z + l * r]
                        for m in range(kh):
                            for n in range(kw):
                                off = (y0 + m * r) * wp + n * r
                                xs = plane[off:off + L]
                                for o in range(cout):
                                    wv = w[o, c, l, m, n]
                                    a = acc[o]
                                    for i in range(L):
                                        a[i] += wv * xs[i]
                for o in range(cout):
                    for yy in range(ny):
                        out[b, o, z, y0 + yy, :] = acc[o, yy * wp:yy * wp + wo]
    return out


@njit(parallel=True, cache=True)
def _conv_fwd_nb(xp, w, r, s, do, ho, wo):
    B, cin = xp.shape[0], xp.shape[1]
    cout, kd, kh, kw = w.shape[0], w.shape[2], w.shape[3], w.shape[4]
    out = np.zeros((B, cout, do, ho, wo), dtype=xp.dtype)
    for o in prange(cout):
        for b in range(B):
            for c in range(cin):
                for l in range(kd):
                    for m in range(kh):
                        for n in range(kw):
                            wv = w[o, c, l, m, n]
                            for z in range(do):
                                zi = z * s + l * r
                                for y in range(ho):
                                    yi = y * s + m * r
                                    for x in range(wo):
                                        out[b, o, z, y, x] += wv * xp[b, c, zi, yi, x * s + n * r]
    return out


@njit(parallel=True, cache=True)
def _conv_gin_nb(g, w, dp, hp, wp, r, s):
    B, cout, do, ho, wo = g.shape
    cin, kd, kh, kw = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    gxp = np.zeros((B, cin, dp, hp, wp), dtype=g.dtype)
    for c in prange(cin):
        for b in range(B):
            for o in range(cout):
                for l in range(kd):
                    for m in range(kh):
                        for n in range(kw):
                            wv = w[o, c, l, m, n]
                            for z in range(do):
                                zi = z * s + l * r
                                for y in range(ho):
                                    yi = y * s + m * r
                                    for x in range(wo):
                                        gxp[b, c, zi, yi, x * s + n * r] += wv * g[b, o, z, y, x]
    return gxp


@njit(parallel=True, cache=True)
def _conv_gw_nb(g, xp, kd, kh, kw, r, s):
    B, cout, do, ho, wo = g.shape
    cin = xp.shape[1]
    gw = np.zeros((cout, cin, kd, kh, kw), dtype=g.dtype)
    for o in prange(cout):
        for c in range(cin):
            for l in range(kd):
                for m in range(kh):
                    for n in range(kw):
                        acc = 0.0
                        for b in range(B):
                            for z in range(do):
                                zi = z * s + l * r
                                for y in range(ho):
                                    yi = y * s + m * r
                                    for x in range(wo):
                                        acc += g[b, o, z, y, x] * xp[b, c, zi, yi, x * s + n * r]
                        gw[o, c, l, m, n] = acc
    return gw


def _flip_transpose(w):
    return np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))


# --------------------------------------------------------------------------
# public conv entry points

def conv3d_forward(x, w, dilation=1, stride=1, padding=(0, 0, 0)):
    osz = _out_shape(x.shape, w.shape, dilation, stride, padding)
    if min(osz) < 1:
        raise ValueError(f"convolution output would be empty for input {x.shape}")
    xp = _pad(x, padding)
    # a 1x1x1 kernel is one matrix product; BLAS beats the loop kernels there
    if not _accel.use_numba() or w.shape[2:] == (1, 1, 1):
        return _conv_fwd_np(xp, w, dilation, stride, osz)
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    if stride == 1:
        return _conv_fwd_nb_s1(xp, w, dilation, *osz)
    return _conv_fwd_nb(xp, w, dilation, stride, *osz)


def conv3d_grad_input(g, w, x_shape, dilation=1, stride=1, padding=(0, 0, 0)):
    """Gradient of :func:`conv3d_forward` with respect to its input."""
    pd, ph, pw = padding
    span = [dilation * (k - 1) for k in w.shape[2:]]
    if _accel.use_numba() and stride == 1 and all(p <= sp for p, sp in zip(padding, span)):
        # the stride-1 adjoint is a correlation with the flipped, transposed kernel
        back = tuple(sp - p for sp, p in zip(span, padding))
        return conv3d_forward(g, _flip_transpose(w), dilation, 1, back)
    xp_shape = (x_shape[0], x_shape[1], x_shape[2] + 2 * pd, x_shape[3] + 2 * ph,
                x_shape[4] + 2 * pw)
    if _accel.use_numba():
        gxp = _conv_gin_nb(np.ascontiguousarray(g), np.ascontiguousarray(w),
                           xp_shape[2], xp_shape[3], xp_shape[4], dilation, stride)
    else:
        gxp = _conv_gin_np(g, w, xp_shape, dilation, stride)
    return np.ascontiguousarray(
        gxp[:, :, pd:pd + x_shape[2], ph:ph + x_shape[3], pw:pw + x_shape[4]]
    )


def conv3d_grad_weight(g, x, w_shape, dilation=1, stride=1, padding=(0, 0, 0)):
    """Gradient of :func:`conv3d_forward` with respect to its weights."""
    xp = _pad(x, padding)
    # stride 1 reduces to per-tap tensordots, which BLAS runs about twice as
    # fast as a compiled loop on one core
    if not _accel.use_numba() or stride == 1:
        return _conv_gw_np(g, xp, w_shape, dilation, stride)
    return _conv_gw_nb(g, xp, w_shape[2], w_shape[3], w_shape[4], dilation, stride)


# --------------------------------------------------------------------------
# 2x2x2 max pooling, stride 2. Window positions are numbered in raster order
# (dz, dy, dx) so argmax picks the first maximal tap on ties.

def _pool_windows(x):
    B, C, D, H, W = x.shape
    v = x.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
    return v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, D // 2, H // 2, W // 2, 8)


def _pool_fwd_np(x):
    win = _pool_windows(x)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def _pool_bwd_np(g, idx):
    B, C, d, h, w = g.shape
    win = np.zeros((B, C, d, h, w, 8), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    win = win.reshape(B, C, d, h, w, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(win).reshape(B, C, 2 * d, 2 * h, 2 * w)


@njit(cache=True)
def _pool_fwd_nb(x):
    B, C, D, H, W = x.shape
    out = np.empty((B, C, D // 2, H // 2, W // 2), dtype=x.dtype)
    idx = np.empty((B, C, D // 2, H // 2, W // 2), dtype=np.int8)
    for b in range(B):
        for c in range(C):
            for z in range(D // 2):
                for y in range(H // 2):
                    for xx in range(W // 2):
                        best = x[b, c, 2 * z, 2 * y, 2 * xx]
                        bi = 0
                        k = 0
                        for dz in range(2):
                            for dy in range(2):
                                for dx in range(2):
                                    v = x[b, c, 2 * z + dz, 2 * y + dy, 2 * xx + dx]
                                    if v > best:
                                        best = v
                                        bi = k
                                    k += 1
                        out[b, c, z, y, xx] = best
                        idx[b, c, z, y, xx] = bi
    return out, idx


@njit(cache=True)
def _pool_bwd_nb(g, idx):
    B, C, d, h, w = g.shape
    gx = np.zeros((B, C, 2 * d, 2 * h, 2 * w), dtype=g.dtype)
    for b in range(B):
        for c in range(C):
            for z in range(d):
                for y in range(h):
                    for xx in range(w):
                        k = idx[b, c, z, y, xx]
                        dz = k // 4
                        dy = (k // 2) % 2
                        dx = k % 2
                        gx[b, c, 2 * z + dz, 2 * y + dy, 2 * xx + dx] = g[b, c, z, y, xx]
    return gx


def max_pool3d_forward(x):
    if _accel.use_numba():
        return _pool_fwd_nb(np.ascontiguousarray(x))
    return _pool_fwd_np(x)


def max_pool3d_backward(g, idx):
    if _accel.use_numba():
        return _pool_bwd_nb(np.ascontiguousarray(g), idx)
    return _pool_bwd_np(g, idx)


# --------------------------------------------------------------------------
# majority vote of integer labels per voxel key; ties go to the smallest label

def _vote_np(keys, labels):
    order = np.lexsort((labels, keys))
    k = keys[order]
    lab = labels[order]
    n = k.size
    start = np.ones(n, dtype=bool)
    start[1:] = (k[1:] != k[:-1]) | (lab[1:] != lab[:-1])
    pos = np.flatnonzero(start)
    counts = np.diff(np.append(pos, n))
    pk, pl = k[pos], lab[pos]
    best = np.lexsort((pl, -counts, pk))
    first = np.ones(best.size, dtype=bool)
    first[1:] = pk[best][1:] != pk[best][:-1]
    sel = best[first]
    return pk[sel], pl[sel]


@njit(cache=True)
def _vote_nb_sorted(k, lab):
    n = k.size
    out_k = np.empty(n, dtype=k.dtype)
    out_l = np.empty(n, dtype=lab.dtype)
    nout = 0
    i = 0
    while i < n:
        key = k[i]
        best_label = lab[i]
        best_count = 0
        j = i
        while j < n and k[j] == key:
            cur = lab[j]
            cnt = 0
            while j < n and k[j] == key and lab[j] == cur:
                cnt += 1
                j += 1
            # labels ascend within a key, so strict > keeps the smallest on ties
            if cnt > best_count:
                best_count = cnt
                best_label = cur
        out_k[nout] = key
        out_l[nout] = best_label
        nout += 1
        i = j
    return out_k[:nout], out_l[:nout]


def majority_vote(keys, labels):
    """Return ``(unique_keys, label)`` with the per-key most frequent label."""
    keys = np.asarray(keys, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if keys.size == 0:
        return keys.copy(), labels.copy()
    if _accel.use_numba():
        order = np.lexsort((labels, keys))
        return _vote_nb_sorted(keys[order], labels[order])
    return _vote_np(keys, labels)
