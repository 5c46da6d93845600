# cython: language_level=3
"""Compiled kernels: tile rasterizer (forward/backward) and the checkerboard
plane-propagation sweep. ``_fallback.py`` mirrors every function here."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, sqrt, floor, isfinite, INFINITY

cnp.import_array()

cdef enum:
    NFEAT = 8
    NGRAD = 14
    MAX_VIEWS = 32

cdef double ALPHA_MAX = 0.99
cdef double T_MIN = 1e-4
cdef double POWER_MIN = -4.5
cdef double HOMOG_EPS = 1e-12
cdef double VAR_EPS = 1e-8
cdef double GRAZING_EPS = 1e-9


cdef void _forward_tile(
    long tile, int ntx, int tile_size, int H, int W,
    const double[:, ::1] means2, const double[:, ::1] conics,
    const double[::1] opac, const double[:, ::1] feats,
    const long[::1] tile_start, const long[::1] tile_list,
    double[:, :, ::1] out, double[:, ::1] final_T,
    long[:, ::1] n_last, int[:, ::1] n_contrib, int[:, ::1] n_clamped,
) noexcept nogil:
    cdef int ty = tile // ntx
    cdef int tx = tile % ntx
    cdef long start = tile_start[tile]
    cdef long end = tile_start[tile + 1]
    cdef int py, px, f, contrib, clamped
    cdef long k, g
    cdef double T, dx, dy, power, alpha, w
    for py in range(ty * tile_size, min(H, (ty + 1) * tile_size)):
        for px in range(tx * tile_size, min(W, (tx + 1) * tile_size)):
            T = 1.0
            contrib = 0
            clamped = 0
            for f in range(NFEAT):
                out[py, px, f] = 0.0
            k = start
            while k < end:
                if T < T_MIN:
                    break
                g = tile_list[k]
                k = k + 1
                dx = px - means2[g, 0]
                dy = py - means2[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy
                                + conics[g, 2] * dy * dy)
                if power < POWER_MIN or power > 0.0:
                    continue
                alpha = opac[g] * exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                    clamped = clamped + 1
                w = alpha * T
                for f in range(NFEAT):
                    out[py, px, f] += feats[g, f] * w
                T = T * (1.0 - alpha)
                contrib = contrib + 1
            final_T[py, px] = T
            n_last[py, px] = k
            n_contrib[py, px] = contrib
            n_clamped[py, px] = clamped


def rasterize_forward(means2, conics, opac, feats, tile_start, tile_list,
                      int H, int W, int tile_size, int num_threads=1):
    cdef int ntx = (W + tile_size - 1) // tile_size
    cdef int nty = (H + tile_size - 1) // tile_size
    cdef long n_tiles = ntx * nty
    cdef const double[:, ::1] m2 = np.ascontiguousarray(means2, dtype=np.float64)
    cdef const double[:, ::1] cn = np.ascontiguousarray(conics, dtype=np.float64)
    cdef const double[::1] op = np.ascontiguousarray(opac, dtype=np.float64)
    cdef const double[:, ::1] ft = np.ascontiguousarray(feats, dtype=np.float64)
    cdef const long[::1] ts = np.ascontiguousarray(tile_start, dtype=np.int64)
    cdef const long[::1] tl = np.ascontiguousarray(tile_list, dtype=np.int64)
    out_np = np.zeros((H, W, NFEAT))
    T_np = np.ones((H, W))
    last_np = np.zeros((H, W), dtype=np.int64)
    contrib_np = np.zeros((H, W), dtype=np.int32)
    clamped_np = np.zeros((H, W), dtype=np.int32)
    cdef double[:, :, ::1] out = out_np
    cdef double[:, ::1] fT = T_np
    cdef long[:, ::1] nl = last_np
    cdef int[:, ::1] nc = contrib_np
    cdef int[:, ::1] ncl = clamped_np
    cdef long tile
    for tile in prange(n_tiles, nogil=True, schedule="static", num_threads=num_threads):
        _forward_tile(tile, ntx, tile_size, H, W, m2, cn, op, ft, ts, tl, out, fT, nl, nc, ncl)
    return out_np, T_np, last_np, contrib_np, clamped_np


cdef void _backward_tile(
    long tile, int ntx, int tile_size, int H, int W,
    const double[:, ::1] means2, const double[:, ::1] conics,
    const double[::1] opac, const double[:, ::1] feats,
    const long[::1] tile_start, const long[::1] tile_list,
    const double[:, :, ::1] grad_out, const double[:, ::1] final_T,
    const long[:, ::1] n_last, double[:, ::1] entry,
) noexcept nogil:
    cdef int ty = tile // ntx
    cdef int tx = tile % ntx
    cdef long start = tile_start[tile]
    cdef int py, px, f
    cdef long k, g
    cdef double T, dx, dy, power, G, alpha, w, dL_dalpha, dpower, last_alpha
    cdef bint clamped
    cdef double accum[NFEAT]
    cdef double last_feat[NFEAT]
    for py in range(ty * tile_size, min(H, (ty + 1) * tile_size)):
        for px in range(tx * tile_size, min(W, (tx + 1) * tile_size)):
            T = final_T[py, px]
            last_alpha = 0.0
            for f in range(NFEAT):
                accum[f] = 0.0
                last_feat[f] = 0.0
            k = n_last[py, px] - 1
            while k >= start:
                g = tile_list[k]
                dx = px - means2[g, 0]
                dy = py - means2[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy
                                + conics[g, 2] * dy * dy)
                if power < POWER_MIN or power > 0.0:
                    k = k - 1
                    continue
                G = exp(power)
                alpha = opac[g] * G
                clamped = alpha > ALPHA_MAX
                if clamped:
                    alpha = ALPHA_MAX
                T = T / (1.0 - alpha)
                w = alpha * T
                dL_dalpha = 0.0
                for f in range(NFEAT):
                    accum[f] = last_alpha * last_feat[f] + (1.0 - last_alpha) * accum[f]
                    last_feat[f] = feats[g, f]
                    dL_dalpha = dL_dalpha + (feats[g, f] - accum[f]) * grad_out[py, px, f]
                    entry[k, 6 + f] += w * grad_out[py, px, f]
                dL_dalpha = dL_dalpha * T
                last_alpha = alpha
                if not clamped:
                    entry[k, 5] += G * dL_dalpha
                    dpower = alpha * dL_dalpha
                    entry[k, 0] += dpower * (conics[g, 0] * dx + conics[g, 1] * dy)
                    entry[k, 1] += dpower * (conics[g, 1] * dx + conics[g, 2] * dy)
                    entry[k, 2] += dpower * (-0.5 * dx * dx)
                    entry[k, 3] += dpower * (-dx * dy)
                    entry[k, 4] += dpower * (-0.5 * dy * dy)
                k = k - 1


def rasterize_backward(means2, conics, opac, feats, tile_start, tile_list,
                       int H, int W, int tile_size, grad_out, final_T, n_last,
                       int num_threads=1):
    """Per-list-entry gradients, shape (E, 14):
    [d mean2 (2), d conic (3), d opacity, d feature (8)]."""
    cdef int ntx = (W + tile_size - 1) // tile_size
    cdef int nty = (H + tile_size - 1) // tile_size
    cdef long n_tiles = ntx * nty
    cdef const double[:, ::1] m2 = np.ascontiguousarray(means2, dtype=np.float64)
    cdef const double[:, ::1] cn = np.ascontiguousarray(conics, dtype=np.float64)
    cdef const double[::1] op = np.ascontiguousarray(opac, dtype=np.float64)
    cdef const double[:, ::1] ft = np.ascontiguousarray(feats, dtype=np.float64)
    cdef const long[::1] ts = np.ascontiguousarray(tile_start, dtype=np.int64)
    cdef const long[::1] tl = np.ascontiguousarray(tile_list, dtype=np.int64)
    cdef const double[:, :, ::1] go = np.ascontiguousarray(grad_out, dtype=np.float64)
    cdef const double[:, ::1] fT = np.ascontiguousarray(final_T, dtype=np.float64)
    cdef const long[:, ::1] nl = np.ascontiguousarray(n_last, dtype=np.int64)
    entry_np = np.zeros((tl.shape[0], NGRAD))
    cdef double[:, ::1] entry = entry_np
    cdef long tile
    for tile in prange(n_tiles, nogil=True, schedule="static", num_threads=num_threads):
        _backward_tile(tile, ntx, tile_size, H, W, m2, cn, op, ft, ts, tl, go, fT, nl, entry)
    return entry_np


def reduce_entries(entry, tile_list, long n_gaussians):
    """Sum per-entry rows into per-Gaussian rows in list order (deterministic)."""
    cdef const double[:, ::1] e = np.ascontiguousarray(entry, dtype=np.float64)
    cdef const long[::1] tl = np.ascontiguousarray(tile_list, dtype=np.int64)
    out_np = np.zeros((n_gaussians, e.shape[1]))
    cdef double[:, ::1] out = out_np
    cdef long k, j
    cdef int ncol = e.shape[1]
    with nogil:
        for k in range(tl.shape[0]):
            for j in range(ncol):
                out[tl[k], j] += e[k, j]
    return out_np


# ---------------------------------------------------------------------------
# plane propagation


cdef inline double _bilinear(const double[:, :, ::1] img, int v, int Hs, int Ws,
                             double u, double y) noexcept nogil:
    cdef int x0 = <int>floor(u)
    cdef int y0 = <int>floor(y)
    if x0 > Ws - 2:
        x0 = Ws - 2
    if y0 > Hs - 2:
        y0 = Hs - 2
    if x0 < 0:
        x0 = 0
    if y0 < 0:
        y0 = 0
    cdef double ax = u - x0
    cdef double ay = y - y0
    return ((1.0 - ay) * ((1.0 - ax) * img[v, y0, x0] + ax * img[v, y0, x0 + 1])
            + ay * ((1.0 - ax) * img[v, y0 + 1, x0] + ax * img[v, y0 + 1, x0 + 1]))


cdef double _ncc(const double[:, ::1] ref, const double[:, :, ::1] src, int v,
                 int Hs, int Ws, double* Hm, int px, int py, int radius) noexcept nogil:
    cdef int H = ref.shape[0]
    cdef int W = ref.shape[1]
    cdef int dx, dy, x, y, n = 0
    cdef int total = (2 * radius + 1) * (2 * radius + 1)
    cdef double hx, hy, hw, u, vv, a, b
    cdef double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0
    cdef double ma, mb, va, vb, cov, r
    for dy in range(-radius, radius + 1):
        y = py + dy
        if y < 0 or y >= H:
            continue
        for dx in range(-radius, radius + 1):
            x = px + dx
            if x < 0 or x >= W:
                continue
            hw = Hm[6] * x + Hm[7] * y + Hm[8]
            if hw <= HOMOG_EPS:
                continue
            u = (Hm[0] * x + Hm[1] * y + Hm[2]) / hw
            vv = (Hm[3] * x + Hm[4] * y + Hm[5]) / hw
            if not (u >= 0.0 and u <= Ws - 1 and vv >= 0.0 and vv <= Hs - 1):
                continue
            a = ref[y, x]
            b = _bilinear(src, v, Hs, Ws, u, vv)
            sa += a
            sb += b
            saa += a * a
            sbb += b * b
            sab += a * b
            n = n + 1
    if 10 * n < 7 * total:
        return -1.0
    ma = sa / n
    mb = sb / n
    va = saa / n - ma * ma
    vb = sbb / n - mb * mb
    if va < VAR_EPS or vb < VAR_EPS:
        return -1.0
    cov = sab / n - ma * mb
    r = cov / sqrt(va * vb)
    if r > 1.0:
        r = 1.0
    elif r < -1.0:
        r = -1.0
    return r


cdef double _score_plane(const double[:, ::1] ref, const double[:, :, ::1] src,
                         const int[::1] src_h, const int[::1] src_w,
                         const double[:, :, ::1] KW, const double[:, ::1] Kt,
                         const double[:, ::1] Kinv, double n0, double n1, double n2,
                         double d, int px, int py, int radius, int top_k) noexcept nogil:
    cdef int V = src.shape[0]
    cdef int v, i, j, kk
    cdef double Hm[9]
    cdef double M[9]
    cdef double scores[MAX_VIEWS]
    cdef double tmp, total
    for v in range(V):
        for i in range(3):
            M[3 * i + 0] = KW[v, i, 0] + Kt[v, i] * n0 / d
            M[3 * i + 1] = KW[v, i, 1] + Kt[v, i] * n1 / d
            M[3 * i + 2] = KW[v, i, 2] + Kt[v, i] * n2 / d
        for i in range(3):
            for j in range(3):
                Hm[3 * i + j] = (M[3 * i + 0] * Kinv[0, j] + M[3 * i + 1] * Kinv[1, j]
                                 + M[3 * i + 2] * Kinv[2, j])
        scores[v] = _ncc(ref, src, v, src_h[v], src_w[v], Hm, px, py, radius)
    # insertion sort, descending
    for i in range(1, V):
        tmp = scores[i]
        j = i - 1
        while j >= 0 and scores[j] < tmp:
            scores[j + 1] = scores[j]
            j = j - 1
        scores[j + 1] = tmp
    kk = top_k if top_k < V else V
    total = 0.0
    for i in range(kk):
        total = total + scores[i]
    return total / kk


cdef void _propagate_pixel(
    long idx, int phase, int W, int H,
    const double[:, ::1] ref, const double[:, :, ::1] src,
    const int[::1] src_h, const int[::1] src_w,
    const double[:, :, ::1] KW, const double[:, ::1] Kt, const double[:, ::1] Kinv,
    const double[:, :, ::1] rays, double[:, :, ::1] planes, unsigned char[:, ::1] valid,
    double[:, ::1] scores, int radius, int top_k,
) noexcept nogil:
    cdef int py = idx // W
    cdef int px = idx % W
    if (px + py) % 2 != phase:
        return
    cdef int c, cx, cy, best_c = -1
    cdef int ox[5]
    cdef int oy[5]
    ox[0] = 0; oy[0] = 0
    ox[1] = 0; oy[1] = -1
    ox[2] = 0; oy[2] = 1
    ox[3] = -1; oy[3] = 0
    ox[4] = 1; oy[4] = 0
    cdef double best = -INFINITY
    cdef double s, denom, z
    cdef double bn0 = 0.0, bn1 = 0.0, bn2 = 0.0, bd = 0.0
    cdef double n0, n1, n2, d
    for c in range(5):
        cx = px + ox[c]
        cy = py + oy[c]
        if cx < 0 or cx >= W or cy < 0 or cy >= H:
            continue
        if not valid[cy, cx]:
            continue
        n0 = planes[cy, cx, 0]
        n1 = planes[cy, cx, 1]
        n2 = planes[cy, cx, 2]
        d = planes[cy, cx, 3]
        denom = n0 * rays[py, px, 0] + n1 * rays[py, px, 1] + n2 * rays[py, px, 2]
        if denom < GRAZING_EPS:
            continue
        z = d / denom
        if not (z > 0.0 and isfinite(z)):
            continue
        s = _score_plane(ref, src, src_h, src_w, KW, Kt, Kinv, n0, n1, n2, d,
                         px, py, radius, top_k)
        if best_c < 0 or s > best:
            best = s
            best_c = c
            bn0 = n0
            bn1 = n1
            bn2 = n2
            bd = d
    if best_c < 0:
        valid[py, px] = 0
        scores[py, px] = -INFINITY
        return
    planes[py, px, 0] = bn0
    planes[py, px, 1] = bn1
    planes[py, px, 2] = bn2
    planes[py, px, 3] = bd
    valid[py, px] = 1
    scores[py, px] = best


def propagate_phase(ref_gray, src_grays, src_h, src_w, KW, Kt, Kinv, rays,
                    planes, valid, scores, int phase, int radius, int top_k,
                    int num_threads=1):
    """One checkerboard half-sweep, updating ``planes``/``valid``/``scores`` in place."""
    cdef const double[:, ::1] ref = ref_gray
    cdef const double[:, :, ::1] src = src_grays
    cdef const int[::1] sh = src_h
    cdef const int[::1] sw = src_w
    cdef const double[:, :, ::1] kw = KW
    cdef const double[:, ::1] kt = Kt
    cdef const double[:, ::1] ki = Kinv
    cdef const double[:, :, ::1] ry = rays
    cdef double[:, :, ::1] pl = planes
    cdef unsigned char[:, ::1] va = valid
    cdef double[:, ::1] sc = scores
    cdef int H = ref.shape[0]
    cdef int W = ref.shape[1]
    if src.shape[0] > MAX_VIEWS:
        raise ValueError(f"at most {MAX_VIEWS} neighbor views")
    cdef long idx
    for idx in prange(H * W, nogil=True, schedule="static", num_threads=num_threads):
        _propagate_pixel(idx, phase, W, H, ref, src, sh, sw, kw, kt, ki, ry, pl, va, sc,
                         radius, top_k)
