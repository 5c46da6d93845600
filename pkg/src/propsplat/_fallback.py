"""NumPy implementations of the compiled kernels in ``_core.pyx``.

Same signatures and semantics; results agree with the compiled versions up to
floating-point summation order.
"""

import numpy as np

NFEAT = 8
NGRAD = 14
ALPHA_MAX = 0.99
T_MIN = 1e-4
POWER_MIN = -4.5
HOMOG_EPS = 1e-12
VAR_EPS = 1e-8
GRAZING_EPS = 1e-9


def _tile_pixels(tile, ntx, tile_size, H, W):
    ty, tx = divmod(tile, ntx)
    ys = np.arange(ty * tile_size, min(H, (ty + 1) * tile_size))
    xs = np.arange(tx * tile_size, min(W, (tx + 1) * tile_size))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return py.ravel(), px.ravel()


def _tile_alphas(py, px, idx, means2, conics, opac):
    dx = px[:, None] - means2[idx, 0][None, :]
    dy = py[:, None] - means2[idx, 1][None, :]
    a, b, c = conics[idx, 0], conics[idx, 1], conics[idx, 2]
    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
    ok = (power >= POWER_MIN) & (power <= 0.0)
    G = np.where(ok, np.exp(np.minimum(power, 0.0)), 0.0)
    raw = opac[idx] * G
    clamped = ok & (raw > ALPHA_MAX)
    alpha = np.where(clamped, ALPHA_MAX, raw)
    # exclusive transmittance before each entry, multiplied in list order
    one_minus = 1.0 - alpha
    T_before = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        T_before[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    active = T_before >= T_MIN
    return dx, dy, ok, G, alpha, clamped, T_before, active


def rasterize_forward(means2, conics, opac, feats, tile_start, tile_list, H, W, tile_size,
                      num_threads=1):
    ntx = (W + tile_size - 1) // tile_size
    nty = (H + tile_size - 1) // tile_size
    out = np.zeros((H, W, NFEAT))
    final_T = np.ones((H, W))
    n_last = np.zeros((H, W), dtype=np.int64)
    n_contrib = np.zeros((H, W), dtype=np.int32)
    n_clamped = np.zeros((H, W), dtype=np.int32)
    for tile in range(ntx * nty):
        py, px = _tile_pixels(tile, ntx, tile_size, H, W)
        start, end = tile_start[tile], tile_start[tile + 1]
        n_last[py, px] = start
        if end == start:
            continue
        idx = tile_list[start:end]
        _, _, ok, _, alpha, clamped, T_before, active = _tile_alphas(
            py, px, idx, means2, conics, opac
        )
        used = ok & active
        w = np.where(used, alpha * T_before, 0.0)
        out[py, px] = w @ feats[idx]
        final_T[py, px] = np.prod(np.where(used, 1.0 - alpha, 1.0), axis=1)
        n_last[py, px] = start + active.sum(axis=1)
        n_contrib[py, px] = used.sum(axis=1)
        n_clamped[py, px] = (used & clamped).sum(axis=1)
    return out, final_T, n_last, n_contrib, n_clamped


def rasterize_backward(means2, conics, opac, feats, tile_start, tile_list, H, W, tile_size,
                       grad_out, final_T, n_last, num_threads=1):
    ntx = (W + tile_size - 1) // tile_size
    nty = (H + tile_size - 1) // tile_size
    entry = np.zeros((len(tile_list), NGRAD))
    for tile in range(ntx * nty):
        start, end = tile_start[tile], tile_start[tile + 1]
        if end == start:
            continue
        py, px = _tile_pixels(tile, ntx, tile_size, H, W)
        idx = tile_list[start:end]
        dx, dy, ok, G, alpha, clamped, T_before, active = _tile_alphas(
            py, px, idx, means2, conics, opac
        )
        used = ok & active
        g = grad_out[py, px]  # (P, F)
        w = np.where(used, alpha * T_before, 0.0)
        gf = g @ feats[idx].T  # (P, K): g . f_k
        wgf = w * gf
        behind = np.cumsum(wgf[:, ::-1], axis=1)[:, ::-1] - wgf
        dL_dalpha = np.where(used, T_before * gf - behind / (1.0 - alpha), 0.0)
        geo = used & ~clamped
        dpower = np.where(geo, alpha * dL_dalpha, 0.0)
        a, b, c = conics[idx, 0], conics[idx, 1], conics[idx, 2]
        rows = slice(start, end)
        entry[rows, 0] = np.sum(dpower * (a * dx + b * dy), axis=0)
        entry[rows, 1] = np.sum(dpower * (b * dx + c * dy), axis=0)
        entry[rows, 2] = np.sum(dpower * (-0.5 * dx * dx), axis=0)
        entry[rows, 3] = np.sum(dpower * (-dx * dy), axis=0)
        entry[rows, 4] = np.sum(dpower * (-0.5 * dy * dy), axis=0)
        entry[rows, 5] = np.sum(np.where(geo, G * dL_dalpha, 0.0), axis=0)
        entry[rows, 6:] = w.T @ g
    return entry


def reduce_entries(entry, tile_list, n_gaussians):
    out = np.zeros((n_gaussians, entry.shape[1]))
    np.add.at(out, tile_list, entry)
    return out


# ---------------------------------------------------------------------------
# plane propagation

_OFFSETS = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))


def _bilinear(img, u, v):
    Hs, Ws = img.shape
    x0 = np.clip(np.floor(u).astype(np.int64), 0, Ws - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, Hs - 2)
    ax = u - x0
    ay = v - y0
    return (1.0 - ay) * ((1.0 - ax) * img[y0, x0] + ax * img[y0, x0 + 1]) + ay * (
        (1.0 - ax) * img[y0 + 1, x0] + ax * img[y0 + 1, x0 + 1]
    )


def ncc_batch(ref, src, Hm, px, py, radius):
    """NCC for many (pixel, homography) pairs. ``Hm`` has shape (M, 3, 3)."""
    H, W = ref.shape
    Hs, Ws = src.shape
    r = np.arange(-radius, radius + 1)
    oy, ox = np.meshgrid(r, r, indexing="ij")
    x = px[:, None] + ox.ravel()[None, :]
    y = py[:, None] + oy.ravel()[None, :]
    total = x.shape[1]
    inside = (x >= 0) & (x < W) & (y >= 0) & (y < H)
    hw = Hm[:, 2, 0, None] * x + Hm[:, 2, 1, None] * y + Hm[:, 2, 2, None]
    ok = inside & (hw > HOMOG_EPS)
    hw_safe = np.where(ok, hw, 1.0)
    u = (Hm[:, 0, 0, None] * x + Hm[:, 0, 1, None] * y + Hm[:, 0, 2, None]) / hw_safe
    v = (Hm[:, 1, 0, None] * x + Hm[:, 1, 1, None] * y + Hm[:, 1, 2, None]) / hw_safe
    ok &= (u >= 0.0) & (u <= Ws - 1) & (v >= 0.0) & (v <= Hs - 1)
    a = np.where(ok, ref[np.clip(y, 0, H - 1), np.clip(x, 0, W - 1)], 0.0)
    b = np.where(ok, _bilinear(src, np.where(ok, u, 0.0), np.where(ok, v, 0.0)), 0.0)
    n = ok.sum(axis=1)
    n_safe = np.maximum(n, 1)
    ma = a.sum(axis=1) / n_safe
    mb = b.sum(axis=1) / n_safe
    va = (a * a).sum(axis=1) / n_safe - ma * ma
    vb = (b * b).sum(axis=1) / n_safe - mb * mb
    cov = (a * b).sum(axis=1) / n_safe - ma * mb
    bad = (10 * n < 7 * total) | (va < VAR_EPS) | (vb < VAR_EPS)
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.clip(cov / np.sqrt(va * vb), -1.0, 1.0)
    return np.where(bad, -1.0, score)


def score_planes(ref, srcs, src_h, src_w, KW, Kt, Kinv, normals, dists, px, py, radius, top_k):
    V = len(KW)
    per_view = np.empty((len(px), V))
    for v in range(V):
        M = KW[v][None] + Kt[v][None, :, None] * (normals / dists[:, None])[:, None, :]
        Hm = M @ Kinv
        src = srcs[v, : src_h[v], : src_w[v]]
        per_view[:, v] = ncc_batch(ref, src, Hm, px, py, radius)
    k = min(top_k, V)
    best = -np.sort(-per_view, axis=1)[:, :k]
    return best.sum(axis=1) / k


def propagate_phase(ref_gray, src_grays, src_h, src_w, KW, Kt, Kinv, rays, planes, valid,
                    scores, phase, radius, top_k, num_threads=1):
    H, W = ref_gray.shape
    py, px = np.nonzero((np.add.outer(np.arange(H), np.arange(W)) % 2) == phase)
    snapshot_planes = planes.copy()
    snapshot_valid = valid.copy()
    best = np.full(len(px), -np.inf)
    best_plane = np.zeros((len(px), 4))
    found = np.zeros(len(px), dtype=bool)
    for ox, oy in _OFFSETS:
        cx, cy = px + ox, py + oy
        inb = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        cxc, cyc = np.clip(cx, 0, W - 1), np.clip(cy, 0, H - 1)
        cand = snapshot_planes[cyc, cxc]
        denom = np.einsum("ij,ij->i", cand[:, :3], rays[py, px])
        ok = inb & (snapshot_valid[cyc, cxc] != 0) & (denom >= GRAZING_EPS)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = cand[:, 3] / np.where(ok, denom, 1.0)
        ok &= (z > 0) & np.isfinite(z)
        if not ok.any():
            continue
        sel = np.nonzero(ok)[0]
        s = score_planes(
            ref_gray, src_grays, src_h, src_w, KW, Kt, Kinv,
            cand[sel, :3], cand[sel, 3], px[sel], py[sel], radius, top_k,
        )
        take = ~found[sel] | (s > best[sel])
        upd = sel[take]
        best[upd] = s[take]
        best_plane[upd] = cand[upd]
        found[upd] = True
    planes[py[found], px[found]] = best_plane[found]
    valid[py, px] = found.astype(np.uint8)
    scores[py, px] = np.where(found, best, -np.inf)
