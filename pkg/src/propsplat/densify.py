"""Cross-view filtering of propagated maps and the two ways the cloud grows.

Propagation-driven growth: filtered pixels whose rendered depth is missing or
far off get new Gaussians. Gradient-driven growth: the usual clone/split of
Gaussians with large screen-space positional gradients, plus opacity pruning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import rotmat_to_quat
from .gaussians import GaussianCloud, logit
from .propagation import PropagatedMaps
from .scene_io import INIT_OPACITY, KNN, knn_mean_distance

ALPHA_EMPTY = 1e-3


@dataclass(frozen=True)
class FilterConfig:
    max_reproj_px: float = 2.0
    max_rel_depth: float = 0.01
    max_normal_deg: float = 10.0
    min_consistent: int = 1
    num_neighbor_views: int = 3


@dataclass(frozen=True)
class DensifyConfig:
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_factor: float = 1.6
    split_children: int = 2
    min_opacity: float = 0.005


def _pixel_grid(H, W):
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    return px, py


def _consistency(view_i, maps_i: PropagatedMaps, view_j, maps_j: PropagatedMaps, cfg: FilterConfig):
    """Per-pixel boolean: does ``view_j`` confirm the plane at each pixel of ``view_i``?"""
    Ki, Kj = view_i.intrinsics, view_j.intrinsics
    Pi, Pj = view_i.pose, view_j.pose
    H, W = maps_i.depth.shape
    px, py = _pixel_grid(H, W)
    ok = maps_i.valid.copy()
    z = np.where(ok, maps_i.depth, 1.0)

    Xc = Ki.rays() * z[..., None]
    Xw = (Xc - Pi.t) @ Pi.W
    Yj = Xw @ Pj.W.T + Pj.t
    ok &= Yj[..., 2] > 1e-9
    zj = np.where(ok, Yj[..., 2], 1.0)
    qx = Kj.fx * Yj[..., 0] / zj + Kj.cx
    qy = Kj.fy * Yj[..., 1] / zj + Kj.cy
    ix = np.rint(qx)
    iy = np.rint(qy)
    Hj, Wj = maps_j.depth.shape
    ok &= (ix >= 0) & (ix < Wj) & (iy >= 0) & (iy < Hj)
    ix = np.where(ok, ix, 0).astype(np.intp)
    iy = np.where(ok, iy, 0).astype(np.intp)
    ok &= maps_j.valid[iy, ix]

    # the neighbour's plane at its nearest pixel, evaluated along the exact ray
    nj = maps_j.normal[iy, ix]
    zn = maps_j.depth[iy, ix]
    Pn = Kj.rays()[iy, ix] * zn[..., None]
    ray_q = np.stack([(qx - Kj.cx) / Kj.fx, (qy - Kj.cy) / Kj.fy, np.ones_like(qx)], axis=-1)
    denom = np.sum(nj * ray_q, axis=-1)
    ok &= np.abs(denom) > 1e-12
    zq = np.sum(nj * Pn, axis=-1) / np.where(ok, denom, 1.0)
    ok &= zq > 0
    Yq = ray_q * zq[..., None]
    Xb = (Yq - Pj.t) @ Pj.W
    Xi = Xb @ Pi.W.T + Pi.t
    ok &= Xi[..., 2] > 1e-9
    zb = np.where(ok, Xi[..., 2], 1.0)
    bx = Ki.fx * Xi[..., 0] / zb + Ki.cx
    by = Ki.fy * Xi[..., 1] / zb + Ki.cy

    reproj = np.hypot(bx - px, by - py)
    rel = np.abs(zb - z) / z
    ni_w = maps_i.normal @ Pi.W
    nj_w = nj @ Pj.W
    cos = np.sum(ni_w * nj_w, axis=-1)
    ok &= reproj <= cfg.max_reproj_px
    ok &= rel <= cfg.max_rel_depth
    ok &= cos >= np.cos(np.radians(cfg.max_normal_deg))
    return ok


def geometric_filter(views, maps: list, cfg: FilterConfig = FilterConfig(), neighbors=None) -> list:
    """Keep only pixels confirmed by at least ``cfg.min_consistent`` other views.

    ``neighbors[i]`` optionally lists the indices checked for view ``i``; by
    default the ``cfg.num_neighbor_views`` closest camera centres are used.
    """
    views = list(views)
    if len(views) != len(maps):
        raise ValueError("need exactly one map set per view")
    centers = np.array([v.pose.center for v in views]).reshape(len(views), 3)
    out = []
    for i, (v, m) in enumerate(zip(views, maps)):
        if neighbors is None:
            dist = np.linalg.norm(centers - centers[i], axis=1)
            order = [j for j in np.argsort(dist, kind="stable") if j != i]
            nbrs = order[: cfg.num_neighbor_views]
        else:
            nbrs = [j for j in neighbors[i] if j != i]
        count = np.zeros(m.depth.shape, dtype=np.int64)
        for j in nbrs:
            count += _consistency(v, m, views[j], maps[j], cfg)
        keep = m.valid & (count >= cfg.min_consistent) if nbrs else np.zeros_like(m.valid)
        out.append(
            PropagatedMaps(
                np.where(keep, m.depth, 0.0),
                np.where(keep[..., None], m.normal, 0.0),
                keep,
                np.where(keep, m.score, -1.0),
            )
        )
    return out


def select_growth_pixels(filtered_depth, rendered_depth, sigma: float = 0.8,
                         rendered_alpha=None, valid=None) -> np.ndarray:
    """Pixels where a trusted filtered depth disagrees with, or is missing from, the render."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    f = np.asarray(filtered_depth, dtype=np.float64)
    r = np.asarray(rendered_depth, dtype=np.float64)
    if f.shape != r.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {r.shape}")
    ok = (f > 0) & np.isfinite(f)
    if valid is not None:
        ok &= valid
    empty = r <= 0 if rendered_alpha is None else rendered_alpha < ALPHA_EMPTY
    rel = np.abs(f - r) / np.where(ok, f, 1.0)
    return ok & (empty | (rel > sigma))


def rotation_from_normal(n: np.ndarray) -> np.ndarray:
    """Rotation matrices whose first column is the given unit vector."""
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    b = np.cross(n, helper)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    c = np.cross(n, b)
    return np.stack([n, b, c], axis=-1)


def spawn_gaussians(mask, filtered: PropagatedMaps, view, cloud: GaussianCloud,
                    stride: int = 2, opacity: float = INIT_OPACITY) -> int:
    """Append one Gaussian per masked pixel on the ``stride`` lattice.

    Returns the number of Gaussians added.
    """
    mask = np.asarray(mask, dtype=bool)
    sub = np.zeros_like(mask)
    sub[::stride, ::stride] = True
    ys, xs = np.nonzero(mask & sub & filtered.valid)
    if len(xs) == 0:
        return 0
    K, P = view.intrinsics, view.pose
    z = filtered.depth[ys, xs]
    Xc = K.rays()[ys, xs] * z[:, None]
    means = (Xc - P.t) @ P.W
    normals = filtered.normal[ys, xs] @ P.W
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    R = rotation_from_normal(normals)
    quats = np.array([rotmat_to_quat(r) for r in R])
    ref = np.concatenate([cloud.means, means]) if len(cloud) else means
    if len(ref) > 1:
        scale = knn_mean_distance(means, ref, KNN)
        scale = np.where(scale > 0, scale, 1e-7)
    else:
        scale = np.full(len(means), 0.01 * float(np.median(z)))
    new = GaussianCloud(
        means,
        quats,
        np.repeat(np.log(scale)[:, None], 3, axis=1),
        np.full(len(means), float(logit(opacity))),
        np.clip(view.image[ys, xs], 0.0, 1.0),
    )
    cloud.extend(new)
    return len(means)


def clone_split_prune(cloud: GaussianCloud, scene_extent: float, rng: np.random.Generator,
                      cfg: DensifyConfig = DensifyConfig(), return_origin: bool = False,
                      max_gaussians: int | None = None):
    """Gradient-driven clone/split followed by opacity pruning. Resets grad stats.

    Survivors keep their relative order and come first, then clones, then split
    children. With ``return_origin`` also returns, per output Gaussian, the
    index it was copied from unchanged or -1 for a new one.
    """
    n = len(cloud)
    grad = np.where(cloud.grad_count > 0, cloud.grad_accum / np.maximum(cloud.grad_count, 1), 0.0)
    hot = grad >= cfg.grad_threshold
    if max_gaussians is not None:
        big0 = cloud.scales.max(axis=1) > cfg.percent_dense * scene_extent if n else hot
        extra = np.where(big0, cfg.split_children - 1, 1)
        room = max_gaussians - n
        cand = np.nonzero(hot)[0]
        if extra[cand].sum() > room:
            # most urgent first; stable so equal gradients keep index order
            cand = cand[np.argsort(-grad[cand], kind="stable")]
            take = cand[np.cumsum(extra[cand]) <= room]
            hot = np.zeros(n, dtype=bool)
            hot[take] = True
    big = cloud.scales.max(axis=1) > cfg.percent_dense * scene_extent if n else np.zeros(0, bool)
    keep_idx = np.nonzero(~(hot & big))[0]
    clone_idx = np.nonzero(hot & ~big)[0]
    split_idx = np.nonzero(hot & big)[0]

    out = cloud.select(keep_idx)
    origin = [keep_idx, np.full(len(clone_idx), -1)]
    out.extend(cloud.select(clone_idx))
    if len(split_idx):
        src = cloud.select(np.repeat(split_idx, cfg.split_children))
        R = src.rotations
        offs = rng.normal(size=(len(src), 3)) * src.scales
        src.means = src.means + np.einsum("nij,nj->ni", R, offs)
        src.log_scales = src.log_scales - np.log(cfg.split_factor)
        out.extend(src)
        origin.append(np.full(len(src), -1))
    origin = np.concatenate(origin).astype(np.int64)
    alive = np.nonzero(out.opacities >= cfg.min_opacity)[0]
    out = out.select(alive)
    out.reset_grad_stats()
    if return_origin:
        return out, origin[alive]
    return out
