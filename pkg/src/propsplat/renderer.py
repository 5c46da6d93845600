"""Tile-based splatting of Gaussians into color, depth, normal and alpha maps.

Depth and normal are composited exactly like color. Depth is divided by the
accumulated alpha and normals are renormalised wherever alpha > 1e-3.
``render_backward`` propagates map gradients to every raw Gaussian parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .camera import Intrinsics, Pose, quat_to_rotmat
from .gaussians import Gaussian, GaussianCloud, shortest_axis_index, shortest_axis_sign, sigmoid

TILE_SIZE = 16
NEAR_PLANE = 0.01
COV_DILATION = 0.3
ALPHA_EPS = 1e-3
NORM_EPS = 1e-12
SIGMA_EXTENT = 3.0


@dataclass
class Projected2DGaussian:
    mean2: np.ndarray
    cov2: np.ndarray
    depth: float
    normal: np.ndarray  # camera frame, camera-facing
    opacity: float
    color: np.ndarray


@dataclass
class Projection:
    """Batched screen-space Gaussians plus what the backward pass needs."""

    visible: np.ndarray
    means2: np.ndarray
    cov2: np.ndarray  # (N, 3): A, B, C of [[A, B], [B, C]]
    conics: np.ndarray
    depths: np.ndarray
    normals: np.ndarray
    opacities: np.ndarray
    radii: np.ndarray
    tile_rect: np.ndarray  # (N, 4): x0, x1, y0, y1
    cam_points: np.ndarray
    J: np.ndarray
    V: np.ndarray
    R: np.ndarray
    axis_index: np.ndarray
    axis_sign: np.ndarray


@dataclass
class GeoMaps:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray
    state: "RenderState | None" = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class RenderState:
    K: Intrinsics
    pose: Pose
    proj: Projection
    feats: np.ndarray
    tile_start: np.ndarray
    tile_list: np.ndarray
    raw: np.ndarray
    final_T: np.ndarray
    n_last: np.ndarray
    n_contrib: np.ndarray
    n_clamped: np.ndarray
    backend: str | None


def project_gaussians(cloud: GaussianCloud, K: Intrinsics, pose: Pose,
                      tile_size: int = TILE_SIZE) -> Projection:
    n = len(cloud)
    W = pose.W
    R = quat_to_rotmat(cloud.quats) if n else np.zeros((0, 3, 3))
    s2 = np.exp(2.0 * cloud.log_scales)
    sigma = (R * s2[:, None, :]) @ np.swapaxes(R, 1, 2)
    tc = cloud.means @ W.T + pose.t
    x, y, z = tc[:, 0], tc[:, 1], tc[:, 2]
    visible = z > NEAR_PLANE
    zs = np.where(visible, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * x / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * y / zs**2
    V = W @ sigma @ W.T
    c2 = J @ V @ np.swapaxes(J, 1, 2)
    A = c2[:, 0, 0] + COV_DILATION
    B = 0.5 * (c2[:, 0, 1] + c2[:, 1, 0])
    C = c2[:, 1, 1] + COV_DILATION
    det = A * C - B * B
    visible &= det > 0
    det_s = np.where(visible, det, 1.0)
    conics = np.stack([C / det_s, -B / det_s, A / det_s], axis=1)
    means2 = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)
    mid = 0.5 * (A + C)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = SIGMA_EXTENT * np.sqrt(np.maximum(lam, 0.0))
    visible &= np.isfinite(means2).all(axis=1) & np.isfinite(radii)

    ntx = (K.width + tile_size - 1) // tile_size
    nty = (K.height + tile_size - 1) // tile_size
    with np.errstate(invalid="ignore"):
        mx = np.where(visible, means2[:, 0], 0.0)
        my = np.where(visible, means2[:, 1], 0.0)
        r = np.where(visible, radii, 0.0)
        x0 = np.clip(np.floor((mx - r) / tile_size), 0, ntx).astype(np.int64)
        x1 = np.clip(np.floor((mx + r) / tile_size) + 1, 0, ntx).astype(np.int64)
        y0 = np.clip(np.floor((my - r) / tile_size), 0, nty).astype(np.int64)
        y1 = np.clip(np.floor((my + r) / tile_size) + 1, 0, nty).astype(np.int64)
    visible &= (x1 > x0) & (y1 > y0)

    axis_index = shortest_axis_index(cloud.log_scales)
    axis = R[np.arange(n), :, axis_index]
    sign = shortest_axis_sign(axis, cloud.means, pose.center)
    normals = (axis * sign[:, None]) @ W.T

    return Projection(
        visible=visible,
        means2=means2,
        cov2=np.stack([A, B, C], axis=1),
        conics=conics,
        depths=z,
        normals=normals,
        opacities=sigmoid(cloud.opacity_raw),
        radii=np.where(visible, radii, 0.0),
        tile_rect=np.stack([x0, x1, y0, y1], axis=1),
        cam_points=tc,
        J=J,
        V=V,
        R=R,
        axis_index=axis_index,
        axis_sign=sign,
    )


def project_to_2d(g: Gaussian, view) -> Projected2DGaussian | None:
    """Screen-space footprint of one Gaussian; ``None`` when culled."""
    cloud = GaussianCloud.from_gaussians([g])
    p = project_gaussians(cloud, view.intrinsics, view.pose)
    if not p.visible[0]:
        return None
    A, B, C = p.cov2[0]
    return Projected2DGaussian(
        mean2=p.means2[0],
        cov2=np.array([[A, B], [B, C]]),
        depth=float(p.depths[0]),
        normal=p.normals[0],
        opacity=float(p.opacities[0]),
        color=cloud.colors[0].copy(),
    )


def build_tile_lists(proj: Projection, K: Intrinsics, tile_size: int = TILE_SIZE):
    """Per-tile Gaussian lists sorted front to back.

    Ties in depth are broken by screen position and opacity so that the result
    does not depend on the order of Gaussians in the cloud.
    """
    ntx = (K.width + tile_size - 1) // tile_size
    nty = (K.height + tile_size - 1) // tile_size
    vis = np.nonzero(proj.visible)[0]
    x0, x1, y0, y1 = proj.tile_rect[vis].T
    wr = x1 - x0
    counts = wr * (y1 - y0)
    total = int(counts.sum())
    g = np.repeat(vis, counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - offsets
    wrr = np.repeat(wr, counts)
    tile_id = (np.repeat(y0, counts) + local // wrr) * ntx + np.repeat(x0, counts) + local % wrr
    order = np.lexsort(
        (
            proj.opacities[g],
            proj.means2[g, 1],
            proj.means2[g, 0],
            proj.depths[g],
            tile_id,
        )
    )
    tile_list = np.ascontiguousarray(g[order], dtype=np.int64)
    tile_start = np.searchsorted(tile_id[order], np.arange(ntx * nty + 1)).astype(np.int64)
    return tile_start, tile_list


def render(view, cloud: GaussianCloud, backend: str | None = None,
           tile_size: int = TILE_SIZE, num_threads: int | None = None) -> GeoMaps:
    """Rasterise ``cloud`` from ``view`` (anything with ``intrinsics`` and ``pose``)."""
    K, pose = view.intrinsics, view.pose
    kern = kernels.get(backend)
    proj = project_gaussians(cloud, K, pose, tile_size)
    tile_start, tile_list = build_tile_lists(proj, K, tile_size)
    feats = np.concatenate(
        [cloud.colors, proj.depths[:, None], proj.normals, np.ones((len(cloud), 1))], axis=1
    )
    threads = kernels.NUM_THREADS if num_threads is None else num_threads
    raw, final_T, n_last, n_contrib, n_clamped = kern.rasterize_forward(
        proj.means2, proj.conics, proj.opacities, feats, tile_start, tile_list,
        K.height, K.width, tile_size, threads,
    )
    alpha = raw[..., 7]
    covered = alpha > ALPHA_EPS
    depth = np.where(covered, raw[..., 3] / np.where(covered, alpha, 1.0), 0.0)
    nraw = raw[..., 4:7]
    nnorm = np.linalg.norm(nraw, axis=-1)
    has_n = covered & (nnorm > NORM_EPS)
    normal = np.where(has_n[..., None], nraw / np.where(has_n, nnorm, 1.0)[..., None], 0.0)
    state = RenderState(
        K, pose, proj, feats, tile_start, tile_list, raw, final_T, n_last, n_contrib, n_clamped,
        backend,
    )
    return GeoMaps(raw[..., 0:3].copy(), depth, normal, alpha.copy(), state)


@dataclass
class CloudGrads:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_raw: np.ndarray
    colors: np.ndarray
    screen: np.ndarray  # per-Gaussian NDC-space positional gradient norm
    visible: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "means": self.means,
            "quats": self.quats,
            "log_scales": self.log_scales,
            "opacity_raw": self.opacity_raw,
            "colors": self.colors,
        }


def _raw_feature_grads(maps: GeoMaps, d_color, d_depth, d_normal, d_alpha) -> np.ndarray:
    st = maps.state
    H, W = maps.shape
    g = np.zeros((H, W, 8))
    raw = st.raw
    alpha = raw[..., 7]
    covered = alpha > ALPHA_EPS
    if d_color is not None:
        g[..., 0:3] = d_color
    if d_depth is not None:
        a = np.where(covered, alpha, 1.0)
        g[..., 3] = np.where(covered, d_depth / a, 0.0)
        g[..., 7] -= np.where(covered, d_depth * maps.depth / a, 0.0)
    if d_normal is not None:
        nraw = raw[..., 4:7]
        nnorm = np.linalg.norm(nraw, axis=-1)
        has_n = covered & (nnorm > NORM_EPS)
        n = maps.normal
        proj_g = d_normal - n * np.sum(n * d_normal, axis=-1, keepdims=True)
        g[..., 4:7] = np.where(has_n[..., None], proj_g / np.where(has_n, nnorm, 1.0)[..., None], 0.0)
    if d_alpha is not None:
        g[..., 7] += d_alpha
    return g


def _rotation_to_quat_grad(quats: np.ndarray, dR: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(quats, axis=1, keepdims=True)
    q = quats / qn
    w, x, y, z = q.T
    G = dR
    dw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2]
              - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    dq = np.stack([dw, dx, dy, dz], axis=1)
    return (dq - q * np.sum(q * dq, axis=1, keepdims=True)) / qn


def render_backward(maps: GeoMaps, cloud: GaussianCloud, d_color=None, d_depth=None,
                    d_normal=None, d_alpha=None, num_threads: int | None = None) -> CloudGrads:
    """Gradients of a scalar loss w.r.t. raw parameters, given d loss / d maps.

    ``maps`` must come from :func:`render` on the same (unmodified) cloud.
    """
    st = maps.state
    if st is None:
        raise ValueError("maps carry no render state; call render() first")
    n = len(cloud)
    K, pose, proj = st.K, st.pose, st.proj
    kern = kernels.get(st.backend)
    threads = kernels.NUM_THREADS if num_threads is None else num_threads
    g_raw = _raw_feature_grads(maps, d_color, d_depth, d_normal, d_alpha)
    entry = kern.rasterize_backward(
        proj.means2, proj.conics, proj.opacities, st.feats, st.tile_start, st.tile_list,
        K.height, K.width, TILE_SIZE, g_raw, st.final_T, st.n_last, threads,
    )
    per = kern.reduce_entries(entry, st.tile_list, n)
    dm2 = per[:, 0:2]
    dconic = per[:, 2:5]
    dopac = per[:, 5]
    dfeat = per[:, 6:14]

    vis = proj.visible
    A, B, C = proj.cov2.T
    det = np.where(vis, A * C - B * B, 1.0)
    det2 = det * det
    ga, gb, gc = dconic.T
    dA = (-C * C * ga + B * C * gb - B * B * gc) / det2
    dB = (2 * B * C * ga - (det + 2 * B * B) * gb + 2 * A * B * gc) / det2
    dC = (-B * B * ga + A * B * gb - A * A * gc) / det2
    G2 = np.zeros((n, 2, 2))
    G2[:, 0, 0] = dA
    G2[:, 0, 1] = G2[:, 1, 0] = 0.5 * dB
    G2[:, 1, 1] = dC
    J, V, Wm = proj.J, proj.V, pose.W
    Jt = np.swapaxes(J, 1, 2)
    dV = Jt @ G2 @ J
    dJ = 2.0 * G2 @ J @ V
    dSigma = Wm.T @ dV @ Wm

    R = proj.R
    s2 = np.exp(2.0 * cloud.log_scales)
    dR = 2.0 * dSigma @ R * s2[:, None, :]
    d_log_scales = 2.0 * s2 * np.einsum("nij,nik,nkj->nj", R, dSigma, R)

    dn_world = dfeat[:, 4:7] @ Wm
    idx = np.arange(n)
    dR[idx, :, proj.axis_index] += proj.axis_sign[:, None] * dn_world

    d_quats = _rotation_to_quat_grad(cloud.quats, dR) if n else np.zeros((0, 4))

    x, y = proj.cam_points[:, 0], proj.cam_points[:, 1]
    z = np.where(vis, proj.cam_points[:, 2], 1.0)
    fx, fy = K.fx, K.fy
    dtc = np.zeros((n, 3))
    dtc[:, 0] = dm2[:, 0] * fx / z + dJ[:, 0, 2] * (-fx / z**2)
    dtc[:, 1] = dm2[:, 1] * fy / z + dJ[:, 1, 2] * (-fy / z**2)
    dtc[:, 2] = (
        -dm2[:, 0] * fx * x / z**2
        - dm2[:, 1] * fy * y / z**2
        + dfeat[:, 3]
        + dJ[:, 0, 0] * (-fx / z**2)
        + dJ[:, 0, 2] * (2 * fx * x / z**3)
        + dJ[:, 1, 1] * (-fy / z**2)
        + dJ[:, 1, 2] * (2 * fy * y / z**3)
    )
    d_means = dtc @ Wm

    op = proj.opacities
    d_opacity_raw = dopac * op * (1.0 - op)
    screen = np.hypot(dm2[:, 0] * 0.5 * K.width, dm2[:, 1] * 0.5 * K.height)

    mask = vis[:, None]
    return CloudGrads(
        means=np.where(mask, d_means, 0.0),
        quats=np.where(mask, d_quats, 0.0),
        log_scales=np.where(mask, d_log_scales, 0.0),
        opacity_raw=np.where(vis, d_opacity_raw, 0.0),
        colors=np.where(mask, dfeat[:, 0:3], 0.0),
        screen=np.where(vis, screen, 0.0),
        visible=vis,
    )
