"""Independent reference implementations the package is checked against.

Nothing here imports the code under test beyond plain data types, so a bug in
the package cannot cancel out against the same bug in its oracle.
"""

from types import SimpleNamespace

import numpy as np

from propsplat.camera import Intrinsics, Pose


def view(K: Intrinsics, pose: Pose):
    return SimpleNamespace(intrinsics=K, pose=pose)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng, max_angle=None) -> Pose:
    return Pose(random_rotation(rng), rng.normal(size=3))


def quat_matrix(q) -> np.ndarray:
    """Rotation of a (w, x, y, z) quaternion via the Hamilton product q v q*."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)

    def mul(a, b):
        w1, x1, y1, z1 = a
        w2, x2, y2, z2 = b
        return np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])

    conj = q * np.array([1, -1, -1, -1])
    cols = [mul(mul(q, np.r_[0.0, e]), conj)[1:] for e in np.eye(3)]
    return np.stack(cols, axis=1)


def ray_plane_warp(K_ref: Intrinsics, K_src: Intrinsics, ref: Pose, src: Pose, n_world, d_world, p):
    """Intersect the ray through ``p`` with a world plane, project into ``src``."""
    C = ref.center
    ray_c = np.array([(p[0] - K_ref.cx) / K_ref.fx, (p[1] - K_ref.cy) / K_ref.fy, 1.0])
    ray_w = ref.W.T @ ray_c
    s = (d_world - n_world @ C) / (n_world @ ray_w)
    X = C + s * ray_w
    Xs = src.W @ X + src.t
    return np.array([K_src.fx * Xs[0] / Xs[2] + K_src.cx, K_src.fy * Xs[1] / Xs[2] + K_src.cy]), s, Xs[2]


def splat_params(means, quats, log_scales, opacity_raw, colors, K: Intrinsics, pose: Pose):
    """Per-Gaussian screen footprint from first principles (EWA with 0.3 px dilation)."""
    out = []
    for mu, q, ls, o, c in zip(means, quats, log_scales, opacity_raw, colors):
        R = quat_matrix(q)
        S = np.diag(np.exp(ls))
        Sigma = R @ S @ S.T @ R.T
        t = pose.W @ mu + pose.t
        if t[2] <= 0.01:
            out.append(None)
            continue
        J = np.array([
            [K.fx / t[2], 0.0, -K.fx * t[0] / t[2] ** 2],
            [0.0, K.fy / t[2], -K.fy * t[1] / t[2] ** 2],
        ])
        cov2 = J @ pose.W @ Sigma @ pose.W.T @ J.T + 0.3 * np.eye(2)
        if np.linalg.det(cov2) <= 0:
            out.append(None)
            continue
        evals, evecs = np.linalg.eigh(Sigma)
        n = evecs[:, np.argmin(evals)]
        if n @ (pose.center - mu) < 0:
            n = -n
        out.append(dict(
            mean2=np.array([K.fx * t[0] / t[2] + K.cx, K.fy * t[1] / t[2] + K.cy]),
            inv=np.linalg.inv(cov2),
            depth=t[2],
            normal=pose.W @ n,
            opacity=1.0 / (1.0 + np.exp(-o)),
            color=np.asarray(c, dtype=np.float64),
        ))
    return out


def brute_force_render(cloud, K: Intrinsics, pose: Pose):
    """Every Gaussian at every pixel, full depth sort, front-to-back compositing.

    Vectorised over pixels only; there is no tiling or culling beyond the
    3-sigma ellipse, so it shares nothing with the tile rasteriser.
    """
    gs = splat_params(cloud.means, cloud.quats, cloud.log_scales, cloud.opacity_raw,
                      cloud.colors, K, pose)
    gs = [g for g in gs if g is not None]
    gs.sort(key=lambda g: g["depth"])
    H, W = K.height, K.width
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    acc = np.zeros((H, W, 8))
    for g in gs:
        alive = T >= 1e-4
        dx, dy = xs - g["mean2"][0], ys - g["mean2"][1]
        inv = g["inv"]
        q = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        a = np.minimum(0.99, g["opacity"] * np.exp(-0.5 * q))
        a = np.where(alive & (q <= 9.0), a, 0.0)  # outside the 3-sigma ellipse
        feat = np.concatenate([g["color"], [g["depth"]], g["normal"], [1.0]])
        acc += (a * T)[..., None] * feat
        T = T * (1.0 - a)
    color = acc[..., :3]
    alpha = acc[..., 7]
    cov = alpha > 1e-3
    depth = np.where(cov, acc[..., 3] / np.where(cov, alpha, 1.0), 0.0)
    nn = np.linalg.norm(acc[..., 4:7], axis=-1)
    ok = cov & (nn > 1e-12)
    normal = np.where(ok[..., None], acc[..., 4:7] / np.where(ok, nn, 1.0)[..., None], 0.0)
    return color, depth, normal, alpha


def finite_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (restored after)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def knn_mean_brute(points: np.ndarray, k: int = 3) -> np.ndarray:
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, :k].mean(axis=1)


def gaussian_window_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Direct (non-separable) 11x11 windowed SSIM with zero padding, channel by channel."""
    x = np.arange(11) - 5
    g = np.exp(-(x**2) / (2 * 1.5**2))
    w2 = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01**2, 0.03**2
    H, W = a.shape[:2]
    pa = np.pad(a, ((5, 5), (5, 5), (0, 0)))
    pb = np.pad(b, ((5, 5), (5, 5), (0, 0)))
    total = 0.0
    for y in range(H):
        for xx in range(W):
            wa = pa[y : y + 11, xx : xx + 11]
            wb = pb[y : y + 11, xx : xx + 11]
            for ch in range(a.shape[2]):
                A, B = wa[..., ch], wb[..., ch]
                ma, mb = (w2 * A).sum(), (w2 * B).sum()
                va = (w2 * A * A).sum() - ma**2
                vb = (w2 * B * B).sum() - mb**2
                cov = (w2 * A * B).sum() - ma * mb
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
    return total / a.size
