"""Ray-cast synthetic scenes of textured infinite planes with exact geometry.

A scene spec is plain JSON::

    {
      "image": {"width": 128, "height": 96, "fx": 110.0},
      "planes": [
        {"normal": [0, 0, 1], "d": 0.0,
         "texture": {"type": "value-noise", "seed": 1, "cell": 0.08,
                     "amplitude": 0.4, "base": [0.6, 0.5, 0.4]},
         "point_weight": 1.0}
      ],
      "cameras": {"count": 12, "radius": 4.0, "height": 1.5,
                  "look_at": [0, 1, 0.5], "arc_degrees": 60},
      "noise": 0.0, "seed": 0, "supersample": 2,
      "sparse_points": {"count": 200}
    }

World is z-up; a plane is ``{X : normal . X = d}``. Texture types are
``value-noise``, ``checker`` and ``flat``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Intrinsics, Pose
from .scene_io import CameraView, SparsePoints

TEXTURE_TYPES = ("value-noise", "checker", "flat")


@dataclass
class PlaneSpec:
    normal: np.ndarray
    d: float
    texture: dict = field(default_factory=lambda: {"type": "value-noise"})
    point_weight: float = 1.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be nonzero")
        self.normal = n / norm
        self.d = float(self.d) / norm
        kind = self.texture.get("type", "value-noise")
        if kind not in TEXTURE_TYPES:
            raise ValueError(f"unknown texture type {kind!r}; expected one of {TEXTURE_TYPES}")


@dataclass
class SyntheticSceneSpec:
    planes: list
    camera_count: int = 5
    camera_radius: float = 4.0
    camera_height: float = 1.5
    look_at: tuple = (0.0, 0.0, 0.0)
    arc_degrees: float = 40.0
    arc_start_degrees: float | None = None
    width: int = 128
    height: int = 96
    fx: float | None = None
    fy: float | None = None
    noise: float = 0.0
    seed: int = 0
    supersample: int = 2
    sparse_points: int = 0

    def __post_init__(self):
        self.planes = [p if isinstance(p, PlaneSpec) else PlaneSpec(**p) for p in self.planes]
        if not self.planes:
            raise ValueError("a synthetic scene needs at least one plane")
        if self.camera_count < 2:
            raise ValueError("a synthetic scene needs at least two cameras")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSceneSpec":
        img = data.get("image", {})
        cams = data.get("cameras", {})
        sparse = data.get("sparse_points", {})
        return cls(
            planes=[PlaneSpec(**p) for p in data["planes"]],
            camera_count=cams.get("count", 5),
            camera_radius=cams.get("radius", 4.0),
            camera_height=cams.get("height", 1.5),
            look_at=tuple(cams.get("look_at", (0.0, 0.0, 0.0))),
            arc_degrees=cams.get("arc_degrees", 40.0),
            arc_start_degrees=cams.get("arc_start_degrees"),
            width=img.get("width", 128),
            height=img.get("height", 96),
            fx=img.get("fx"),
            fy=img.get("fy"),
            noise=data.get("noise", 0.0),
            seed=data.get("seed", 0),
            supersample=data.get("supersample", 2),
            sparse_points=sparse.get("count", 0) if isinstance(sparse, dict) else int(sparse),
        )

    @classmethod
    def from_json(cls, path) -> "SyntheticSceneSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def intrinsics(self) -> Intrinsics:
        fx = self.fx if self.fx is not None else 0.9 * self.width
        fy = self.fy if self.fy is not None else fx
        return Intrinsics(fx, fy, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)

    def poses(self) -> list[Pose]:
        start = -self.arc_degrees / 2 if self.arc_start_degrees is None else self.arc_start_degrees
        angles = np.radians(start + np.linspace(0.0, self.arc_degrees, self.camera_count))
        target = np.asarray(self.look_at, dtype=np.float64)
        poses = []
        for a in angles:
            eye = target + np.array(
                [self.camera_radius * np.sin(a), -self.camera_radius * np.cos(a), self.camera_height]
            )
            poses.append(Pose.look_at(eye, target))
        return poses


@dataclass
class SyntheticScene:
    spec: SyntheticSceneSpec
    views: list
    plane_ids: list  # per view, (H, W) int map, -1 for background
    points: SparsePoints


def _hash_uniform(ix, iy, seed):
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (seed * 83492791)
    h = h.astype(np.uint64)
    h ^= h >> np.uint64(13)
    h *= np.uint64(0x5BD1E995)
    h ^= h >> np.uint64(15)
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0xFFFFFF)


def _value_noise(u, v, seed, cell, octaves):
    total = np.zeros_like(u)
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        su, sv = u / cell, v / cell
        iu, iv = np.floor(su), np.floor(sv)
        fu, fv = su - iu, sv - iv
        fu = fu * fu * (3 - 2 * fu)
        fv = fv * fv * (3 - 2 * fv)
        s = seed * 31 + o
        n00 = _hash_uniform(iu, iv, s)
        n10 = _hash_uniform(iu + 1, iv, s)
        n01 = _hash_uniform(iu, iv + 1, s)
        n11 = _hash_uniform(iu + 1, iv + 1, s)
        total += amp * ((1 - fv) * ((1 - fu) * n00 + fu * n10) + fv * ((1 - fu) * n01 + fu * n11))
        norm += amp
        amp *= 0.5
        cell *= 0.5
    return total / norm


def _plane_basis(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def plane_texture(plane: PlaneSpec, X: np.ndarray) -> np.ndarray:
    """RGB colour of world points lying on ``plane``."""
    tex = plane.texture
    kind = tex.get("type", "value-noise")
    base = np.asarray(tex.get("base", (0.5, 0.5, 0.5)), dtype=np.float64)
    amp = float(tex.get("amplitude", 0.4))
    bu, bv = _plane_basis(plane.normal)
    u, v = X @ bu, X @ bv
    if kind == "flat":
        g = np.zeros_like(u)
    elif kind == "checker":
        cell = float(tex.get("cell", 0.25))
        g = np.where((np.floor(u / cell) + np.floor(v / cell)) % 2 == 0, 0.5, -0.5)
    else:
        g = _value_noise(u, v, int(tex.get("seed", 0)), float(tex.get("cell", 0.1)),
                         int(tex.get("octaves", 3))) - 0.5
    return np.clip(base + 2.0 * amp * g[..., None] * base, 0.0, 1.0)


def raycast(planes, K: Intrinsics, pose: Pose, px, py):
    """Nearest positive plane hit for pixel coordinates ``(px, py)``.

    Returns camera depth, camera-frame camera-facing normal, plane index
    (-1 on a miss) and the world hit point.
    """
    rays_c = np.stack([(px - K.cx) / K.fx, (py - K.cy) / K.fy, np.ones_like(px)], axis=-1)
    rays_w = rays_c @ pose.W
    C = pose.center
    depth = np.full(px.shape, np.inf)
    pid = np.full(px.shape, -1, dtype=np.int64)
    for i, pl in enumerate(planes):
        denom = rays_w @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pl.d - pl.normal @ C) / denom
        hit = (np.abs(denom) > 1e-12) & (t > 1e-9) & (t < depth)
        depth = np.where(hit, t, depth)
        pid = np.where(hit, i, pid)
    miss = pid < 0
    depth = np.where(miss, 0.0, depth)
    X = C + rays_w * depth[..., None]
    normals_w = np.array([pl.normal for pl in planes])[np.maximum(pid, 0)]
    n_c = normals_w @ pose.W.T
    flip = np.sum(n_c * rays_c, axis=-1) > 0
    n_c = np.where(flip[..., None], -n_c, n_c)
    n_c[miss] = 0.0
    return depth, n_c, pid, X


def _shade(planes, X, pid):
    color = np.zeros(X.shape)
    for i, pl in enumerate(planes):
        m = pid == i
        if m.any():
            color[m] = plane_texture(pl, X[m])
    return color


def render_view(spec: SyntheticSceneSpec, K: Intrinsics, pose: Pose):
    H, W = K.height, K.width
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    depth, normal, pid, _ = raycast(spec.planes, K, pose, px, py)
    ss = max(1, int(spec.supersample))
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    color = np.zeros((H, W, 3))
    for oy in offs:
        for ox in offs:
            _, _, spid, X = raycast(spec.planes, K, pose, px + ox, py + oy)
            color += _shade(spec.planes, X, spid)
    color /= ss * ss
    return color, depth, normal, pid


def _sample_points(spec, views, plane_ids, rng) -> SparsePoints:
    n = spec.sparse_points
    if n <= 0:
        return SparsePoints(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    weights = np.array([pl.point_weight for pl in spec.planes])
    xyz, rgb = [], []
    for _ in range(n):
        vi = rng.integers(len(views))
        v, pid = views[vi], plane_ids[vi]
        w = np.where(pid >= 0, weights[np.maximum(pid, 0)], 0.0).ravel()
        if w.sum() <= 0:
            continue
        k = rng.choice(w.size, p=w / w.sum())
        y, x = divmod(int(k), v.intrinsics.width)
        z = v.depth_gt[y, x]
        K = v.intrinsics
        Xc = np.array([(x - K.cx) / K.fx * z, (y - K.cy) / K.fy * z, z])
        xyz.append(v.pose.W.T @ (Xc - v.pose.t))
        rgb.append(v.image[y, x])
    return SparsePoints(np.array(xyz).reshape(-1, 3), np.array(rgb).reshape(-1, 3),
                        np.arange(1, len(xyz) + 1, dtype=np.int64))


def generate_synthetic(spec: SyntheticSceneSpec) -> SyntheticScene:
    """Render every camera of ``spec`` with exact depth/normal ground truth."""
    K = spec.intrinsics()
    rng = np.random.default_rng(spec.seed)
    views, plane_ids = [], []
    for i, pose in enumerate(spec.poses()):
        color, depth, normal, pid = render_view(spec, K, pose)
        if not (pid >= 0).any():
            raise ValueError(f"camera {i} sees no plane (inside or behind every plane)")
        if spec.noise > 0:
            color = np.clip(color + rng.normal(0.0, spec.noise, color.shape), 0.0, 1.0)
        views.append(
            CameraView(i + 1, K, pose, color, f"{i + 1:04d}.ppm", depth_gt=depth, normal_gt=normal)
        )
        plane_ids.append(pid)
    points = _sample_points(spec, views, plane_ids, rng)
    return SyntheticScene(spec, views, plane_ids, points)


def export_scene(scene: SyntheticScene, out_dir) -> Path:
    from .scene_io import save_scene

    out = Path(out_dir)
    save_scene(out, scene.views, scene.points)
    return out
