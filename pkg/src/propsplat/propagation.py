"""PatchMatch-style plane propagation over rendered depth/normal maps.

Each pixel carries a plane hypothesis. On a red/black checkerboard, a pixel
compares its own plane with the planes of its four neighbours by warping an
11x11 grayscale patch into neighbouring views through the plane-induced
homography, and keeps whichever plane scores the best mean NCC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .camera import Intrinsics, PlaneHypothesis, homography, relative_transform

GRAZING_EPS = 1e-9
LUMA = np.array([0.299, 0.587, 0.114])


class InvalidHypothesis(ValueError):
    pass


@dataclass(frozen=True)
class PropagationConfig:
    patch_radius: int = 5
    num_iterations: int = 3
    ncc_min: float = 0.1
    num_neighbor_views: int = 3
    top_k: int = 3
    phases: tuple = (0, 1)

    def __post_init__(self):
        if self.patch_radius < 2:
            raise ValueError("patch_radius must be >= 2")
        if self.num_iterations < 1:
            raise ValueError("num_iterations must be >= 1")
        if self.num_neighbor_views < 1 or self.top_k < 1:
            raise ValueError("need at least one neighbor view")
        if sorted(self.phases) != [0, 1]:
            raise ValueError("phases must be a permutation of (0, 1)")


@dataclass
class HypothesisGrid:
    """Per-pixel planes ``(nx, ny, nz, d)`` plus a validity mask."""

    planes: np.ndarray
    valid: np.ndarray

    def at(self, x: int, y: int) -> PlaneHypothesis | None:
        if not self.valid[y, x]:
            return None
        n0, n1, n2, d = self.planes[y, x]
        return PlaneHypothesis((n0, n1, n2), float(d))


@dataclass
class PropagatedMaps:
    depth: np.ndarray
    normal: np.ndarray  # camera-facing, camera frame
    valid: np.ndarray
    score: np.ndarray

    @property
    def shape(self):
        return self.depth.shape


def luma(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image, dtype=np.float64) @ LUMA)


def plane_from_pixel(p, z: float, n, K: Intrinsics) -> PlaneHypothesis:
    """Plane through the back-projection of ``p`` at depth ``z`` with normal ``n``.

    ``n`` may face either way; it is flipped so the distance comes out positive.
    """
    if not z > 0:
        raise InvalidHypothesis("depth must be positive")
    n = np.asarray(n, dtype=np.float64)
    ray = K.K_inv @ np.array([p[0], p[1], 1.0])
    dot = float(n @ ray)
    if abs(dot) < GRAZING_EPS:
        raise InvalidHypothesis("plane is parallel to the viewing ray")
    if dot < 0:
        n, dot = -n, -dot
    return PlaneHypothesis(tuple(n), z * dot)


def depth_normal_from_plane(p, h: PlaneHypothesis, K: Intrinsics) -> tuple[float, np.ndarray]:
    ray = K.K_inv @ np.array([p[0], p[1], 1.0])
    denom = float(h.normal @ ray)
    if denom < GRAZING_EPS:
        raise InvalidHypothesis("plane is not visible along this pixel's ray")
    z = h.d / denom
    if not (z > 0 and np.isfinite(z)):
        raise InvalidHypothesis(f"decoded depth {z} is not usable")
    return z, h.normal


def planes_from_maps(depth, normal, K: Intrinsics, mask=None) -> HypothesisGrid:
    """Vectorised :func:`plane_from_pixel` over whole maps."""
    rays = K.rays()
    dot = np.sum(normal * rays, axis=-1)
    ok = (depth > 0) & np.isfinite(depth) & (np.abs(dot) >= GRAZING_EPS)
    ok &= np.abs(np.linalg.norm(normal, axis=-1) - 1.0) < 1e-6
    if mask is not None:
        ok &= mask
    sign = np.where(dot < 0, -1.0, 1.0)
    planes = np.zeros(depth.shape + (4,))
    planes[..., :3] = normal * sign[..., None]
    planes[..., 3] = depth * dot * sign
    planes[~ok] = 0.0
    return HypothesisGrid(planes, ok.astype(np.uint8))


def decode_planes(grid: HypothesisGrid, K: Intrinsics):
    """Depth and camera-facing normal for every valid hypothesis."""
    rays = K.rays()
    denom = np.sum(grid.planes[..., :3] * rays, axis=-1)
    ok = (grid.valid != 0) & (denom >= GRAZING_EPS)
    z = np.where(ok, grid.planes[..., 3] / np.where(ok, denom, 1.0), 0.0)
    ok &= (z > 0) & np.isfinite(z)
    depth = np.where(ok, z, 0.0)
    normal = np.where(ok[..., None], -grid.planes[..., :3], 0.0)
    return depth, normal, ok


def candidate_set(p, phase: int, grid: HypothesisGrid) -> list[PlaneHypothesis]:
    """The pixel's own plane followed by its up/down/left/right neighbours'."""
    x, y = int(p[0]), int(p[1])
    H, W = grid.valid.shape
    if not (0 <= x < W and 0 <= y < H):
        raise ValueError(f"pixel {p} outside the {W}x{H} grid")
    if (x + y) % 2 != phase:
        raise ValueError(f"pixel {p} does not belong to checkerboard phase {phase}")
    out = []
    for dx, dy in ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)):
        cx, cy = x + dx, y + dy
        if 0 <= cx < W and 0 <= cy < H:
            h = grid.at(cx, cy)
            if h is not None:
                out.append(h)
    return out


def ncc_score(ref_view, src_view, p, h: PlaneHypothesis, patch_radius: int = 5) -> float:
    """NCC of the patch around ``p`` and its plane-warped image in ``src_view``."""
    try:
        Hm = homography(
            ref_view.intrinsics, relative_transform(ref_view.pose, src_view.pose), h,
            K_src=src_view.intrinsics,
        )
    except ValueError:
        return -1.0
    from ._fallback import ncc_batch

    return float(
        ncc_batch(
            luma(ref_view.image), luma(src_view.image), Hm[None],
            np.array([int(p[0])]), np.array([int(p[1])]), patch_radius,
        )[0]
    )


def select_neighbor_views(ref_view, views, k: int) -> list:
    """The ``k`` views whose camera centers are closest to the reference."""
    c = ref_view.pose.center
    ref_id = getattr(ref_view, "id", None)
    others = [
        v for v in views
        if v is not ref_view and (ref_id is None or getattr(v, "id", None) != ref_id)
    ]
    others.sort(key=lambda v: float(np.linalg.norm(v.pose.center - c)))
    return others[:k]


def _pack_sources(ref_view, neighbor_views):
    K = ref_view.intrinsics
    V = len(neighbor_views)
    hs = np.array([v.intrinsics.height for v in neighbor_views], dtype=np.int32)
    ws = np.array([v.intrinsics.width for v in neighbor_views], dtype=np.int32)
    srcs = np.zeros((V, hs.max(), ws.max()))
    KW = np.zeros((V, 3, 3))
    Kt = np.zeros((V, 3))
    for i, v in enumerate(neighbor_views):
        srcs[i, : hs[i], : ws[i]] = luma(v.image)
        rel = relative_transform(ref_view.pose, v.pose)
        KW[i] = v.intrinsics.K @ rel.W_rel
        Kt[i] = v.intrinsics.K @ rel.t_rel
    return srcs, hs, ws, KW, Kt, np.ascontiguousarray(K.K_inv)


def propagate_grid(ref_view, neighbor_views, grid: HypothesisGrid, cfg: PropagationConfig,
                   backend: str | None = None, num_threads: int | None = None,
                   score_log: list | None = None):
    """Run ``cfg.num_iterations`` red/black sweeps over ``grid`` (modified in place).

    Returns the per-pixel best aggregated score.
    """
    kern = kernels.get(backend)
    threads = kernels.NUM_THREADS if num_threads is None else num_threads
    K = ref_view.intrinsics
    ref = luma(ref_view.image)
    srcs, hs, ws, KW, Kt, Kinv = _pack_sources(ref_view, neighbor_views)
    rays = np.ascontiguousarray(K.rays())
    scores = np.full(grid.valid.shape, -np.inf)
    for _ in range(cfg.num_iterations):
        for phase in cfg.phases:
            kern.propagate_phase(
                ref, srcs, hs, ws, KW, Kt, Kinv, rays, grid.planes, grid.valid, scores,
                phase, cfg.patch_radius, cfg.top_k, threads,
            )
        if score_log is not None:
            score_log.append(scores.copy())
    return scores


def propagate(ref_view, neighbor_views, rendered, cfg: PropagationConfig = PropagationConfig(),
              backend: str | None = None, num_threads: int | None = None,
              init_mask=None) -> PropagatedMaps:
    """Propagate plane hypotheses initialised from rendered depth/normal maps."""
    K = ref_view.intrinsics
    neighbor_views = list(neighbor_views)[: cfg.num_neighbor_views]
    if not neighbor_views:
        shape = rendered.depth.shape
        return PropagatedMaps(
            rendered.depth.copy(), rendered.normal.copy(), np.zeros(shape, dtype=bool),
            np.full(shape, -1.0),
        )
    mask = rendered.alpha > 1e-3 if getattr(rendered, "alpha", None) is not None else None
    if init_mask is not None:
        mask = init_mask if mask is None else mask & init_mask
    grid = planes_from_maps(rendered.depth, rendered.normal, K, mask)
    scores = propagate_grid(ref_view, neighbor_views, grid, cfg, backend, num_threads)
    depth, normal, ok = decode_planes(grid, K)
    ok &= scores >= cfg.ncc_min
    return PropagatedMaps(
        np.where(ok, depth, 0.0),
        np.where(ok[..., None], normal, 0.0),
        ok,
        np.where(np.isfinite(scores), scores, -1.0),
    )
