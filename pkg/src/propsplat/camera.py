"""Pinhole cameras, pose algebra and plane-induced homographies.

Conventions: right-handed, camera looks down +z, image x right and y down,
pixel centers at integer coordinates. A pose maps world to camera
coordinates, ``X_cam = W @ X_world + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# |w| below this makes a homogeneous warp invalid.
HOMOGENEOUS_EPS = 1e-12


class BehindCameraError(ValueError):
    """Raised when a point or depth is not strictly in front of the camera."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def rays(self) -> np.ndarray:
        """``K^-1 p~`` for every pixel, shape (H, W, 3), z-component 1."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack(
            [(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1
        )


def _check_rotation(W: np.ndarray) -> None:
    if W.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if np.abs(W.T @ W - np.eye(3)).max() > 1e-9 or np.linalg.det(W) < 0:
        raise ValueError("rotation must be orthonormal with det +1")


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    W: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        _check_rotation(W)
        W.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` looking at ``target``; ``up`` is the world direction
        that should appear toward the top of the image (image -y)."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(-np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        W = np.stack([x, y, z])
        return cls(W, -W @ eye)

    @property
    def center(self) -> np.ndarray:
        return -self.W.T @ self.t

    def apply(self, X: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera frame."""
        return np.asarray(X) @ self.W.T + self.t


@dataclass(frozen=True, eq=False)
class RelativePose:
    """Maps reference-camera coordinates to neighbor-camera coordinates."""

    W_rel: np.ndarray
    t_rel: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.W_rel.T + self.t_rel


@dataclass(frozen=True)
class PlaneHypothesis:
    """Local plane ``n . X = d`` in the reference camera frame.

    ``d`` is the positive origin-to-plane distance, so ``n`` is oriented along
    the viewing ray (``n . K^-1 p~ > 0`` at the owner pixel). Depth/normal maps
    store the opposite, camera-facing normal.
    """

    n: tuple
    d: float

    @property
    def normal(self) -> np.ndarray:
        return np.asarray(self.n, dtype=np.float64)


def project(K: Intrinsics, pose: Pose, X) -> tuple[np.ndarray, float]:
    """Project a world point; raises BehindCameraError if z <= 0."""
    Xc = pose.apply(np.asarray(X, dtype=np.float64))
    z = float(Xc[2])
    if not z > 0:
        raise BehindCameraError(f"point has camera depth {z}")
    return np.array([K.fx * Xc[0] / z + K.cx, K.fy * Xc[1] / z + K.cy]), z


def project_points(K: Intrinsics, pose: Pose, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; returns pixels (..., 2) and depths (...). No culling."""
    Xc = pose.apply(X)
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[..., 0] / z + K.cx
        v = K.fy * Xc[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def backproject_camera(K: Intrinsics, pixel, z) -> np.ndarray:
    pixel = np.asarray(pixel, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)):
        raise BehindCameraError("back-projection needs positive depth")
    x = (pixel[..., 0] - K.cx) / K.fx * z
    y = (pixel[..., 1] - K.cy) / K.fy * z
    return np.stack([x, y, z * np.ones_like(x)], axis=-1)


def backproject(K: Intrinsics, pixel, z, pose: Pose) -> np.ndarray:
    """World point ``W^T (z K^-1 p~ - t)``; works on arrays of pixels."""
    Xc = backproject_camera(K, pixel, z)
    return (Xc - pose.t) @ pose.W


def relative_transform(ref: Pose, src: Pose) -> RelativePose:
    W_rel = src.W @ ref.W.T
    t_rel = src.t - W_rel @ ref.t
    return RelativePose(W_rel, t_rel)


def homography(
    K: Intrinsics, rel: RelativePose, plane: PlaneHypothesis, K_src: Intrinsics | None = None
) -> np.ndarray:
    """Plane-induced homography from the reference image to the neighbor image.

    This is ``K (W_rel - t_rel m^T / d) K^-1`` with ``m = -n`` the camera-facing
    normal of the plane, i.e. ``K (W_rel + t_rel n^T / d) K^-1``.
    """
    if not plane.d > 0:
        raise ValueError("plane distance must be positive")
    K_dst = K if K_src is None else K_src
    n = plane.normal
    facing = -n
    return K_dst.K @ (rel.W_rel - np.outer(rel.t_rel, facing) / plane.d) @ K.K_inv


def warp_pixel(H: np.ndarray, pixel) -> np.ndarray | None:
    """Apply a homography to one pixel; ``None`` when the warp is degenerate."""
    q = H @ np.array([pixel[0], pixel[1], 1.0])
    if abs(q[2]) < HOMOGENEOUS_EPS:
        return None
    return q[:2] / q[2]


def quat_to_rotmat(q) -> np.ndarray:
    """(w, x, y, z) quaternion(s) to rotation matrices; normalises first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to a (w, x, y, z) quaternion with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q
