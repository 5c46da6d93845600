"""3D Gaussian primitives stored as a structure of arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit as _logit

from .camera import Pose, quat_to_rotmat

FIELDS = ("means", "quats", "log_scales", "opacity_raw", "colors")


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def logit(p):
    return _logit(np.asarray(p, dtype=np.float64))


@dataclass(frozen=True)
class Gaussian:
    """A single Gaussian, in the same raw parameterisation as the cloud."""

    mean: np.ndarray
    quat: np.ndarray
    log_scales: np.ndarray
    opacity_raw: float
    color: np.ndarray

    @property
    def scales(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scales, dtype=np.float64))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_raw))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)

    def covariance(self) -> np.ndarray:
        return covariance(self.quat, self.log_scales)

    def view_depth(self, pose: Pose) -> float:
        return float(view_depth(self.mean, pose))

    def shortest_axis_normal(self, camera_center) -> np.ndarray:
        return shortest_axis_normal(self.quat, self.log_scales, self.mean, camera_center)


@dataclass
class GaussianCloud:
    """Learnable Gaussians.

    ``quats`` are (w, x, y, z) and renormalised on use, scales are stored as
    logarithms and opacity as a logit. ``grad_accum``/``grad_count`` collect
    screen-space positional gradient norms between densification events.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_raw: np.ndarray
    colors: np.ndarray
    grad_accum: np.ndarray = field(default=None)
    grad_count: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.means)
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(n, 3)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_raw = np.ascontiguousarray(self.opacity_raw, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n, dtype=np.int64)
        for name in FIELDS + ("grad_accum", "grad_count"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.means[i].copy(),
            self.quats[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_raw[i]),
            self.colors[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            np.array([g.mean for g in gaussians]),
            np.array([g.quat for g in gaussians]),
            np.array([g.log_scales for g in gaussians]),
            np.array([g.opacity_raw for g in gaussians]),
            np.array([g.color for g in gaussians]),
        )

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_activated(cls, means, rotations, scales, opacities, colors) -> "GaussianCloud":
        return cls(
            means,
            rotations,
            np.log(np.asarray(scales, dtype=np.float64)),
            logit(opacities),
            colors,
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            *(getattr(self, f).copy() for f in FIELDS),
            grad_accum=self.grad_accum.copy(),
            grad_count=self.grad_count.copy(),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in FIELDS}

    def select(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            *(getattr(self, f)[idx] for f in FIELDS),
            grad_accum=self.grad_accum[idx],
            grad_count=self.grad_count[idx],
        )

    def extend(self, other: "GaussianCloud") -> None:
        for f in FIELDS + ("grad_accum", "grad_count"):
            setattr(self, f, np.concatenate([getattr(self, f), getattr(other, f)]))

    def reset_grad_stats(self) -> None:
        self.grad_accum = np.zeros(len(self))
        self.grad_count = np.zeros(len(self), dtype=np.int64)


def covariance(quats, log_scales) -> np.ndarray:
    """``R diag(s^2) R^T`` for one Gaussian or a batch."""
    R = quat_to_rotmat(quats)
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)


def view_depth(means, pose: Pose) -> np.ndarray:
    return np.asarray(means, dtype=np.float64) @ pose.W[2] + pose.t[2]


def shortest_axis_index(log_scales) -> np.ndarray:
    # np.argmin returns the first minimum, which is the tie-break we want
    return np.argmin(np.asarray(log_scales), axis=-1)


def shortest_axis_normal(quats, log_scales, means, camera_center) -> np.ndarray:
    """Column of R belonging to the smallest scale, flipped to face the camera.

    Batched over leading dimensions; returns unit world-frame vectors.
    """
    R = quat_to_rotmat(quats)
    r = shortest_axis_index(log_scales)
    n = np.take_along_axis(R, np.asarray(r)[..., None, None], axis=-1)[..., 0]
    sign = shortest_axis_sign(n, means, camera_center)
    return n * sign[..., None]


def shortest_axis_sign(axis, means, camera_center) -> np.ndarray:
    to_cam = np.asarray(camera_center, dtype=np.float64) - np.asarray(means, dtype=np.float64)
    return np.where(np.sum(axis * to_cam, axis=-1) >= 0, 1.0, -1.0)
