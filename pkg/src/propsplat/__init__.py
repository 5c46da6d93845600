"""CPU Gaussian splatting with plane-propagation densification and planar losses."""

from .camera import Intrinsics, PlaneHypothesis, Pose, homography, relative_transform
from .gaussians import Gaussian, GaussianCloud
from .kernels import DEFAULT_BACKEND, available_backends
from .renderer import GeoMaps, render, render_backward

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_BACKEND",
    "GeoMaps",
    "Gaussian",
    "GaussianCloud",
    "Intrinsics",
    "PlaneHypothesis",
    "Pose",
    "available_backends",
    "homography",
    "relative_transform",
    "render",
    "render_backward",
]
