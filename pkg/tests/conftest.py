import numpy as np
import pytest

from propsplat.camera import Intrinsics, Pose
from propsplat.gaussians import GaussianCloud, logit
from propsplat.scene_io import init_cloud_from_points, scene_extent
from propsplat.synthetic import SyntheticSceneSpec, generate_synthetic

import oracles


def make_cloud(rng, n, K: Intrinsics, pose: Pose, depth=(2.0, 6.0), scale=(0.08, 0.4),
               opacity=(0.2, 0.9)) -> GaussianCloud:
    """Random Gaussians whose centers project inside the image of ``pose``."""
    z = rng.uniform(*depth, n)
    px = rng.uniform(0, K.width - 1, n)
    py = rng.uniform(0, K.height - 1, n)
    Xc = np.stack([(px - K.cx) / K.fx * z, (py - K.cy) / K.fy * z, z], axis=1)
    means = (Xc - pose.t) @ pose.W
    return GaussianCloud(
        means,
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(*scale, (n, 3))),
        logit(rng.uniform(*opacity, n)),
        rng.uniform(0, 1, (n, 3)),
    )


def small_view(width=32, height=32, f=40.0, pose=None):
    K = Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)
    return oracles.view(K, pose if pose is not None else Pose.identity())


def jittered_views(rng, count=3, **kw):
    """A few views around the identity camera, all looking roughly down +z."""
    out = [small_view(**kw)]
    for _ in range(count - 1):
        ang = rng.normal(scale=0.08, size=3)
        th = np.linalg.norm(ang)
        k = ang / th
        Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        R = np.eye(3) + np.sin(th) * Kx + (1 - np.cos(th)) * Kx @ Kx
        out.append(small_view(pose=Pose(R, rng.normal(scale=0.3, size=3)), **kw))
    return out


PLANE_TEXTURE = {"type": "value-noise", "seed": 3, "cell": 0.15, "amplitude": 0.45,
                 "base": [0.6, 0.55, 0.5]}


def single_plane_spec(**overrides) -> SyntheticSceneSpec:
    data = {
        "image": {"width": 64, "height": 48},
        "planes": [{"normal": [0, -1, 0], "d": -1.0, "texture": PLANE_TEXTURE}],
        "cameras": {"count": 3, "radius": 4.0, "height": 0.5, "look_at": [0, 1, 0.5],
                    "arc_degrees": 20},
        "seed": 0,
    }
    data.update(overrides)
    return SyntheticSceneSpec.from_dict(data)


def two_plane_spec(width=160, height=120, count=5, seed=0) -> SyntheticSceneSpec:
    return SyntheticSceneSpec.from_dict({
        "image": {"width": width, "height": height},
        "planes": [
            {"normal": [0, 0, 1], "d": 0.0,
             "texture": {"type": "value-noise", "seed": 1, "cell": 0.15, "amplitude": 0.45,
                         "base": [0.6, 0.55, 0.5]}},
            {"normal": [0, -1, 0], "d": -1.5,
             "texture": {"type": "value-noise", "seed": 2, "cell": 0.15, "amplitude": 0.45,
                         "base": [0.5, 0.6, 0.7]}},
        ],
        "cameras": {"count": count, "radius": 4.0, "height": 1.5, "look_at": [0, 0.5, 0.5],
                    "arc_degrees": 30},
        "seed": seed,
    })


@pytest.fixture(scope="session")
def plane_scene():
    return generate_synthetic(single_plane_spec())


@pytest.fixture(scope="session")
def two_plane_scene():
    return generate_synthetic(two_plane_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_training_scene():
    """Five 64x48 views of the two-plane scene with a 120-point sparse init."""
    spec = two_plane_spec(width=64, height=48, count=5, seed=0)
    spec.sparse_points = 120
    scene = generate_synthetic(spec)
    extent = scene_extent(scene.views)
    return scene, init_cloud_from_points(scene.points.xyz, scene.points.rgb, extent)


_ACCEPTANCE = []


@pytest.fixture
def record():
    """Log one acceptance line; the list is printed in the terminal summary."""
    def _record(name, ok, detail):
        _ACCEPTANCE.append((name, bool(ok), detail))
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
