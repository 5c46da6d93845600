import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from propsplat.camera import (
    BehindCameraError, Intrinsics, PlaneHypothesis, Pose, backproject, homography, project,
    project_points, quat_to_rotmat, relative_transform, rotmat_to_quat, warp_pixel,
)

import oracles

K = Intrinsics(500.0, 480.0, 320.0, 240.0, 640, 480)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(-1.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 10.0, 1.0, 4, 4)
    assert np.allclose(K.K @ K.K_inv, np.eye(3))


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(2 * np.eye(3), np.zeros(3))


def test_pose_arrays_are_read_only():
    p = Pose.identity()
    with pytest.raises(ValueError):
        p.t[0] = 1.0


def test_project_principal_point():
    uv, z = project(K, Pose.identity(), [0.0, 0.0, 3.0])
    assert np.allclose(uv, [K.cx, K.cy]) and z == 3.0


def test_project_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project(K, Pose.identity(), [0.0, 0.0, -1.0])
    with pytest.raises(BehindCameraError):
        project(K, Pose.identity(), [1.0, 0.0, 0.0])


def test_look_at_puts_world_up_toward_image_top():
    pose = Pose.look_at([0, -5, 1], [0, 0, 1])
    above, _ = project(K, pose, [0, 0, 2])
    below, _ = project(K, pose, [0, 0, 0])
    assert above[1] < K.cy < below[1]


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 639), st.floats(0, 479), st.floats(0.05, 100), st.integers(0, 2**31))
def test_project_backproject_round_trip(x, y, z, seed):
    pose = oracles.random_pose(np.random.default_rng(seed))
    X = backproject(K, (x, y), z, pose)
    uv, depth = project(K, pose, X)
    assert np.allclose(uv, [x, y], atol=1e-9) and abs(depth - z) < 1e-9 * max(1, z)


def test_project_points_matches_scalar(rng):
    pose = oracles.random_pose(rng)
    X = pose.center + rng.normal(size=(20, 3)) + 5 * pose.W[2]
    uv, z = project_points(K, pose, X)
    for i in range(20):
        u1, z1 = project(K, pose, X[i])
        assert np.allclose(uv[i], u1) and np.isclose(z[i], z1)


def test_relative_transform_identity_cases(rng):
    p = oracles.random_pose(rng)
    rel = relative_transform(p, p)
    assert np.allclose(rel.W_rel, np.eye(3), atol=1e-14) and np.allclose(rel.t_rel, 0, atol=1e-14)
    rel = relative_transform(Pose.identity(), p)
    assert np.allclose(rel.W_rel, p.W) and np.allclose(rel.t_rel, p.t)


def test_relative_transform_composes(rng):
    ref, src = oracles.random_pose(rng), oracles.random_pose(rng)
    rel = relative_transform(ref, src)
    X = rng.normal(size=(50, 3))
    assert np.abs(rel.apply(ref.apply(X)) - src.apply(X)).max() < 1e-10


def test_homography_identity_relative_pose():
    rel = relative_transform(Pose.identity(), Pose.identity())
    H = homography(K, rel, PlaneHypothesis((0.0, 0.6, 0.8), 3.0))
    assert np.allclose(H, np.eye(3))


def test_homography_sideways_translation_shift():
    # camera moved by +tx in world x: a point on a fronto-parallel plane at depth d
    # lands fx*tx/d pixels further right in the source image
    d, tx = 4.0, 0.5
    src = Pose(np.eye(3), [-tx, 0.0, 0.0])
    rel = relative_transform(Pose.identity(), src)
    H = homography(K, rel, PlaneHypothesis((0.0, 0.0, 1.0), d))
    p = np.array([100.0, 50.0])
    q = warp_pixel(H, p)
    oracle, _, _ = oracles.ray_plane_warp(K, K, Pose.identity(), src, np.array([0, 0, 1.0]), d, p)
    assert np.allclose(q, oracle, atol=1e-9)
    assert np.isclose(q[0] - p[0], -K.fx * tx / d) and np.isclose(q[1], p[1])


def test_homography_rejects_nonpositive_distance():
    rel = relative_transform(Pose.identity(), Pose.identity())
    with pytest.raises(ValueError):
        homography(K, rel, PlaneHypothesis((0.0, 0.0, 1.0), 0.0))


def test_warp_pixel_degenerate_returns_none():
    H = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 0.0]])
    assert warp_pixel(H, (0.0, 0.0)) is None


def test_quaternion_conversions(rng):
    for _ in range(20):
        q = rng.normal(size=4)
        R = quat_to_rotmat(q)
        assert np.allclose(R, oracles.quat_matrix(q), atol=1e-12)
        assert np.allclose(quat_to_rotmat(-q), R)
        q2 = rotmat_to_quat(R)
        assert q2[0] >= 0 and np.allclose(quat_to_rotmat(q2), R, atol=1e-12)
    batch = rng.normal(size=(5, 4))
    assert quat_to_rotmat(batch).shape == (5, 3, 3)
