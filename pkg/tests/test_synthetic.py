import json

import numpy as np
import pytest

from propsplat.camera import Intrinsics, Pose
from propsplat.scene_io import load_colmap
from propsplat.synthetic import (
    PlaneSpec, SyntheticSceneSpec, export_scene, generate_synthetic, plane_texture, raycast,
)

import oracles
from conftest import two_plane_spec


def test_fronto_parallel_constant_depth():
    K = Intrinsics(50, 50, 19.5, 14.5, 40, 30)
    py, px = np.mgrid[0:30, 0:40].astype(float)
    depth, normal, pid, _ = raycast([PlaneSpec([0, 0, 1], 5.0)], K, Pose.identity(), px, py)
    assert np.array_equal(depth, np.full((30, 40), 5.0))
    assert (pid == 0).all() and np.allclose(normal, [0, 0, -1])


def test_corner_discontinuity_follows_analytic_crease(two_plane_scene):
    spec = two_plane_scene.spec
    v = two_plane_scene.views[2]
    pid = two_plane_scene.plane_ids[2]
    K = v.intrinsics
    for y in range(0, K.height, 7):
        for x in range(0, K.width, 9):
            ts = []
            for pl in spec.planes:
                with np.errstate(divide="ignore", invalid="ignore"):
                    _, s, z = oracles.ray_plane_warp(K, K, v.pose, v.pose, pl.normal, pl.d, (x, y))
                ts.append(z if s > 0 else np.inf)
            want = int(np.argmin(ts)) if np.isfinite(min(ts)) else -1
            assert pid[y, x] == want
            if want >= 0:
                assert abs(v.depth_gt[y, x] - ts[want]) < 1e-9
    assert len(np.unique(pid)) == 2


def test_ground_truth_satisfies_plane_equation(two_plane_scene):
    for v, pid in zip(two_plane_scene.views, two_plane_scene.plane_ids):
        K = v.intrinsics
        hit = pid >= 0
        d_cam = v.depth_gt * np.abs(np.sum(v.normal_gt * K.rays(), axis=-1))
        for i, pl in enumerate(two_plane_scene.spec.planes):
            m = pid == i
            # camera-frame distance of the plane, from world n.X = d
            want = abs(pl.d - pl.normal @ v.pose.center)
            assert np.abs(d_cam[m] - want).max() < 1e-9
        assert np.allclose(np.linalg.norm(v.normal_gt[hit], axis=-1), 1.0)


def test_generation_is_deterministic():
    spec = two_plane_spec(width=40, height=30, count=2)
    spec.noise = 0.02
    spec.sparse_points = 20
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for va, vb in zip(a.views, b.views):
        assert np.array_equal(va.image, vb.image) and np.array_equal(va.depth_gt, vb.depth_gt)
    assert np.array_equal(a.points.xyz, b.points.xyz)


def test_sparse_points_lie_on_planes():
    spec = two_plane_spec(width=40, height=30, count=2)
    spec.sparse_points = 50
    pts = generate_synthetic(spec).points
    assert len(pts) == 50
    resid = np.min([np.abs(pts.xyz @ pl.normal - pl.d) for pl in spec.planes], axis=0)
    assert resid.max() < 1e-9


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSceneSpec(planes=[])
    with pytest.raises(ValueError):
        SyntheticSceneSpec(planes=[{"normal": [0, 0, 1], "d": 0}], camera_count=1)
    with pytest.raises(ValueError):
        PlaneSpec([0, 0, 0], 1.0)
    with pytest.raises(ValueError):
        PlaneSpec([0, 0, 1], 1.0, {"type": "marble"})


def test_camera_seeing_nothing_is_an_error():
    # cameras look along +y at the origin; the only plane is behind them
    spec = SyntheticSceneSpec(planes=[{"normal": [0, 1, 0], "d": -10.0}], camera_height=0.0,
                              arc_degrees=0.0, width=16, height=12, camera_count=2)
    with pytest.raises(ValueError, match="sees no plane"):
        generate_synthetic(spec)


def test_textures():
    X = np.random.default_rng(0).uniform(-1, 1, (100, 3))
    X[:, 2] = 0
    flat = plane_texture(PlaneSpec([0, 0, 1], 0, {"type": "flat", "base": [0.2, 0.3, 0.4]}), X)
    assert np.allclose(flat, [0.2, 0.3, 0.4])
    chk = plane_texture(PlaneSpec([0, 0, 1], 0, {"type": "checker", "cell": 0.25}), X)
    assert len(np.unique(chk[:, 0])) == 2
    vn = plane_texture(PlaneSpec([0, 0, 1], 0, {"type": "value-noise", "seed": 4}), X)
    assert vn.std() > 0.01 and (vn >= 0).all() and (vn <= 1).all()


def test_export_round_trip(tmp_path):
    spec = two_plane_spec(width=24, height=18, count=2)
    spec.sparse_points = 10
    scene = generate_synthetic(spec)
    export_scene(scene, tmp_path)
    views, pts = load_colmap(tmp_path)
    assert len(views) == 2 and len(pts) == 10
    assert np.allclose(views[0].depth_gt, scene.views[0].depth_gt, rtol=1e-6)
    assert np.allclose(views[1].pose.W, scene.views[1].pose.W, atol=1e-12)


def test_spec_from_json(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({
        "image": {"width": 20, "height": 10},
        "planes": [{"normal": [0, 0, 2], "d": 2, "texture": {"type": "checker"}}],
        "cameras": {"count": 3, "radius": 2.0},
        "sparse_points": {"count": 7},
    }))
    spec = SyntheticSceneSpec.from_json(p)
    assert (spec.width, spec.height, spec.camera_count, spec.sparse_points) == (20, 10, 3, 7)
    assert np.allclose(spec.planes[0].normal, [0, 0, 1]) and spec.planes[0].d == 1.0
    assert spec.intrinsics().cx == 9.5
