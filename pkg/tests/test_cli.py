import json
import subprocess
import sys

import numpy as np
import pytest

from propsplat.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from propsplat.scene_io import read_pfm, write_ply

SPEC = {
    "image": {"width": 48, "height": 36},
    "planes": [
        {"normal": [0, 0, 1], "d": 0.0, "texture": {"type": "value-noise", "seed": 1, "cell": 0.2}},
        {"normal": [0, -1, 0], "d": -1.5, "texture": {"type": "checker", "cell": 0.3}},
    ],
    "cameras": {"count": 4, "radius": 4.0, "height": 1.5, "look_at": [0, 0.5, 0.5],
                "arc_degrees": 30},
    "sparse_points": {"count": 60},
    "seed": 0,
}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(SPEC))
    assert main(["synth", str(d / "spec.json"), str(d / "scene")]) == EXIT_OK
    return d


def test_smoke_path(scene_dir, capsys):
    d = scene_dir
    cfg = {"iterations": 30, "densify_from": 10, "densify_interval": 10,
           "propagation_start": 10, "propagation_interval": 10, "eval_interval": 15}
    (d / "train.json").write_text(json.dumps(cfg))
    capsys.readouterr()
    rc = main(["train", str(d / "scene"), "--config", str(d / "train.json"), "--out",
               str(d / "run"), "--seed", "1"])
    assert rc == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert {"psnr", "ssim", "gaussian_count", "wall_time"} <= set(summary)
    assert json.loads((d / "run" / "config.json").read_text())["seed"] == 1

    rc = main(["render", str(d / "run" / "final.ply"), str(d / "scene"), "--out", str(d / "r")])
    assert rc == EXIT_OK
    for stem in ("0001", "0004"):
        for suffix in (".ppm", "_depth.pfm", "_normal.pfm", "_alpha.pfm"):
            assert (d / "r" / f"{stem}{suffix}").is_file()

    rc = main(["propagate", str(d / "scene"), str(d / "r"), "--iters", "1", "--view", "2",
               "--out", str(d / "p")])
    assert rc == EXIT_OK
    score = read_pfm(d / "p" / "0002_score.pfm")
    assert score.shape == (36, 48) and score.max() <= 1.0 + 1e-6

    capsys.readouterr()
    rc = main(["eval", str(d / "r"), str(d / "scene" / "images"), "--out", str(d / "e.json")])
    assert rc == EXIT_OK
    res = json.loads((d / "e.json").read_text())
    assert len(res["images"]) == 4 and 0 < res["mean_psnr"] < 100


def test_eval_against_itself(scene_dir, capsys):
    imgs = scene_dir / "scene" / "images"
    capsys.readouterr()
    assert main(["eval", str(imgs), str(imgs)]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["mean_psnr"] == 100.0 and res["mean_ssim"] == pytest.approx(1.0)


def test_missing_config_is_data_error(scene_dir, capsys):
    rc = main(["train", str(scene_dir / "scene"), "--config", "nope.json", "--out",
               str(scene_dir / "x")])
    assert rc == EXIT_DATA
    assert "nope.json" in capsys.readouterr().err


def test_bad_config_key_is_data_error(scene_dir, capsys):
    (scene_dir / "bad.json").write_text('{"iterations": 5, "learning": 1}')
    rc = main(["train", str(scene_dir / "scene"), "--config", str(scene_dir / "bad.json"),
               "--out", str(scene_dir / "x")])
    assert rc == EXIT_DATA and "learning" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train"], ["eval", "a"],
                                  ["propagate", "s", "m", "--iters", "x"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_missing_scene_and_view(scene_dir, tmp_path, capsys):
    assert main(["render", "c.ply", str(tmp_path / "none")]) == EXIT_DATA
    assert main(["render", str(tmp_path / "c.ply"), str(scene_dir / "scene")]) == EXIT_DATA
    from propsplat.gaussians import GaussianCloud

    write_ply(tmp_path / "e.ply", GaussianCloud.empty())
    assert main(["render", str(tmp_path / "e.ply"), str(scene_dir / "scene"), "--view", "99",
                 "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["eval", str(tmp_path), str(tmp_path)]) == EXIT_DATA


def test_numerical_abort_exit_code(scene_dir, tmp_path, capsys):
    from propsplat.scene_io import load_colmap, init_cloud_from_points

    _, pts = load_colmap(scene_dir / "scene", load_images=False)
    cloud = init_cloud_from_points(pts.xyz, pts.rgb)
    cloud.colors[:] = np.nan
    write_ply(tmp_path / "nan.ply", cloud)
    rc = main(["train", str(scene_dir / "scene"), "--init", str(tmp_path / "nan.ply"),
               "--iterations", "3", "--out", str(tmp_path / "run")])
    assert rc == EXIT_NUMERIC
    assert "numerical abort" in capsys.readouterr().err
    assert (tmp_path / "run" / "abort" / "diagnostic.json").is_file()


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "propsplat.cli", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "synth" in r.stdout
