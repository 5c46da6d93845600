"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 bad or missing input data,
3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

log = logging.getLogger("propsplat")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None


def _load_scene(path):
    from .scene_io import load_colmap

    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{p}: scene directory not found")
    return load_colmap(p)


def _find_view(views, view_id):
    for v in views:
        if v.id == view_id:
            return v
    raise DataError(f"no view with id {view_id} (have {[v.id for v in views]})")


def cmd_synth(args):
    from .synthetic import SyntheticSceneSpec, export_scene, generate_synthetic

    try:
        spec = SyntheticSceneSpec.from_dict(_read_json(args.spec))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{args.spec}: bad scene spec ({e})") from None
    scene = generate_synthetic(spec)
    export_scene(scene, args.out)
    print(json.dumps({"views": len(scene.views), "points": len(scene.points), "out": str(args.out)}))


def cmd_train(args):
    from .scene_io import init_cloud_from_points, read_ply, scene_extent
    from .trainer import TrainConfig, split_views, train

    cfg_data = _read_json(args.config) if args.config else {}
    if args.iterations is not None:
        cfg_data["iterations"] = args.iterations
    if args.seed is not None:
        cfg_data["seed"] = args.seed
    if args.backend:
        cfg_data["backend"] = args.backend
    if args.threads:
        cfg_data["num_threads"] = args.threads
    try:
        cfg = TrainConfig.from_dict(cfg_data)
    except (TypeError, ValueError) as e:
        raise DataError(f"{args.config}: bad training config ({e})") from None
    views, points = _load_scene(args.scene)
    if args.init:
        cloud = read_ply(args.init)
    else:
        if len(points) == 0:
            raise DataError(f"{args.scene}: points3D.txt has no points to initialise from")
        train_views, _ = split_views(views, cfg.holdout_every)
        cloud = init_cloud_from_points(points.xyz, points.rgb, scene_extent(train_views))

    def progress(entry):
        if "test_psnr" in entry:
            log.info("iter %d  loss %.5f  gaussians %d  test PSNR %.3f",
                     entry["iter"], entry["loss"], entry["gaussians"], entry["test_psnr"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
    result = train(views, cloud, cfg, out_dir=out, progress=progress,
                   debug_dir=out / "debug" if args.debug else None)
    summary = {k: v for k, v in result.report.items() if k != "per_view"}
    print(json.dumps(summary))


def _write_maps(out: Path, stem: str, maps):
    from .scene_io import write_pfm, write_ppm

    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / f"{stem}.ppm", np.clip(maps.color, 0.0, 1.0))
    write_pfm(out / f"{stem}_depth.pfm", maps.depth)
    write_pfm(out / f"{stem}_normal.pfm", maps.normal)
    write_pfm(out / f"{stem}_alpha.pfm", maps.alpha)


def cmd_render(args):
    from .renderer import render
    from .scene_io import read_ply

    views, _ = _load_scene(args.scene)
    if not Path(args.cloud).is_file():
        raise DataError(f"{args.cloud}: file not found")
    cloud = read_ply(args.cloud)
    chosen = [_find_view(views, args.view)] if args.view is not None else views
    out = Path(args.out)
    for v in chosen:
        maps = render(v, cloud, backend=args.backend, num_threads=args.threads)
        _write_maps(out, Path(v.name).stem or f"{v.id:04d}", maps)
    print(json.dumps({"rendered": [v.id for v in chosen], "out": str(out)}))


def cmd_propagate(args):
    from .densify import FilterConfig, geometric_filter
    from .propagation import PropagationConfig, propagate, select_neighbor_views
    from .renderer import GeoMaps
    from .scene_io import read_pfm, write_pfm

    views, _ = _load_scene(args.scene)
    maps_dir = Path(args.maps)
    if not maps_dir.is_dir():
        raise DataError(f"{maps_dir}: maps directory not found")
    cfg = PropagationConfig(num_iterations=args.iters)
    chosen = [_find_view(views, args.view)] if args.view is not None else views
    done, results = [], []
    for v in chosen:
        stem = Path(v.name).stem
        paths = [maps_dir / f"{stem}_{k}.pfm" for k in ("depth", "normal")]
        if not all(p.is_file() for p in paths):
            if args.view is not None:
                raise DataError(f"{paths[0]}: rendered maps missing for view {v.id}")
            continue
        depth, normal = (read_pfm(p) for p in paths)
        alpha_path = maps_dir / f"{stem}_alpha.pfm"
        alpha = read_pfm(alpha_path) if alpha_path.is_file() else (depth > 0).astype(np.float64)
        rendered = GeoMaps(np.zeros(depth.shape + (3,)), depth, normal, alpha)
        nbrs = select_neighbor_views(v, views, cfg.num_neighbor_views)
        results.append(propagate(v, nbrs, rendered, cfg, backend=args.backend, num_threads=args.threads))
        done.append(v)
    if not done:
        raise DataError(f"{maps_dir}: no rendered depth/normal maps matching the scene's images")
    if args.filter and len(done) > 1:
        results = geometric_filter(done, results, FilterConfig())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v, r in zip(done, results):
        stem = Path(v.name).stem
        write_pfm(out / f"{stem}_depth.pfm", r.depth)
        write_pfm(out / f"{stem}_normal.pfm", r.normal)
        write_pfm(out / f"{stem}_score.pfm", r.score)
    print(json.dumps({
        "propagated": [v.id for v in done],
        "valid_fraction": [float(r.valid.mean()) for r in results],
        "out": str(out),
    }))


def cmd_eval(args):
    from .losses import psnr, ssim
    from .scene_io import list_images, read_image

    a, b = Path(args.dir_a), Path(args.dir_b)
    for d in (a, b):
        if not d.is_dir():
            raise DataError(f"{d}: directory not found")
    names = list_images(a)
    if not names:
        raise DataError(f"{a}: no .ppm images")
    per = []
    for name in names:
        if not (b / name).is_file():
            raise DataError(f"{b / name}: no counterpart for {a / name}")
        x, y = read_image(a / name), read_image(b / name)
        if x.shape != y.shape:
            raise DataError(f"{name}: size {x.shape} vs {y.shape}")
        per.append({"image": name, "psnr": psnr(x, y), "ssim": ssim(x, y)})
    result = {
        "mean_psnr": float(np.mean([p["psnr"] for p in per])),
        "mean_ssim": float(np.mean([p["ssim"] for p in per])),
        "images": per,
    }
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="propsplat", description="Gaussian splatting with plane propagation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def kernel_opts(sp):
        sp.add_argument("--backend", choices=kernels.available_backends(), default=None)
        sp.add_argument("--threads", type=int, default=None)

    s = sub.add_parser("synth", help="generate a synthetic plane scene")
    s.add_argument("spec", help="scene spec JSON")
    s.add_argument("out", help="output scene directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="optimise a cloud on a COLMAP scene")
    s.add_argument("scene")
    s.add_argument("--config", help="training config JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="start from this PLY instead of the sparse points")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--debug", action="store_true", help="dump growth masks and spawned points")
    kernel_opts(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render a PLY cloud into the scene's views")
    s.add_argument("cloud")
    s.add_argument("scene")
    s.add_argument("--view", type=int, help="image id (default: all)")
    s.add_argument("--out", default="renders")
    kernel_opts(s)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("propagate", help="propagate rendered depth/normal maps")
    s.add_argument("scene")
    s.add_argument("maps", help="directory with <stem>_depth.pfm and <stem>_normal.pfm")
    s.add_argument("--iters", type=int, default=3)
    s.add_argument("--view", type=int)
    s.add_argument("--filter", action="store_true", help="apply the multi-view geometric filter")
    s.add_argument("--out", default="propagated")
    kernel_opts(s)
    s.set_defaults(func=cmd_propagate)

    s = sub.add_parser("eval", help="PSNR/SSIM between two image directories")
    s.add_argument("dir_a")
    s.add_argument("dir_b")
    s.add_argument("--out", help="also write the JSON here")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    from .scene_io import SceneFormatError
    from .trainer import NumericalAbort

    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s", stream=sys.stderr,
    )
    try:
        args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as e:
        where = f"; dump in {e.dump_dir}" if e.dump_dir else ""
        print(f"numerical abort: {e}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SceneFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
