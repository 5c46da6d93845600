"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--gaussians N]

Prints one line per kernel with the best wall time of each backend and the
speedup. Both backends run on identical inputs.
"""

import argparse
import time

import numpy as np

from propsplat import kernels
from propsplat.camera import backproject
from propsplat.gaussians import GaussianCloud
from propsplat.propagation import PropagationConfig, planes_from_maps, propagate_grid
from propsplat.renderer import render, render_backward
from propsplat.synthetic import SyntheticSceneSpec, generate_synthetic


def _scene(width, height):
    spec = SyntheticSceneSpec.from_dict({
        "image": {"width": width, "height": height},
        "planes": [
            {"normal": [0, 0, 1], "d": 0.0, "texture": {"type": "value-noise", "seed": 1}},
            {"normal": [0, -1, 0], "d": -1.5, "texture": {"type": "value-noise", "seed": 2}},
        ],
        "cameras": {"count": 3, "radius": 4.0, "height": 1.5, "look_at": [0, 0.5, 0.5],
                    "arc_degrees": 20},
        "seed": 0,
    })
    return generate_synthetic(spec)


def _cloud(rng, n, view):
    # points on the visible surfaces, so every Gaussian lands in the image
    K = view.intrinsics
    ys = rng.integers(0, K.height, n)
    xs = rng.integers(0, K.width, n)
    X = backproject(K, np.stack([xs, ys], 1).astype(float), view.depth_gt[ys, xs], view.pose)
    return GaussianCloud(
        X,
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(0.01, 0.05, (n, 3))),
        rng.normal(1.0, 1.0, n),
        rng.uniform(0, 1, (n, 3)),
    )


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--gaussians", type=int, default=5000)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--height", type=int, default=96)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")
    scene = _scene(args.width, args.height)
    ref, srcs = scene.views[1], [scene.views[0], scene.views[2]]
    cloud = _cloud(np.random.default_rng(0), args.gaussians, ref)
    rng = np.random.default_rng(1)
    up = [rng.normal(size=(args.height, args.width, c)) for c in (3, 1, 3)]
    noisy = ref.depth_gt * rng.uniform(0.8, 1.2, ref.depth_gt.shape)
    cfg = PropagationConfig(num_iterations=1)

    def fwd(b):
        return lambda: render(ref, cloud, backend=b, num_threads=1)

    def bwd(b):
        maps = render(ref, cloud, backend=b, num_threads=1)
        return lambda: render_backward(maps, cloud, up[0], up[1][..., 0], up[2], num_threads=1)

    def prop(b):
        def run():
            grid = planes_from_maps(noisy, ref.normal_gt, ref.intrinsics)
            propagate_grid(ref, srcs, grid, cfg, backend=b, num_threads=1)
        return run

    print(f"{args.width}x{args.height}, {args.gaussians} Gaussians, best of {args.repeat}")
    for name, make in (("rasterize forward", fwd), ("rasterize backward", bwd),
                       ("propagation sweep", prop)):
        t = {b: _best(make(b), args.repeat) for b in backends}
        line = "  ".join(f"{b} {t[b] * 1e3:9.1f} ms" for b in backends)
        if len(t) == 2:
            line += f"  speedup {t['python'] / t['cython']:6.1f}x"
        print(f"{name:<20} {line}")


if __name__ == "__main__":
    main()
