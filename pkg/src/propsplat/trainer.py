"""Optimisation loop: photometric + planar losses, clone/split, propagation growth."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels
from .densify import DensifyConfig, FilterConfig, clone_split_prune, geometric_filter, \
    select_growth_pixels, spawn_gaussians
from .gaussians import FIELDS, GaussianCloud
from .losses import LossWeights, l1_dssim, normal_loss, psnr, scale_loss, ssim
from .propagation import PropagationConfig, propagate, select_neighbor_views
from .renderer import ALPHA_EPS, render, render_backward
from .scene_io import scene_extent, write_pfm, write_ply

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    def __init__(self, message, iteration, view_id, dump_dir=None):
        super().__init__(message)
        self.iteration = iteration
        self.view_id = view_id
        self.dump_dir = dump_dir


@dataclass
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    # gradient-driven densification
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15000
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    # propagation-driven growth
    use_propagation: bool = True
    propagation_interval: int = 50
    propagation_iters: int = 3
    propagation_start: int = 500
    propagation_end: int = 15000
    propagation_group: int = 3  # current view plus its nearest training views
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    sigma: float = 0.8
    spawn_stride: int = 2
    # losses
    use_planar: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    # Adam
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_colors: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_quats: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    # bookkeeping
    holdout_every: int = 8
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    max_gaussians: int = 50000
    backend: str | None = None
    num_threads: int | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.propagation_interval < 1 or self.densify_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.propagation_group < 2:
            raise ValueError("propagation_group must be >= 2 for the geometric filter")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.propagation.num_iterations != self.propagation_iters:
            self.propagation = PropagationConfig(**{
                **asdict(self.propagation), "num_iterations": self.propagation_iters,
            })

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        nested = {"densify": DensifyConfig, "propagation": PropagationConfig,
                  "filter": FilterConfig, "weights": LossWeights}
        for key, typ in nested.items():
            if key in data and isinstance(data[key], dict):
                val = data[key]
                if "phases" in val:
                    val = {**val, "phases": tuple(val["phases"])}
                data[key] = typ(**val)
        if "adam_betas" in data:
            data["adam_betas"] = tuple(data["adam_betas"])
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def control(self) -> "TrainConfig":
        """The same schedule with propagation and planar losses switched off."""
        return TrainConfig(**{**self.__dict__, "use_propagation": False, "use_planar": False})

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Per-field Adam whose state follows the cloud through densification."""

    def __init__(self, cloud: GaussianCloud, lrs: dict, betas=(0.9, 0.999), eps=1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {f: np.zeros_like(getattr(cloud, f)) for f in FIELDS}
        self.v = {f: np.zeros_like(getattr(cloud, f)) for f in FIELDS}
        self.steps = {f: np.zeros(len(cloud), dtype=np.int64) for f in FIELDS}

    def step(self, cloud: GaussianCloud, grads: dict) -> None:
        for f in FIELDS:
            g = grads[f]
            m, v = self.m[f], self.v[f]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            self.steps[f] += 1
            t = self.steps[f].reshape((-1,) + (1,) * (g.ndim - 1))
            mhat = m / (1 - self.b1**t)
            vhat = v / (1 - self.b2**t)
            p = getattr(cloud, f)
            p -= self.lrs[f] * mhat / (np.sqrt(vhat) + self.eps)

    def remap(self, origin: np.ndarray) -> None:
        """Reorder state to a new cloud; ``origin[k] < 0`` marks a fresh Gaussian."""
        src = np.maximum(origin, 0)
        fresh = origin < 0
        for f in FIELDS:
            for store in (self.m, self.v):
                a = store[f][src] if len(store[f]) else np.zeros((len(origin),) + store[f].shape[1:])
                a[fresh] = 0.0
                store[f] = a
            s = self.steps[f][src] if len(self.steps[f]) else np.zeros(len(origin), dtype=np.int64)
            s[fresh] = 0
            self.steps[f] = s

    def grow(self, count: int) -> None:
        n = len(self.steps[FIELDS[0]])
        self.remap(np.concatenate([np.arange(n), -np.ones(count, dtype=np.int64)]))


def split_views(views, holdout_every: int = 8):
    """Every ``holdout_every``-th view (starting with the first) is held out."""
    if holdout_every and holdout_every > 0 and len(views) > 2:
        test = [v for i, v in enumerate(views) if i % holdout_every == 0]
        train = [v for i, v in enumerate(views) if i % holdout_every != 0]
    else:
        train, test = list(views), []
    return train, test


def means_lr(cfg: TrainConfig, it: int, extent: float) -> float:
    """Log-linear decay of the position learning rate over the run."""
    t = min(max((it - 1) / max(cfg.iterations - 1, 1), 0.0), 1.0)
    lr = math.exp((1 - t) * math.log(cfg.lr_means) + t * math.log(cfg.lr_means_final))
    return lr * extent


def evaluate(views, cloud: GaussianCloud, backend=None, num_threads=None) -> dict:
    if not views:
        return {"psnr": float("nan"), "ssim": float("nan"), "per_view": []}
    per = []
    for v in views:
        maps = render(v, cloud, backend=backend, num_threads=num_threads)
        per.append({"id": v.id, "psnr": psnr(maps.color, v.image), "ssim": ssim(maps.color, v.image)})
    return {
        "psnr": float(np.mean([p["psnr"] for p in per])),
        "ssim": float(np.mean([p["ssim"] for p in per])),
        "per_view": per,
    }


@dataclass
class TrainResult:
    cloud: GaussianCloud
    log: list
    report: dict


class _PlanarCache:
    """Latest filtered normals and valid sets per training view."""

    def __init__(self):
        self.normal = {}
        self.valid = {}

    def get(self, vid):
        return self.normal.get(vid), self.valid.get(vid)


def _propagation_step(cfg, train_views, view, cloud, cache, adam, rng, debug_dir=None, it=0):
    group = [view] + select_neighbor_views(view, train_views, cfg.propagation_group - 1)
    rendered, propagated = [], []
    for g in group:
        maps = render(g, cloud, backend=cfg.backend, num_threads=cfg.num_threads)
        nbrs = select_neighbor_views(g, train_views, cfg.propagation.num_neighbor_views)
        rendered.append(maps)
        propagated.append(
            propagate(g, nbrs, maps, cfg.propagation, backend=cfg.backend, num_threads=cfg.num_threads)
        )
    idx = list(range(len(group)))
    filtered = geometric_filter(group, propagated, cfg.filter, neighbors=[idx] * len(group))
    for g, f in zip(group, filtered):
        cache.normal[g.id] = f.normal
        cache.valid[g.id] = f.valid
    mask = select_growth_pixels(filtered[0].depth, rendered[0].depth, cfg.sigma,
                                rendered_alpha=rendered[0].alpha, valid=filtered[0].valid)
    room = cfg.max_gaussians - len(cloud)
    if room <= 0:
        return 0, int(filtered[0].valid.sum())
    if mask.sum() > 0:
        sub = np.zeros_like(mask)
        sub[:: cfg.spawn_stride, :: cfg.spawn_stride] = True
        ys, xs = np.nonzero(mask & sub)
        if len(ys) > room:
            keep = np.sort(rng.choice(len(ys), room, replace=False))
            mask = np.zeros_like(mask)
            mask[ys[keep], xs[keep]] = True
    n_before = len(cloud)
    added = spawn_gaussians(mask, filtered[0], view, cloud, stride=cfg.spawn_stride)
    if added:
        adam.grow(added)
    if debug_dir is not None:
        debug_dir.mkdir(parents=True, exist_ok=True)
        write_pfm(debug_dir / f"iter{it:06d}_view{view.id}_growth.pfm", mask.astype(np.float64))
        write_ply(debug_dir / f"iter{it:06d}_view{view.id}_spawned.ply",
                  cloud.select(np.arange(n_before, len(cloud))), view.pose.center)
    return added, int(filtered[0].valid.sum())


def _dump_abort(out_dir, it, view, cloud, message):
    if out_dir is None:
        return None
    d = Path(out_dir) / "abort"
    d.mkdir(parents=True, exist_ok=True)
    finite = np.all(np.isfinite(cloud.means), axis=1)
    with open(d / "diagnostic.json", "w") as fh:
        json.dump({"iteration": it, "view_id": view.id, "message": message,
                   "gaussians": len(cloud), "non_finite_means": int((~finite).sum())}, fh, indent=2)
    np.savez(d / "cloud.npz", **cloud.params())
    return d


def train(views, cloud: GaussianCloud, cfg: TrainConfig = TrainConfig(), out_dir=None,
          test_views=None, progress=None, debug_dir=None) -> TrainResult:
    """Optimise ``cloud`` against ``views``.

    When ``test_views`` is None every ``cfg.holdout_every``-th view is held out.
    The cloud is copied, never modified in place. With ``debug_dir`` every
    propagation step also writes its growth mask (PFM) and spawned points (PLY).
    """
    start = time.perf_counter()
    if test_views is None:
        train_views, test_views = split_views(views, cfg.holdout_every)
    else:
        train_views = list(views)
    if len(train_views) < 2:
        raise ValueError("training needs at least two views")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    cloud = cloud.copy()
    cloud.reset_grad_stats()
    extent = scene_extent(train_views)
    lrs = {"means": cfg.lr_means * extent, "quats": cfg.lr_quats, "log_scales": cfg.lr_scales,
           "opacity_raw": cfg.lr_opacity, "colors": cfg.lr_colors}
    adam = Adam(cloud, lrs, cfg.adam_betas, cfg.adam_eps)
    cache = _PlanarCache()
    w = cfg.weights
    metrics = []
    order = []
    # the planar terms switch on with the first propagation (or at its scheduled
    # start when propagation is disabled)
    planar_on = False

    for it in range(1, cfg.iterations + 1):
        if not order:
            order = list(rng.permutation(len(train_views)))
        view = train_views[order.pop()]
        adam.lrs["means"] = means_lr(cfg, it, extent)

        maps = render(view, cloud, backend=cfg.backend, num_threads=cfg.num_threads)
        l_photo, d_color = l1_dssim(maps.color, view.image, w.lam)
        l_norm, l_scale = 0.0, 0.0
        d_normal = None
        d_logs = None
        if not cfg.use_propagation and it >= cfg.propagation_start:
            planar_on = True
        if cfg.use_planar and planar_on:
            nbar, q = cache.get(view.id)
            if nbar is not None:
                q = q & (maps.alpha > ALPHA_EPS) & (np.linalg.norm(maps.normal, axis=-1) > 0)
                l_norm, g = normal_loss(maps.normal, nbar, q)
                d_normal = w.beta * g
            l_scale, g = scale_loss(cloud)
            d_logs = w.gamma * g
        total = l_photo + w.beta * l_norm + w.gamma * l_scale
        if not math.isfinite(total):
            msg = f"non-finite loss {total} at iteration {it}, view {view.id}"
            raise NumericalAbort(msg, it, view.id, _dump_abort(out, it, view, cloud, msg))

        grads = render_backward(maps, cloud, d_color=d_color, d_normal=d_normal,
                                num_threads=cfg.num_threads)
        gd = grads.as_dict()
        if d_logs is not None:
            gd["log_scales"] = gd["log_scales"] + d_logs
        if not all(np.all(np.isfinite(g)) for g in gd.values()):
            msg = f"non-finite gradient at iteration {it}, view {view.id}"
            raise NumericalAbort(msg, it, view.id, _dump_abort(out, it, view, cloud, msg))
        if it <= cfg.densify_until:
            cloud.grad_accum += grads.screen
            cloud.grad_count += grads.visible
        adam.step(cloud, gd)
        np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)

        entry = {"iter": it, "view": int(view.id), "loss": total, "photo": l_photo,
                 "normal": l_norm, "scale": l_scale}

        if (cfg.densify_from <= it <= cfg.densify_until and it % cfg.densify_interval == 0
                and it < cfg.iterations):
            cloud, origin = clone_split_prune(cloud, extent, rng, cfg.densify, return_origin=True,
                                              max_gaussians=cfg.max_gaussians)
            adam.remap(origin)
            entry["densified"] = len(cloud)

        if (cfg.use_propagation and cfg.propagation_start <= it <= cfg.propagation_end
                and it % cfg.propagation_interval == 0 and it < cfg.iterations):
            added, nvalid = _propagation_step(cfg, train_views, view, cloud, cache, adam, rng,
                                              Path(debug_dir) if debug_dir else None, it)
            entry["spawned"] = added
            entry["filtered_valid"] = nvalid
            planar_on = True

        entry["gaussians"] = len(cloud)
        if cfg.eval_interval and (it % cfg.eval_interval == 0 or it == cfg.iterations) and test_views:
            ev = evaluate(test_views, cloud, cfg.backend, cfg.num_threads)
            entry["test_psnr"] = ev["psnr"]
        metrics.append(entry)
        if progress is not None:
            progress(entry)

        if out is not None and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            write_ply(out / f"checkpoint_{it:06d}.ply", cloud)

    ev = evaluate(test_views if test_views else train_views, cloud, cfg.backend, cfg.num_threads)
    report = {
        "psnr": ev["psnr"],
        "ssim": ev["ssim"],
        "gaussian_count": len(cloud),
        "wall_time": time.perf_counter() - start,
        "eval_split": "test" if test_views else "train",
        "per_view": ev["per_view"],
        "backend": kernels.get(cfg.backend).__name__.rsplit(".", 1)[-1],
    }
    if out is not None:
        with open(out / "metrics.jsonl", "w") as fh:
            for m in metrics:
                fh.write(json.dumps(m) + "\n")
        with open(out / "report.json", "w") as fh:
            json.dump(report, fh, indent=2)
        write_ply(out / "final.ply", cloud)
    return TrainResult(cloud, metrics, report)
