"""Central-difference checks of the full loss chain with a discontinuity guard.

The rasteriser is piecewise smooth: a Gaussian entering or leaving a pixel's
3-sigma window, two Gaussians swapping depth order, transmittance crossing the
early-stop threshold, or an L1 term crossing zero all make the loss jump. A
central difference straddling such an event is meaningless, so every probe
compares a structural signature at theta-h and theta+h and skips entries where
it changes. Sign flips inside one loss term only disqualify that term. The
caller asserts that almost all (entry, term) pairs were actually tested.
"""

from dataclasses import dataclass

import numpy as np

from propsplat.gaussians import FIELDS
from propsplat.losses import l1_dssim, normal_loss, scale_loss
from propsplat.renderer import ALPHA_EPS, render, render_backward

STEP = 1e-4
GRAD_FLOOR = 1e-8


@dataclass
class Targets:
    images: list
    normals: list
    masks: list


def make_targets(rng, views):
    imgs, nrm, masks = [], [], []
    for v in views:
        H, W = v.intrinsics.height, v.intrinsics.width
        imgs.append(rng.uniform(0, 1, (H, W, 3)))
        n = rng.normal(size=(H, W, 3))
        n[..., 2] = -np.abs(n[..., 2]) - 0.5
        nrm.append(n / np.linalg.norm(n, axis=-1, keepdims=True))
        masks.append(rng.uniform(size=(H, W)) < 0.7)
    return Targets(imgs, nrm, masks)


def component_losses(cloud, views, targets, backend=None):
    """Each loss term summed over views, plus per-term signatures of the discrete state."""
    photo = normal = 0.0
    sig = {"shared": [], "photo": [], "normal": []}
    for v, img, nb, q in zip(views, targets.images, targets.normals, targets.masks):
        m = render(v, cloud, backend=backend)
        q = q & (m.alpha > ALPHA_EPS)
        photo += l1_dssim(m.color, img, 0.2)[0]
        normal += normal_loss(m.normal, nb, q)[0]
        st = m.state
        dot = np.sum(m.normal * nb, axis=-1)
        sig["shared"].extend([
            np.argsort(st.proj.depths, kind="stable"), st.n_contrib, st.n_clamped,
            st.proj.axis_index, st.proj.axis_sign,
        ])
        sig["photo"].append(np.sign(m.color - img))
        sig["normal"].extend([q, np.sign(m.normal - nb) * q[..., None], np.sign(1 - dot) * q])
    return {"photo": photo, "normal": normal, "scale": scale_loss(cloud)[0]}, sig


def analytic_grads(cloud, views, targets, backend=None):
    out = {k: {f: np.zeros_like(getattr(cloud, f)) for f in FIELDS} for k in ("photo", "normal")}
    for v, img, nb, q in zip(views, targets.images, targets.normals, targets.masks):
        m = render(v, cloud, backend=backend)
        q = q & (m.alpha > ALPHA_EPS)
        g = render_backward(m, cloud, d_color=l1_dssim(m.color, img, 0.2)[1])
        for f in FIELDS:
            out["photo"][f] += getattr(g, f)
        g = render_backward(m, cloud, d_normal=normal_loss(m.normal, nb, q)[1])
        for f in FIELDS:
            out["normal"][f] += getattr(g, f)
    out["scale"] = {f: np.zeros_like(getattr(cloud, f)) for f in FIELDS}
    out["scale"]["log_scales"] = scale_loss(cloud)[1]
    return out


@dataclass
class CheckResult:
    worst: float
    tested: int
    skipped: int
    failures: list

    @property
    def coverage(self):
        total = self.tested + self.skipped
        return self.tested / total if total else 0.0


def _same(a, b):
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def check(cloud, views, targets, tol=1e-3, backend=None, h=STEP) -> CheckResult:
    """Compare analytic and central-difference gradients per Gaussian, parameter group and term.

    Relative error is ``|a - f| / max(|f|, GRAD_FLOOR)`` over the smoothly probed
    entries of the group vector.
    """
    ana = analytic_grads(cloud, views, targets, backend)
    terms = ("photo", "normal", "scale")
    worst, tested, skipped, failures = 0.0, 0, 0, []
    for f in FIELDS:
        arr = getattr(cloud, f)
        fd = {k: np.zeros_like(arr) for k in terms}
        smooth = {k: np.ones(arr.shape, dtype=bool) for k in terms}
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp, sp = component_losses(cloud, views, targets, backend)
            arr[idx] = old - h
            lm, sm = component_losses(cloud, views, targets, backend)
            arr[idx] = old
            shared = _same(sp["shared"], sm["shared"])
            for k in terms:
                if k != "scale" and not (shared and _same(sp[k], sm[k])):
                    smooth[k][idx] = False
                    skipped += 1
                    continue
                tested += 1
                fd[k][idx] = (lp[k] - lm[k]) / (2 * h)
        for i in range(len(cloud)):
            for k in terms:
                ok = smooth[k][i]
                if not ok.any():
                    continue
                a, n = ana[k][f][i][ok], fd[k][i][ok]
                err = float(np.linalg.norm(a - n) / max(np.linalg.norm(n), GRAD_FLOOR))
                worst = max(worst, err)
                if err >= tol:
                    failures.append((f, i, k, err))
    return CheckResult(worst, tested, skipped, failures)
