"""Scene and file I/O: COLMAP text models, PPM/PFM images, binary PLY clouds."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import Intrinsics, Pose, quat_to_rotmat, rotmat_to_quat
from .gaussians import GaussianCloud, logit, shortest_axis_normal

INIT_OPACITY = 0.1
KNN = 3


class SceneFormatError(ValueError):
    """Malformed or unsupported scene data; the message names file and line."""


@dataclass(eq=False)
class CameraView:
    id: int
    intrinsics: Intrinsics
    pose: Pose
    image: np.ndarray
    name: str = ""
    depth_gt: np.ndarray | None = field(default=None, repr=False)
    normal_gt: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        K = self.intrinsics
        if self.image.shape != (K.height, K.width, 3):
            raise ValueError(
                f"view {self.id}: image shape {self.image.shape} does not match "
                f"intrinsics {K.width}x{K.height}"
            )


@dataclass
class SparsePoints:
    xyz: np.ndarray
    rgb: np.ndarray  # in [0, 1]
    ids: np.ndarray

    def __len__(self):
        return len(self.xyz)


# ---------------------------------------------------------------------------
# COLMAP text format


def _data_lines(path: Path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s


def _parse(path, lineno, fn, what):
    try:
        return fn()
    except (ValueError, IndexError) as exc:
        raise SceneFormatError(f"{path}:{lineno}: malformed {what} ({exc})") from None


def read_cameras_text(path) -> dict[int, Intrinsics]:
    path = Path(path)
    cams = {}
    for lineno, line in _data_lines(path):
        el = line.split()

        def parse():
            cam_id, model, w, h = int(el[0]), el[1], int(el[2]), int(el[3])
            params = [float(v) for v in el[4:]]
            if model == "PINHOLE":
                fx, fy, cx, cy = params[:4]
                n_expected = 4
            elif model == "SIMPLE_PINHOLE":
                f, cx, cy = params[:3]
                fx = fy = f
                n_expected = 3
            else:
                raise SceneFormatError(f"{path}:{lineno}: unsupported camera model {model}")
            if len(params) != n_expected:
                raise ValueError(f"{model} takes {n_expected} parameters, got {len(params)}")
            return cam_id, Intrinsics(fx, fy, cx, cy, w, h)

        cam_id, K = _parse(path, lineno, parse, "camera")
        cams[cam_id] = K
    return cams


def read_images_text(path):
    """Returns ``{image_id: (qvec, tvec, camera_id, name)}``."""
    path = Path(path)
    images = {}
    lines = list(_data_lines(path))
    # COLMAP pairs each image line with a 2D-point line, which may be empty and
    # therefore skipped by _data_lines; detect pairs by the 10-field header.
    i = 0
    while i < len(lines):
        lineno, line = lines[i]
        el = line.split()

        def parse():
            if len(el) < 10:
                raise ValueError(f"expected 10 fields, got {len(el)}")
            q = np.array([float(v) for v in el[1:5]])
            t = np.array([float(v) for v in el[5:8]])
            return int(el[0]), q, t, int(el[8]), el[9]

        image_id, q, t, cam_id, name = _parse(path, lineno, parse, "image")
        images[image_id] = (q, t, cam_id, name)
        i += 1
        if i < len(lines) and not _looks_like_image_header(lines[i][1]):
            i += 1
    return images


def _looks_like_image_header(line: str) -> bool:
    # 2D-point lines hold (x, y, id) triplets, so never exactly 10 fields
    return len(line.split()) == 10


def read_points3d_text(path) -> SparsePoints:
    path = Path(path)
    ids, xyz, rgb = [], [], []
    for lineno, line in _data_lines(path):
        el = line.split()

        def parse():
            if len(el) < 8:
                raise ValueError(f"expected at least 8 fields, got {len(el)}")
            return int(el[0]), [float(v) for v in el[1:4]], [int(v) for v in el[4:7]]

        pid, p, c = _parse(path, lineno, parse, "point")
        ids.append(pid)
        xyz.append(p)
        rgb.append(c)
    return SparsePoints(
        np.array(xyz, dtype=np.float64).reshape(-1, 3),
        np.array(rgb, dtype=np.float64).reshape(-1, 3) / 255.0,
        np.array(ids, dtype=np.int64),
    )


def write_colmap_text(directory, views, points: SparsePoints | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for v in views:
            K = v.intrinsics
            vals = " ".join(repr(float(x)) for x in (K.fx, K.fy, K.cx, K.cy))
            fh.write(f"{v.id} PINHOLE {K.width} {K.height} {vals}\n")
    with open(d / "images.txt", "w") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for v in views:
            q = rotmat_to_quat(v.pose.W)
            t = v.pose.t
            vals = " ".join(repr(float(x)) for x in (*q, *t))
            fh.write(f"{v.id} {vals} {v.id} {v.name or f'{v.id:04d}.ppm'}\n\n")
    with open(d / "points3D.txt", "w") as fh:
        fh.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        if points is not None:
            rgb8 = np.clip(np.round(points.rgb * 255), 0, 255).astype(int)
            for pid, p, c in zip(points.ids, points.xyz, rgb8):
                xyz = " ".join(repr(float(x)) for x in p)
                fh.write(f"{pid} {xyz} {c[0]} {c[1]} {c[2]} 0\n")


def load_colmap(directory, image_dir=None, load_images=True):
    """Read a COLMAP text model; returns ``(views, points)``.

    Images are looked up by name in ``image_dir`` (default ``<directory>/images``).
    """
    d = Path(directory)
    for fname in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (d / fname).is_file():
            raise SceneFormatError(f"{d / fname}: missing")
    cams = read_cameras_text(d / "cameras.txt")
    images = read_images_text(d / "images.txt")
    points = read_points3d_text(d / "points3D.txt")
    image_dir = Path(image_dir) if image_dir is not None else d / "images"
    views = []
    for image_id in sorted(images):
        q, t, cam_id, name = images[image_id]
        if cam_id not in cams:
            raise SceneFormatError(f"{d / 'images.txt'}: image {image_id} uses unknown camera {cam_id}")
        K = cams[cam_id]
        R = quat_to_rotmat(q)
        pose = Pose(R, t)
        if load_images and (image_dir / name).is_file():
            img = read_image(image_dir / name)
        elif load_images:
            raise SceneFormatError(f"{image_dir / name}: image file missing")
        else:
            img = np.zeros((K.height, K.width, 3))
        depth_gt = normal_gt = None
        stem = Path(name).stem
        gt_dir = d / "gt"
        if (gt_dir / f"{stem}_depth.pfm").is_file():
            depth_gt = read_pfm(gt_dir / f"{stem}_depth.pfm")
            normal_gt = read_pfm(gt_dir / f"{stem}_normal.pfm")
        views.append(CameraView(image_id, K, pose, img, name, depth_gt, normal_gt))
    return views, points


# ---------------------------------------------------------------------------
# images


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[..., :3]).tobytes())


def _read_header_tokens(fh, count):
    tokens = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise SceneFormatError(f"{fh.name}: truncated header")
        line = line.split(b"#")[0]
        tokens.extend(line.split())
    return tokens


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tokens = _read_header_tokens(fh, 4)
        if tokens[0] != b"P6":
            raise SceneFormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
        w, h, maxval = (int(t) for t in tokens[1:4])
        if maxval != 255:
            raise SceneFormatError(f"{path}: only 8-bit PPM is supported")
        data = fh.read()
    if len(data) < w * h * 3:
        raise SceneFormatError(f"{path}: truncated pixel data ({len(data)} of {w * h * 3} bytes)")
    return np.frombuffer(data[: w * h * 3], dtype=np.uint8).reshape(h, w, 3) / 255.0


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM; 2D arrays become 'Pf', (H, W, 3) become 'PF'."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        magic = "Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = "PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tokens = _read_header_tokens(fh, 4)
        magic = tokens[0]
        if magic not in (b"PF", b"Pf"):
            raise SceneFormatError(f"{path}: not a PFM file")
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
        data = fh.read()
    ch = 3 if magic == b"PF" else 1
    n = w * h * ch
    if len(data) < 4 * n:
        raise SceneFormatError(f"{path}: truncated float data ({len(data)} of {4 * n} bytes)")
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(data[: 4 * n], dtype=dtype).astype(np.float64)
    a = a.reshape((h, w, 3) if ch == 3 else (h, w))
    return a[::-1].copy()


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_ppm(path)


# ---------------------------------------------------------------------------
# PLY

PLY_PROPS = (
    "x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "opacity",
    "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
)


def write_ply(path, cloud: GaussianCloud, camera_center=None) -> None:
    """Binary little-endian PLY. Opacity is stored as a logit, scales as logs,
    rotation as the raw (w, x, y, z) quaternion; normals are shortest axes."""
    n = len(cloud)
    center = np.zeros(3) if camera_center is None else np.asarray(camera_center)
    normals = (
        shortest_axis_normal(cloud.quats, cloud.log_scales, cloud.means, center)
        if n else np.zeros((0, 3))
    )
    arr = np.empty(n, dtype=[(p, "<f8") for p in PLY_PROPS])
    cols = np.concatenate(
        [cloud.means, normals, cloud.colors, cloud.opacity_raw[:, None], cloud.log_scales,
         cloud.quats], axis=1,
    ) if n else np.zeros((0, len(PLY_PROPS)))
    for i, p in enumerate(PLY_PROPS):
        arr[p] = cols[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {p}" for p in PLY_PROPS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4", "uint": "<u4",
    "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1", "int16": "<i2",
    "uint16": "<u2", "int32": "<i4", "uint32": "<u4", "float32": "<f4", "float64": "<f8",
}


def read_ply(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise SceneFormatError(f"{path}: not a PLY file")
        count = None
        props = []
        lineno = 1
        while True:
            line = fh.readline()
            lineno += 1
            if not line:
                raise SceneFormatError(f"{path}:{lineno}: header not terminated")
            el = line.decode("ascii").split()
            if not el:
                continue
            if el[0] == "format" and el[1] != "binary_little_endian":
                raise SceneFormatError(f"{path}:{lineno}: unsupported PLY format {el[1]}")
            if el[0] == "element":
                if el[1] != "vertex":
                    raise SceneFormatError(f"{path}:{lineno}: unexpected element {el[1]}")
                count = int(el[2])
            elif el[0] == "property":
                if el[1] not in _PLY_TYPES:
                    raise SceneFormatError(f"{path}:{lineno}: unsupported property type {el[1]}")
                props.append((el[2], _PLY_TYPES[el[1]]))
            elif el[0] == "end_header":
                break
        data = fh.read()
    if count is None:
        raise SceneFormatError(f"{path}: no vertex element")
    dt = np.dtype(props)
    if len(data) < dt.itemsize * count:
        raise SceneFormatError(
            f"{path}: truncated vertex data ({len(data)} of {dt.itemsize * count} bytes)"
        )
    arr = np.frombuffer(data[: dt.itemsize * count], dtype=dt)
    missing = [p for p in PLY_PROPS if p not in arr.dtype.names and p not in ("nx", "ny", "nz")]
    if missing:
        raise SceneFormatError(f"{path}: missing properties {missing}")

    def col(*names):
        return np.stack([arr[n].astype(np.float64) for n in names], axis=1)

    return GaussianCloud(
        col("x", "y", "z"),
        col("rot_0", "rot_1", "rot_2", "rot_3"),
        col("scale_0", "scale_1", "scale_2"),
        arr["opacity"].astype(np.float64),
        col("red", "green", "blue"),
    )


# ---------------------------------------------------------------------------
# cloud initialisation


def scene_extent(views) -> float:
    """1.1 times the largest camera-center distance from their centroid."""
    centers = np.array([v.pose.center for v in views])
    if len(centers) == 0:
        return 1.0
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())
    return 1.1 * radius if radius > 0 else 1.0


def knn_mean_distance(query: np.ndarray, reference: np.ndarray, k: int = KNN,
                      exclude_self: bool = True) -> np.ndarray:
    """Mean distance from each query point to its ``k`` nearest reference points."""
    tree = cKDTree(reference)
    kk = k + 1 if exclude_self else k
    kk = min(kk, len(reference))
    dist, _ = tree.query(query, k=kk)
    dist = np.asarray(dist).reshape(len(query), kk)
    if exclude_self:
        dist = dist[:, 1:]
    return dist.mean(axis=1)


def init_cloud_from_points(xyz, rgb, extent: float = 1.0) -> GaussianCloud:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    n = len(xyz)
    if n == 0:
        raise ValueError("cannot initialise a cloud from an empty point set")
    if n == 1:
        scale = np.array([0.1 * extent])
    else:
        scale = knn_mean_distance(xyz, xyz, KNN)
        scale = np.where(scale > 0, scale, 1e-7)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        xyz.copy(),
        quats,
        np.repeat(np.log(scale)[:, None], 3, axis=1),
        np.full(n, float(logit(INIT_OPACITY))),
        rgb.copy(),
    )


def save_scene(directory, views, points: SparsePoints | None = None) -> None:
    """COLMAP text model plus images and (when present) ground-truth maps."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    named = []
    for v in views:
        if not v.name:
            v.name = f"{v.id:04d}.ppm"
        named.append(v)
        write_ppm(d / "images" / v.name, v.image)
        if v.depth_gt is not None:
            (d / "gt").mkdir(exist_ok=True)
            stem = Path(v.name).stem
            write_pfm(d / "gt" / f"{stem}_depth.pfm", v.depth_gt)
            write_pfm(d / "gt" / f"{stem}_normal.pfm", v.normal_gt)
    write_colmap_text(d, named, points)


def list_images(directory) -> list[str]:
    """Sorted PPM file names in ``directory``."""
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(".ppm"))
