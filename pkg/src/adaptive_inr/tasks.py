"""Fitting targets and metrics: images, 1-D synthetic signals and SDFs."""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

PSNR_CAP = 100.0
DEFAULT_SPLIT = 0.9


class TaskError(ValueError):
    pass


@dataclass
class FitTask:
    """Coordinate/value pairs in ``[-1, 1]^n`` with a train/test split."""

    coords: np.ndarray
    values: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)
    kind: str = "signal"
    meta: dict = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return self.coords.shape[1]

    @property
    def out_dim(self) -> int:
        return self.values.shape[1]

    @property
    def eval_idx(self) -> np.ndarray:
        """Test indices, or the training indices when the test split is empty."""
        return self.test_idx if len(self.test_idx) else self.train_idx

    def train_data(self):
        return self.coords[self.train_idx], self.values[self.train_idx]

    def eval_data(self):
        return self.coords[self.eval_idx], self.values[self.eval_idx]


def split_indices(n: int, frac: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Random ``frac`` / ``1 - frac`` split of ``range(n)``; both halves sorted."""
    if not 0.0 < frac <= 1.0:
        raise TaskError(f"split fraction must be in (0, 1], got {frac}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(frac * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# -- metrics ----------------------------------------------------------------


def psnr(pred, target, value_range: float = 1.0) -> float:
    """``10 log10(range^2 / MSE)`` in dB; ``inf`` for a perfect match."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise TaskError(f"shape mismatch: {pred.shape} vs {target.shape}")
    err = float(np.mean((pred - target) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(value_range**2 / err)


def capped(value: float, cap: float = PSNR_CAP) -> float:
    return min(value, cap)


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise TaskError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def evaluate(net, task: FitTask, on: str = "eval") -> dict:
    from .siren import forward

    X, Y = task.eval_data() if on == "eval" else task.train_data()
    pred = forward(net, X)
    span = task.value_range[1] - task.value_range[0]
    return {
        "psnr": capped(psnr(pred, Y, span)),
        "rmse": rmse(pred, Y),
        "param_count": net.param_count(),
    }


# -- images -----------------------------------------------------------------


def pixel_coords(height: int, width: int) -> np.ndarray:
    """Pixel centres: ``(r, c) -> ((2c+1)/W - 1, (2r+1)/H - 1)``, row-major."""
    r, c = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    xs = (2.0 * c + 1.0) / width - 1.0
    ys = (2.0 * r + 1.0) / height - 1.0
    return np.stack([xs, ys], axis=-1).reshape(-1, 2)


def read_png(path) -> np.ndarray:
    """8-bit grayscale or RGB image as an ``(H, W)`` or ``(H, W, 3)`` uint8 array."""
    try:
        img = Image.open(os.fspath(path))
        img.load()
    except (OSError, ValueError) as exc:
        raise TaskError(f"cannot read image {path}: {exc}") from None
    if img.mode in ("L", "RGB"):
        return np.asarray(img)
    if img.mode == "P":
        return np.asarray(img.convert("RGB"))
    raise TaskError(f"{path}: unsupported mode {img.mode!r}; need an 8-bit grayscale or RGB image")


def write_png(path, array) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise TaskError(f"PNG output needs uint8 data, got {array.dtype}")
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(array).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def image_task_from_array(pixels, split_seed=0, split_frac: float = DEFAULT_SPLIT) -> FitTask:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TaskError(f"expected 8-bit pixels, got {pixels.dtype}")
    h, w = pixels.shape[:2]
    channels = 1 if pixels.ndim == 2 else pixels.shape[2]
    values = pixels.reshape(h * w, channels).astype(np.float64) / 255.0
    train, test = split_indices(h * w, split_frac, split_seed)
    return FitTask(
        coords=pixel_coords(h, w),
        values=values,
        train_idx=train,
        test_idx=test,
        value_range=(0.0, 1.0),
        kind="image",
        meta={"height": h, "width": w, "channels": channels},
    )


def image_task(png_path, split_seed=0, split_frac: float = DEFAULT_SPLIT) -> FitTask:
    """Regression task over all pixels of an 8-bit PNG; intensities scaled to ``[0, 1]``."""
    task = image_task_from_array(read_png(png_path), split_seed, split_frac)
    task.meta["path"] = os.fspath(png_path)
    return task


def values_to_image(task: FitTask, values) -> np.ndarray:
    """Quantise per-pixel values in ``[0, 1]`` back to an 8-bit image."""
    if task.kind != "image":
        raise TaskError(f"task of kind {task.kind!r} is not an image")
    h, w, ch = task.meta["height"], task.meta["width"], task.meta["channels"]
    q = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return q.reshape(h, w) if ch == 1 else q.reshape(h, w, ch)


def error_map(net, task: FitTask, path=None) -> np.ndarray:
    """Per-pixel ``|pred - target|`` (channel mean) over the full image.

    Returns the float map; when ``path`` is given it is also written as a
    grayscale PNG with 0 as black and an error of 1 or more as white.
    """
    from .siren import forward

    if task.kind != "image":
        raise TaskError(f"error maps need an image task, got {task.kind!r}")
    err = np.abs(forward(net, task.coords) - task.values).mean(axis=1)
    err = err.reshape(task.meta["height"], task.meta["width"])
    if path is not None:
        write_png(path, np.clip(np.rint(err * 255.0), 0, 255).astype(np.uint8))
    return err


# -- synthetic 1-D signals -------------------------------------------------

MIN_SAMPLES = 16


def synthetic_1d(
    kind: str = "single-tone",
    n_samples: int = 256,
    seed=0,
    freqs=(5.0, 10.0),
    split_frac: float = DEFAULT_SPLIT,
) -> FitTask:
    """Sampled ``sin`` signals on an even grid over ``[-1, 1]`` with a known spectrum.

    ``single-tone`` is ``sin(f1 x)``, ``two-tone`` adds ``sin(f2 x)`` and
    ``chirp`` is ``sin(f1 x + (f2 - f1) x^2 / 2)``.
    """
    if n_samples < MIN_SAMPLES:
        raise TaskError(f"need at least {MIN_SAMPLES} samples, got {n_samples}")
    f1, f2 = float(freqs[0]), float(freqs[1]) if len(freqs) > 1 else 2.0 * float(freqs[0])
    x = np.linspace(-1.0, 1.0, n_samples)
    if kind == "single-tone":
        y = np.sin(f1 * x)
    elif kind == "two-tone":
        y = np.sin(f1 * x) + np.sin(f2 * x)
    elif kind == "chirp":
        y = np.sin(f1 * x + 0.5 * (f2 - f1) * x * x)
    else:
        raise TaskError(f"unknown synthetic signal {kind!r}")
    train, test = split_indices(n_samples, split_frac, seed)
    return FitTask(
        coords=x[:, None],
        values=y[:, None],
        train_idx=train,
        test_idx=test,
        value_range=(float(y.min()), float(y.max())),
        kind="signal",
        meta={"signal": kind, "freqs": [f1, f2]},
    )


# -- signed distance functions ---------------------------------------------


def sphere_sdf(points, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return np.linalg.norm(p, axis=-1) - radius


def torus_sdf(points, major: float = 0.6, minor: float = 0.25) -> np.ndarray:
    """Torus around the z axis: ``sqrt((sqrt(x^2+y^2) - R)^2 + z^2) - r``."""
    p = np.asarray(points, dtype=np.float64)
    ring = np.hypot(p[..., 0], p[..., 1]) - major
    return np.hypot(ring, p[..., 2]) - minor


@dataclass
class SdfTarget:
    surface_points: np.ndarray
    volume_points: np.ndarray
    volume_distances: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return np.vstack([self.surface_points, self.volume_points])

    @property
    def distances(self) -> np.ndarray:
        return np.concatenate([np.zeros(len(self.surface_points)), self.volume_distances])


def normalize_points(points) -> np.ndarray:
    """Centre the bounding box at the origin and scale its largest half-extent to 1."""
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    half = float((hi - lo).max()) / 2.0
    if half == 0.0:
        raise TaskError("point cloud is degenerate")
    return np.clip((points - (lo + hi) / 2.0) / half, -1.0, 1.0)


def read_point_cloud(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Whitespace-separated ``x y z`` rows, optionally followed by ``nx ny nz``."""
    try:
        data = np.loadtxt(os.fspath(path), ndmin=2)
    except (OSError, ValueError) as exc:
        raise TaskError(f"cannot read point cloud {path}: {exc}") from None
    if data.shape[1] not in (3, 6) or len(data) < 4:
        raise TaskError(f"{path}: expected at least 4 rows of 3 or 6 columns, got shape {data.shape}")
    normals = data[:, 3:6] if data.shape[1] == 6 else None
    return data[:, :3], normals


def _estimate_normals(points: np.ndarray, neighbours: int = 10) -> np.ndarray:
    # PCA normals oriented away from the centroid; adequate for star-shaped clouds
    from scipy.spatial import cKDTree

    tree = cKDTree(points)
    _, idx = tree.query(points, k=min(neighbours, len(points)))
    local = points[idx] - points[idx].mean(axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(local, full_matrices=False)
    normals = vt[:, -1, :]
    outward = np.sign(np.einsum("ij,ij->i", normals, points - points.mean(axis=0)))
    return normals * np.where(outward == 0, 1.0, outward)[:, None]


def point_cloud_sdf(surface: np.ndarray, normals: np.ndarray | None, queries: np.ndarray) -> np.ndarray:
    """Distance to the nearest surface sample, signed by that sample's normal."""
    from scipy.spatial import cKDTree

    if normals is None:
        normals = _estimate_normals(surface)
    dist, idx = cKDTree(surface).query(queries)
    side = np.einsum("ij,ij->i", queries - surface[idx], normals[idx])
    return np.where(side < 0, -dist, dist)


def _sphere_surface(rng, n: int, radius: float = 1.0) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _torus_surface(rng, n: int, major: float = 0.6, minor: float = 0.25) -> np.ndarray:
    # rejection on the tube angle gives area-uniform samples
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        accept = rng.uniform(0, 1, size=2 * n) <= (major + minor * np.cos(v)) / (major + minor)
        u, v = u[accept], v[accept]
        ring = major + minor * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
        out = np.vstack([out, pts])
    return out[:n]


def sdf_task(
    source: str = "sphere",
    on_surface: int = 1000,
    off_surface: int = 1000,
    seed=0,
    path=None,
    split_frac: float = DEFAULT_SPLIT,
) -> tuple[SdfTarget, FitTask]:
    """Signed-distance regression data in ``[-1, 1]^3``.

    ``source`` is ``"sphere"`` (unit sphere), ``"torus"`` or ``"file"`` (an XYZ
    point cloud at ``path``, normalised into the cube).  Off-surface samples
    are uniform in the cube.
    """
    if on_surface < 100 or off_surface < 100:
        raise TaskError(f"need at least 100 samples of each kind, got {on_surface}/{off_surface}")
    rng = np.random.default_rng(seed)
    volume = rng.uniform(-1.0, 1.0, size=(off_surface, 3))
    if source == "sphere":
        surface = _sphere_surface(rng, on_surface)
        dist = sphere_sdf(volume)
    elif source == "torus":
        surface = _torus_surface(rng, on_surface)
        dist = torus_sdf(volume)
    elif source == "file":
        if path is None:
            raise TaskError("point-cloud source needs a path")
        cloud, normals = read_point_cloud(path)
        cloud = normalize_points(cloud)
        pick = rng.choice(len(cloud), size=on_surface, replace=len(cloud) < on_surface)
        surface = cloud[pick]
        dist = point_cloud_sdf(cloud, normals, volume)
    else:
        raise TaskError(f"unknown SDF source {source!r}")
    target = SdfTarget(surface, volume, dist)
    values = target.distances[:, None]
    train, test = split_indices(len(values), split_frac, seed)
    task = FitTask(
        coords=target.points,
        values=values,
        train_idx=train,
        test_idx=test,
        value_range=(float(values.min()), float(values.max())),
        kind="sdf",
        meta={"source": source, "on_surface": on_surface, "off_surface": off_surface},
    )
    return target, task
