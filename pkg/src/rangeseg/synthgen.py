"""Procedural LiDAR scenes: ray casting against a ground plane and primitives.

Scenes hold boxes (cars, buildings), vertical cylinders (pedestrians, poles)
and box + cylinder composites (cyclists). Scene layout draws from a stream
keyed on ``(seed, index)`` only; the sensor (jitter, dropout) draws from a
separate stream, so two domains that differ only in sensor knobs see the
same objects.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .range_image import GridConfig, PointCloud, RangeImage, project

BACKGROUND, CAR, PEDESTRIAN, CYCLIST = 0, 1, 2, 3
INTENSITY_MODELS = ("none", "analytic", "bimodal")
LOW, HIGH = 0.2, 0.8
BAND = 0.5  # metres per material band


@dataclass(frozen=True)
class SceneStats:
    cars: tuple[int, int] = (2, 5)
    pedestrians: tuple[int, int] = (1, 3)
    cyclists: tuple[int, int] = (0, 2)
    clutter: tuple[int, int] = (2, 5)
    distance: tuple[float, float] = (5.0, 30.0)


@dataclass(frozen=True)
class DomainConfig:
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    scene: SceneStats = field(default_factory=SceneStats)
    p_drop: float = 0.0
    intensity: str = "none"
    jitter: float = 0.0
    sensor_height: float = 1.73
    max_range: float = 80.0
    ground_plane: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")
        if self.intensity not in INTENSITY_MODELS:
            raise ValueError(f"intensity model must be one of {INTENSITY_MODELS}")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    def scene_key(self) -> tuple:
        return (self.seed, self.grid, self.scene, self.sensor_height, self.max_range, self.ground_plane)


def source_preset(grid: GridConfig | None = None, seed: int = 0, **kw) -> DomainConfig:
    """Clean simulator domain: no dropout, no intensity."""
    return DomainConfig(seed=seed, grid=grid or GridConfig(), p_drop=0.0, intensity="none", jitter=0.0, **kw)


def target_preset(grid: GridConfig | None = None, seed: int = 0, **kw) -> DomainConfig:
    """Real-like domain: dropout noise, bimodal reflectance, slight angular jitter."""
    kw = {"p_drop": 0.25, "intensity": "bimodal", "jitter": math.radians(0.05), **kw}
    return DomainConfig(seed=seed, grid=grid or GridConfig(), **kw)


@dataclass
class Primitive:
    kind: str  # "box" or "cylinder"
    label: int
    center: tuple[float, float]  # x, y on the ground
    z0: float  # bottom, relative to the ground plane
    z1: float  # top
    size: tuple[float, float] = (0.0, 0.0)  # box length/width
    yaw: float = 0.0
    radius: float = 0.0
    reflectance: float = 0.5

    @property
    def height(self) -> float:
        return self.z1


def material_reflectance(label, height):
    """Bimodal reflectance keyed to a hidden material bit that depends on the
    class and the object's height, quantized to 0.5 m bands. Accepts scalars
    or arrays."""
    band = np.floor(np.maximum(height, 0.0) / BAND).astype(np.int64)
    out = np.where((np.asarray(label, dtype=np.int64) + band) % 2 == 1, HIGH, LOW)
    return float(out) if out.ndim == 0 else out


def _box_hits(d: np.ndarray, p: Primitive, ground_z: float):
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    ox, oy, oz = -p.center[0], -p.center[1], -(ground_z)
    # ray origin and direction in the box frame (rotation by -yaw)
    o = np.array([c * ox + s * oy, -s * ox + c * oy, oz])
    dl = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
    lo = np.array([-p.size[0] / 2, -p.size[1] / 2, p.z0])
    hi = np.array([p.size[0] / 2, p.size[1] / 2, p.z1])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / dl
        t2 = (hi - o) / dl
    tn = np.minimum(t1, t2)
    tf = np.maximum(t1, t2)
    tn = np.where(np.isnan(tn), -np.inf, tn)
    tf = np.where(np.isnan(tf), np.inf, tf)
    tmin = tn.max(axis=1)
    tmax = tf.min(axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    axis = tn.argmax(axis=1)
    # face normal in the box frame, rotated back
    nl = np.zeros_like(dl)
    nl[np.arange(len(d)), axis] = 1.0
    normal = np.stack([c * nl[:, 0] - s * nl[:, 1], s * nl[:, 0] + c * nl[:, 1], nl[:, 2]], axis=1)
    return np.where(hit, tmin, np.inf), normal


@np.errstate(invalid="ignore", divide="ignore")
def _cylinder_hits(d: np.ndarray, p: Primitive, ground_z: float):
    ox, oy = -p.center[0], -p.center[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    cc = ox * ox + oy * oy - p.radius ** 2
    disc = b * b - 4 * a * cc
    t_side = (-b - np.sqrt(disc)) / (2 * a)
    z = t_side * d[:, 2] - ground_z
    side_ok = (disc >= 0) & (a > 0) & (t_side > 0) & (z >= p.z0) & (z <= p.z1)
    t = np.where(side_ok, t_side, np.inf)
    t_cap = (ground_z + p.z1) / d[:, 2]
    rx = t_cap * d[:, 0] + ox
    ry = t_cap * d[:, 1] + oy
    cap_ok = (t_cap > 0) & np.isfinite(t_cap) & (rx * rx + ry * ry <= p.radius ** 2)
    use_cap = cap_ok & (t_cap < t)
    t = np.where(use_cap, t_cap, t)
    hx = t * d[:, 0] + ox
    hy = t * d[:, 1] + oy
    rn = np.sqrt(hx * hx + hy * hy)
    normal = np.stack([hx / rn, hy / rn, np.zeros_like(rn)], axis=1)
    normal[use_cap] = (0.0, 0.0, 1.0)
    return t, np.nan_to_num(normal)


def ray_directions(grid: GridConfig, elev_noise: np.ndarray | None = None,
                   azim_noise: np.ndarray | None = None) -> np.ndarray:
    """Unit ray per pixel center, (H*W, 3) in row-major pixel order."""
    theta, phi = np.meshgrid(grid.row_centers(), grid.col_centers(), indexing="ij")
    theta, phi = theta.ravel(), phi.ravel()
    if elev_noise is not None:
        theta = theta + elev_noise
        phi = phi + azim_noise
    return np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)], axis=1)


@dataclass
class RayHits:
    t: np.ndarray
    label: np.ndarray
    reflectance: np.ndarray
    cos_incidence: np.ndarray


def cast_rays(dirs: np.ndarray, primitives: Sequence[Primitive], sensor_height: float,
              max_range: float = 80.0) -> RayHits:
    """Nearest hit per ray against the ground plane and ``primitives``."""
    ground_z = -sensor_height
    n = len(dirs)
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, ground_z / dirs[:, 2], np.inf)
    t = t_ground
    label = np.zeros(n, dtype=np.uint8)
    refl = np.full(n, material_reflectance(BACKGROUND, 0.0))
    normal = np.tile([0.0, 0.0, 1.0], (n, 1))
    for p in primitives:
        tp, nrm = (_box_hits if p.kind == "box" else _cylinder_hits)(dirs, p, ground_z)
        closer = tp < t
        t = np.where(closer, tp, t)
        label[closer] = p.label
        refl[closer] = p.reflectance
        normal[closer] = nrm[closer]
    t = np.where(t <= max_range, t, np.inf)
    cos_inc = np.abs((normal * dirs).sum(axis=1))
    return RayHits(t, label, refl, cos_inc)


def _place(rng, stats: SceneStats, grid: GridConfig, taken: list, radius: float):
    az_lo, az_hi = grid.azimuth
    for _ in range(50):
        dist = rng.uniform(*stats.distance)
        az = rng.uniform(az_lo + 0.05, az_hi - 0.05)
        x, y = dist * math.cos(az), dist * math.sin(az)
        if all(math.hypot(x - tx, y - ty) > radius + tr for tx, ty, tr in taken):
            taken.append((x, y, radius))
            return x, y
    return None


def scene_primitives(config: DomainConfig, index: int) -> list[Primitive]:
    """Object layout of scene ``index``; depends on the seed and scene statistics only."""
    rng = np.random.default_rng([config.seed, index, 0])
    st = config.scene
    prims: list[Primitive] = []
    taken: list = []
    counts = {k: int(rng.integers(lo, hi + 1)) for k, (lo, hi) in
              (("cars", st.cars), ("pedestrians", st.pedestrians),
               ("cyclists", st.cyclists), ("clutter", st.clutter))}
    for _ in range(counts["cars"]):
        length, width, height = rng.uniform(3.8, 4.8), rng.uniform(1.6, 1.9), rng.uniform(1.35, 1.8)
        pos = _place(rng, st, config.grid, taken, length / 2 + 0.3)
        yaw = rng.uniform(-math.pi, math.pi)
        if pos:
            prims.append(Primitive("box", CAR, pos, 0.15, height, (length, width), yaw))
    for _ in range(counts["pedestrians"]):
        r, height = rng.uniform(0.22, 0.32), rng.uniform(1.55, 1.9)
        pos = _place(rng, st, config.grid, taken, 0.5)
        if pos:
            prims.append(Primitive("cylinder", PEDESTRIAN, pos, 0.0, height, radius=r))
    for _ in range(counts["cyclists"]):
        height = rng.uniform(1.6, 1.9)
        yaw = rng.uniform(-math.pi, math.pi)
        pos = _place(rng, st, config.grid, taken, 1.0)
        if pos:
            prims.append(Primitive("box", CYCLIST, pos, 0.0, 1.0, (1.7, 0.45), yaw))
            prims.append(Primitive("cylinder", CYCLIST, pos, 1.0, height, radius=0.24))
    for _ in range(counts["clutter"]):
        if rng.random() < 0.5:
            length, width, height = rng.uniform(2.0, 8.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 5.0)
            pos = _place(rng, st, config.grid, taken, length / 2)
            yaw = rng.uniform(-math.pi, math.pi)
            if pos:
                prims.append(Primitive("box", BACKGROUND, pos, 0.0, height, (length, width), yaw))
        else:
            r, height = rng.uniform(0.08, 0.25), rng.uniform(2.5, 5.0)
            pos = _place(rng, st, config.grid, taken, 0.4)
            if pos:
                prims.append(Primitive("cylinder", BACKGROUND, pos, 0.0, height, radius=r))
    # analytic reflectance varies per object; bimodal is fixed by class and height
    for p in prims:
        base = {BACKGROUND: 0.4, CAR: 0.55, PEDESTRIAN: 0.3, CYCLIST: 0.45}[p.label]
        p.reflectance = float(np.clip(base + rng.uniform(-0.2, 0.2), 0.05, 1.0))
    return prims


def _intensity(config: DomainConfig, hits: RayHits, depth: np.ndarray):
    if config.intensity == "none":
        return None
    if config.intensity == "bimodal":
        return hits.reflectance.copy()
    return np.clip(hits.reflectance * (0.35 + 0.65 * hits.cos_incidence) * np.exp(-depth / 120.0), 0.0, 1.0)


def generate_scene(config: DomainConfig, index: int,
                   primitives: Sequence[Primitive] | None = None) -> PointCloud:
    """Labeled point cloud of scene ``index`` as seen by the configured sensor."""
    if not config.ground_plane or config.sensor_height <= 0:
        raise ValueError("degenerate scene: a ground plane below the sensor is required")
    prims = scene_primitives(config, index) if primitives is None else list(primitives)
    if config.intensity == "bimodal":
        # one material bit per object
        prims = [replace(p, reflectance=material_reflectance(p.label, p.height)) for p in prims]
    grid = config.grid
    n = grid.height * grid.width
    srng = np.random.default_rng([config.seed, index, 1])
    u_drop = srng.random(n)
    noise = srng.standard_normal((2, n))
    if config.jitter > 0:
        dirs = ray_directions(grid, noise[0] * config.jitter, noise[1] * config.jitter)
    else:
        dirs = ray_directions(grid)
    hits = cast_rays(dirs, prims, config.sensor_height, config.max_range)
    keep = np.isfinite(hits.t) & (u_drop >= config.p_drop)
    t = hits.t[keep]
    xyz = dirs[keep] * t[:, None]
    inten = _intensity(config, RayHits(t, hits.label[keep], hits.reflectance[keep], hits.cos_incidence[keep]), t)
    return PointCloud(xyz, hits.label[keep], inten)


def generate_image(config: DomainConfig, index: int) -> RangeImage:
    img, _ = project(generate_scene(config, index), config.grid)
    return img


def generate_dataset(config: DomainConfig, count: int, start: int = 0, workers: int = 1) -> list[RangeImage]:
    idx = range(start, start + count)
    if workers <= 1:
        return [generate_image(config, i) for i in idx]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(generate_image, [config] * count, idx))


def generate_domain_pair(source: DomainConfig, target: DomainConfig, count: int, start: int = 0,
                         workers: int = 1) -> tuple[list[RangeImage], list[RangeImage]]:
    """Two datasets over the same scenes, differing only in sensor knobs."""
    if source.scene_key() != target.scene_key():
        raise ValueError("source and target configs must share seed, grid and scene statistics; "
                         "only p_drop, intensity and jitter may differ")
    return (generate_dataset(source, count, start, workers),
            generate_dataset(target, count, start, workers))
