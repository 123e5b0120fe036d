"""Spherical projection of point clouds into range images, plus dataset I/O."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import FormatError, Reader

CLASSES = ("background", "car", "pedestrian", "cyclist")
NUM_CLASSES = len(CLASSES)
FLOAT_CHANNELS = ("x", "y", "z", "intensity", "depth")
INPUT_CHANNELS = FLOAT_CHANNELS + ("mask",)

DATASET_MAGIC = b"RSDS"
DATASET_VERSION = 1


class ShapeError(ValueError):
    """Array or image dimensions disagree with what an operation expects."""


@dataclass(frozen=True)
class GridConfig:
    height: int = 64
    width: int = 512
    elevation: tuple[float, float] = (math.radians(-25.0), math.radians(3.0))
    azimuth: tuple[float, float] = (math.radians(-45.0), math.radians(45.0))

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid height and width must be >= 1")
        if not self.elevation[0] < self.elevation[1]:
            raise ValueError("elevation range must be increasing")
        if not self.azimuth[0] < self.azimuth[1]:
            raise ValueError("azimuth range must be increasing")

    def row_centers(self) -> np.ndarray:
        """Elevation of each row center; row 0 is the top of the image."""
        lo, hi = self.elevation
        return hi - (np.arange(self.height) + 0.5) * (hi - lo) / self.height

    def col_centers(self) -> np.ndarray:
        """Azimuth of each column center; column 0 is the leftmost (largest azimuth)."""
        lo, hi = self.azimuth
        return hi - (np.arange(self.width) + 0.5) * (hi - lo) / self.width


@dataclass
class PointCloud:
    xyz: np.ndarray
    labels: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.labels.shape[0] != self.xyz.shape[0]:
            raise ValueError("labels and points differ in length")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != self.xyz.shape[0]:
                raise ValueError("intensity and points differ in length")
            if np.any((self.intensity < 0) | (self.intensity > 1)):
                raise ValueError("intensity must lie in [0, 1]")
        if np.any(self.labels >= NUM_CLASSES):
            raise ValueError(f"labels must be in 0..{NUM_CLASSES - 1}")
        if len(self) and not np.all(self.depth > 0):
            raise ValueError("every point needs positive depth")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def depth(self) -> np.ndarray:
        return np.sqrt((self.xyz ** 2).sum(axis=1))


@dataclass
class RangeImage:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    intensity: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    ignore: np.ndarray

    @classmethod
    def empty(cls, height: int, width: int) -> "RangeImage":
        f = lambda: np.zeros((height, width))  # noqa: E731
        u = lambda: np.zeros((height, width), dtype=np.uint8)  # noqa: E731
        return cls(f(), f(), f(), f(), f(), u(), u(), np.ones((height, width), dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def copy(self) -> "RangeImage":
        return RangeImage(**{k: v.copy() for k, v in self.__dict__.items()})

    def channels(self) -> np.ndarray:
        """Raw (6, H, W) stack in the order x, y, z, intensity, depth, mask."""
        return np.stack([self.x, self.y, self.z, self.intensity, self.depth,
                         self.mask.astype(np.float64)])

    def identical(self, other: "RangeImage") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) and
                   getattr(self, k).dtype == getattr(other, k).dtype
                   for k in self.__dict__)

    def clear_pixels(self, drop: np.ndarray) -> None:
        """Mark ``drop`` pixels missing in place: zero channels, background, ignored."""
        for name in FLOAT_CHANNELS:
            getattr(self, name)[drop] = 0.0
        self.mask[drop] = 0
        self.labels[drop] = 0
        self.ignore[drop] = 1


@dataclass
class ProjectionStats:
    points: int = 0
    projected: int = 0
    out_of_range: int = 0
    occluded: int = 0


def project(cloud: PointCloud, grid: GridConfig) -> tuple[RangeImage, ProjectionStats]:
    """Bin points by elevation/azimuth; the nearest point wins each pixel."""
    img = RangeImage.empty(grid.height, grid.width)
    stats = ProjectionStats(points=len(cloud))
    if len(cloud) == 0:
        return img, stats
    xyz = cloud.xyz
    depth = cloud.depth
    theta = np.arcsin(np.clip(xyz[:, 2] / depth, -1.0, 1.0))
    phi = np.arctan2(xyz[:, 1], xyz[:, 0])
    (e0, e1), (a0, a1) = grid.elevation, grid.azimuth
    inside = (theta >= e0) & (theta <= e1) & (phi >= a0) & (phi <= a1)
    stats.out_of_range = int((~inside).sum())
    idx = np.flatnonzero(inside)
    row = np.minimum(np.floor((e1 - theta[idx]) / (e1 - e0) * grid.height).astype(np.int64), grid.height - 1)
    col = np.minimum(np.floor((a1 - phi[idx]) / (a1 - a0) * grid.width).astype(np.int64), grid.width - 1)
    pix = row * grid.width + col
    # nearest first; ties keep the earlier point
    order = np.lexsort((idx, depth[idx]))
    pix_sorted = pix[order]
    _, first = np.unique(pix_sorted, return_index=True)
    chosen = idx[order[first]]
    target = pix_sorted[first]
    stats.projected = int(chosen.size)
    stats.occluded = int(idx.size - chosen.size)
    r, c = np.divmod(target, grid.width)
    img.x[r, c] = xyz[chosen, 0]
    img.y[r, c] = xyz[chosen, 1]
    img.z[r, c] = xyz[chosen, 2]
    img.depth[r, c] = depth[chosen]
    if cloud.intensity is not None:
        img.intensity[r, c] = cloud.intensity[chosen]
    img.mask[r, c] = 1
    img.labels[r, c] = cloud.labels[chosen]
    img.ignore[r, c] = 0
    return img, stats


def inject_dropout(img: RangeImage, p: float, seed: int) -> RangeImage:
    """Drop each existing pixel independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    out = img.copy()
    u = np.random.default_rng(seed).random(img.shape)
    out.clear_pixels((u < p) & (img.mask == 1))
    return out


@dataclass
class IoUResult:
    iou: float
    intersection: int
    union: int
    empty_union: bool = False


def compute_iou(pred: np.ndarray, gt: RangeImage, cls: int) -> IoUResult:
    """Point-wise IoU for one class, ignoring pixels flagged in ``gt.ignore``.

    An empty union scores 1.0 and sets ``empty_union``.
    """
    if not 0 <= int(cls) < NUM_CLASSES:
        raise ValueError(f"unknown class id {cls}")
    pred = np.asarray(pred)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != label shape {gt.shape}")
    valid = gt.ignore == 0
    p = (pred == cls) & valid
    g = (gt.labels == cls) & valid
    inter = int((p & g).sum())
    union = int((p | g).sum())
    if union == 0:
        return IoUResult(1.0, 0, 0, True)
    return IoUResult(inter / union, inter, union)


@dataclass
class IoUAccumulator:
    """Sums intersections and unions over many images before dividing."""

    intersection: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, dtype=np.int64))
    union: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, dtype=np.int64))

    def add(self, pred: np.ndarray, gt: RangeImage) -> None:
        for c in range(NUM_CLASSES):
            r = compute_iou(pred, gt, c)
            self.intersection[c] += r.intersection
            self.union[c] += r.union

    def present(self) -> np.ndarray:
        return self.union > 0

    def iou(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), 1.0)


# -- dataset container -----------------------------------------------------
def write_dataset(path, images: Sequence[RangeImage]) -> None:
    """RSDS: magic, u16 version, u32 count, then per image u16 H, u16 W and
    x, y, z, intensity, depth (float64) followed by mask, labels, ignore (u8)."""
    parts = [DATASET_MAGIC, struct.pack("<HI", DATASET_VERSION, len(images))]
    for img in images:
        h, w = img.shape
        if h > 0xFFFF or w > 0xFFFF:
            raise ValueError("image dimensions exceed u16")
        parts.append(struct.pack("<HH", h, w))
        for name in FLOAT_CHANNELS:
            parts.append(np.ascontiguousarray(getattr(img, name), dtype="<f8").tobytes())
        for name in ("mask", "labels", "ignore"):
            parts.append(np.ascontiguousarray(getattr(img, name), dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path) -> list[RangeImage]:
    r = Reader(Path(path).read_bytes())
    r.expect_magic(DATASET_MAGIC, DATASET_VERSION, "dataset")
    count = r.unpack("<I", "image count")
    images = []
    for i in range(count):
        off = r.pos
        h, w = r.unpack("<HH", f"dimensions of image {i}")
        if h == 0 or w == 0:
            raise FormatError(f"image {i} has zero dimension {h}x{w}", off)
        fields = {}
        for name in FLOAT_CHANNELS:
            fields[name] = r.array(h * w, "<f8", f"{name} channel of image {i}").reshape(h, w).astype(np.float64)
        for name in ("mask", "labels", "ignore"):
            fields[name] = r.array(h * w, np.uint8, f"{name} channel of image {i}").reshape(h, w)
        images.append(RangeImage(**fields))
    r.expect_end()
    return images


# -- input standardization -------------------------------------------------
@dataclass
class InputStats:
    """Per-channel mean/std of x, y, z, intensity, depth over existing pixels."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InputStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls) -> "InputStats":
        return cls(np.zeros(len(FLOAT_CHANNELS)), np.ones(len(FLOAT_CHANNELS)))


def channel_stats(images: Sequence[RangeImage]) -> InputStats:
    n = 0
    s = np.zeros(len(FLOAT_CHANNELS))
    ss = np.zeros(len(FLOAT_CHANNELS))
    for img in images:
        m = img.mask == 1
        vals = np.stack([getattr(img, c)[m] for c in FLOAT_CHANNELS])
        n += vals.shape[1]
        s += vals.sum(axis=1)
        ss += (vals ** 2).sum(axis=1)
    if n == 0:
        return InputStats.identity()
    mean = s / n
    var = np.maximum(ss / n - mean ** 2, 0.0)
    std = np.sqrt(var)
    # constant channels (e.g. absent intensity) pass through unscaled
    std = np.where(std < 1e-8, 1.0, std)
    return InputStats(mean, std)


def normalize_batch(images: Sequence[RangeImage], stats: InputStats,
                    channels: Sequence[str] = INPUT_CHANNELS) -> np.ndarray:
    """Stack images into (N, C, H, W); float channels are standardized on
    existing pixels and zero elsewhere, the mask channel is passed as 0/1."""
    out = []
    for img in images:
        m = img.mask.astype(np.float64)
        chans = []
        for name in channels:
            if name == "mask":
                chans.append(m)
            else:
                i = FLOAT_CHANNELS.index(name)
                chans.append((getattr(img, name) - stats.mean[i]) / stats.std[i] * m)
        out.append(np.stack(chans))
    return np.stack(out)
