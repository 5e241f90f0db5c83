"""Procedural ground-truth terrain and clean scan-dot extraction."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

SCAN_SIDE = 21
SCAN_SIZE = SCAN_SIDE * SCAN_SIDE


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class TerrainKind(str, Enum):
    FLAT = "flat"
    SLOPE = "slope"
    STAIRS = "stairs"
    PLATFORM = "platform"
    DITCH = "ditch"
    ROUGH = "rough"


@dataclass(frozen=True)
class TerrainParams:
    grade: float = 0.15
    rise: float = 0.1
    run: float = 0.3
    platform_height: float = 0.15
    platform_length: float = 1.0
    ditch_width: float = 0.4
    ditch_depth: float = 0.1
    amplitude: float = 0.02
    # x where the feature begins; features are constant along y
    start: float = 0.0
    # gap between repeated platforms/ditches, 0 means a single feature
    repeat: float = 0.0


@dataclass(frozen=True)
class GridGeometry:
    width_cells: int = 200
    height_cells: int = 200
    resolution: float = 0.05
    origin: tuple[float, float] = (0.0, -5.0)

    def __post_init__(self):
        if self.width_cells < 2:
            raise ConfigError("width_cells must be >= 2")
        if self.height_cells < 2:
            raise ConfigError("height_cells must be >= 2")
        if not self.resolution > 0:
            raise ConfigError("resolution must be > 0")

    def node_xy(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin[0] + np.arange(self.width_cells) * self.resolution
        ys = self.origin[1] + np.arange(self.height_cells) * self.resolution
        return xs, ys


@dataclass(frozen=True)
class TerrainSpec:
    kind: TerrainKind = TerrainKind.FLAT
    params: TerrainParams = field(default_factory=TerrainParams)
    seed: int = 0
    geometry: GridGeometry = field(default_factory=GridGeometry)

    def validate(self) -> None:
        p = self.params
        k = TerrainKind(self.kind)
        required = {
            TerrainKind.SLOPE: ("grade",),
            TerrainKind.STAIRS: ("rise", "run"),
            TerrainKind.PLATFORM: ("platform_height", "platform_length"),
            TerrainKind.DITCH: ("ditch_width", "ditch_depth"),
        }.get(k, ())
        for name in required:
            if not getattr(p, name) > 0:
                raise ConfigError(f"terrain param '{name}' must be > 0 for {k.value}")
        if k is TerrainKind.ROUGH and not p.amplitude >= 0:
            raise ConfigError("terrain param 'amplitude' must be >= 0")
        if p.repeat < 0:
            raise ConfigError("terrain param 'repeat' must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("terrain 'seed' must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class Heightmap:
    """Dense 2.5D terrain. ``heights[row, col]`` is the height at node
    ``(origin_x + col * resolution, origin_y + row * resolution)``."""

    heights: np.ndarray
    resolution: float
    origin: tuple[float, float]

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] < 2 or h.shape[1] < 2:
            raise ConfigError("heights must be a 2-D grid with at least 2x2 nodes")
        if not np.all(np.isfinite(h)):
            raise ConfigError("heights must be finite")
        if not self.resolution > 0:
            raise ConfigError("resolution must be > 0")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)

    @property
    def width_cells(self) -> int:
        return self.heights.shape[1]

    @property
    def height_cells(self) -> int:
        return self.heights.shape[0]


@dataclass(frozen=True)
class ScanDots:
    values: np.ndarray  # (441,), terrain height minus base z
    spacing: float
    center_pose: tuple[float, float, float]

    @property
    def grid(self) -> np.ndarray:
        return self.values.reshape(SCAN_SIDE, SCAN_SIDE)


def _box3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, mode="edge")
    out = np.zeros_like(a)
    for di in range(3):
        for dj in range(3):
            out += p[di:di + a.shape[0], dj:dj + a.shape[1]]
    return out / 9.0


def _profile(kind: TerrainKind, p: TerrainParams, x: np.ndarray) -> np.ndarray:
    rel = x - p.start
    if kind is TerrainKind.SLOPE:
        return p.grade * np.maximum(rel, 0.0)
    if kind is TerrainKind.STAIRS:
        # tolerance keeps nodes sitting exactly on a riser edge on the upper step
        steps = np.floor(np.maximum(rel, 0.0) / p.run + 1e-9)
        return p.rise * steps
    if kind in (TerrainKind.PLATFORM, TerrainKind.DITCH):
        length = p.platform_length if kind is TerrainKind.PLATFORM else p.ditch_width
        level = p.platform_height if kind is TerrainKind.PLATFORM else -p.ditch_depth
        local = rel.copy()
        if p.repeat > 0:
            period = length + p.repeat
            local = np.where(rel >= 0, np.mod(rel, period), rel)
        inside = (local >= -1e-9) & (local < length - 1e-9)
        return np.where(inside, level, 0.0)
    return np.zeros_like(x)


def generate_heightmap(spec: TerrainSpec) -> Heightmap:
    spec.validate()
    kind = TerrainKind(spec.kind)
    g = spec.geometry
    xs, _ = g.node_xy()
    if kind is TerrainKind.ROUGH:
        rng = np.random.default_rng(spec.seed)
        noise = rng.uniform(-1.0, 1.0, size=(g.height_cells, g.width_cells))
        heights = _box3(noise * spec.params.amplitude) + 0.0
    else:
        row = _profile(kind, spec.params, xs)
        heights = np.broadcast_to(row, (g.height_cells, g.width_cells)).copy()
    return Heightmap(heights, g.resolution, g.origin)


def bilinear(heights: np.ndarray, resolution: float, origin, x, y) -> np.ndarray:
    """Bilinear lookup on a node grid (or a stack of grids when ``heights`` is
    3-D and ``x``/``y`` carry a matching leading axis). Queries outside the
    extent clamp to the border."""
    rows, cols = heights.shape[-2:]
    fx = np.clip((np.asarray(x, dtype=np.float64) - origin[0]) / resolution, 0.0, cols - 1)
    fy = np.clip((np.asarray(y, dtype=np.float64) - origin[1]) / resolution, 0.0, rows - 1)
    j0 = np.minimum(np.floor(fx).astype(np.int64), cols - 2)
    i0 = np.minimum(np.floor(fy).astype(np.int64), rows - 2)
    tx = fx - j0
    ty = fy - i0
    if heights.ndim == 2:
        h00 = heights[i0, j0]
        h01 = heights[i0, j0 + 1]
        h10 = heights[i0 + 1, j0]
        h11 = heights[i0 + 1, j0 + 1]
    else:
        e = np.arange(heights.shape[0]).reshape((-1,) + (1,) * (fx.ndim - 1))
        h00 = heights[e, i0, j0]
        h01 = heights[e, i0, j0 + 1]
        h10 = heights[e, i0 + 1, j0]
        h11 = heights[e, i0 + 1, j0 + 1]
    # (1 - t) a + t b is exact at both nodes
    top = (1.0 - tx) * h00 + tx * h01
    bot = (1.0 - tx) * h10 + tx * h11
    return (1.0 - ty) * top + ty * bot


def height_at(hmap: Heightmap, x, y):
    out = bilinear(hmap.heights, hmap.resolution, hmap.origin, x, y)
    return float(out) if np.ndim(out) == 0 else out


def scan_offsets(spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Base-frame (forward, left) offsets of the 441 dots, row-major with the
    forward axis along rows."""
    k = (np.arange(SCAN_SIDE) - SCAN_SIDE // 2) * spacing
    fwd, left = np.meshgrid(k, k, indexing="ij")
    return fwd.ravel(), left.ravel()


def scan_points(x, y, yaw, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """World xy of the dot grid for each base pose; output shape (..., 441)."""
    fwd, left = scan_offsets(spacing)
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    c = np.cos(np.asarray(yaw, dtype=np.float64))[..., None]
    s = np.sin(np.asarray(yaw, dtype=np.float64))[..., None]
    return x + c * fwd - s * left, y + s * fwd + c * left


def true_scan_dots(hmap: Heightmap, base, spacing: float = 0.1) -> ScanDots:
    """``base`` is (x, y, yaw, z)."""
    x, y, yaw, z = base
    px, py = scan_points(x, y, yaw, spacing)
    vals = bilinear(hmap.heights, hmap.resolution, hmap.origin, px, py) - z
    return ScanDots(np.asarray(vals, dtype=np.float64), spacing, (x, y, yaw))


def export_heightmap_csv(hmap: Heightmap, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["width", "height", "resolution", "origin_x", "origin_y"])
        w.writerow([hmap.width_cells, hmap.height_cells, repr(hmap.resolution),
                    repr(float(hmap.origin[0])), repr(float(hmap.origin[1]))])
        for row in hmap.heights:
            w.writerow([repr(float(v)) for v in row])


def load_heightmap_csv(path) -> Heightmap:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    _, meta, *grid = rows
    width, height = int(meta[0]), int(meta[1])
    heights = np.array([[float(v) for v in r] for r in grid], dtype=np.float64)
    if heights.shape != (height, width):
        raise ConfigError(f"grid shape {heights.shape} does not match header {(height, width)}")
    return Heightmap(heights, float(meta[2]), (float(meta[3]), float(meta[4])))
