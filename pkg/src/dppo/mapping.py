"""Estimated elevation map fused from synthetic depth scans."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .terrain import ConfigError, GridGeometry, Heightmap, ScanDots, bilinear, scan_points

VAR_FLOOR = 1e-9
_GOLDEN = 0.6180339887498949


@dataclass(frozen=True)
class SensorModel:
    alpha_d: float = 0.002
    max_range: float = 3.0
    fov: float = 2.0  # radians, centered on the heading
    rays_per_scan: int = 300
    sensor_height: float = 0.5  # above base
    min_ground_range: float = 0.2
    pose_noise: float = 0.0  # meters; 0 disables simulated pose error

    def __post_init__(self):
        if not self.alpha_d >= 0:
            raise ConfigError("alpha_d must be >= 0")
        if not self.max_range > 0:
            raise ConfigError("max_range must be > 0")
        if not 0 < self.fov <= 2 * np.pi:
            raise ConfigError("fov must be in (0, 2*pi]")
        if self.rays_per_scan < 1:
            raise ConfigError("rays_per_scan must be >= 1")


@dataclass(frozen=True)
class PointMeasurement:
    x: float
    y: float
    p_z: float
    d: float


def kalman_update_cell(h, var_m, p_z, var_p):
    """One scalar Kalman fusion of a height measurement into a cell.

    Works elementwise on arrays. A zero measurement variance is treated as an
    exact reading: the cell takes ``p_z`` and the variance drops to the floor.
    """
    h = np.asarray(h, dtype=np.float64)
    var_m = np.asarray(var_m, dtype=np.float64)
    p_z = np.asarray(p_z, dtype=np.float64)
    var_p = np.asarray(var_p, dtype=np.float64)
    exact = var_p <= 0
    vp = np.where(exact, 1.0, var_p)
    denom = var_m + vp
    h_new = (vp * h + var_m * p_z) / denom
    v_new = var_m * vp / denom
    h_new = np.where(exact, p_z, h_new)
    v_new = np.maximum(np.where(exact, VAR_FLOOR, v_new), VAR_FLOOR)
    if h_new.ndim == 0:
        return float(h_new), float(v_new)
    return h_new, v_new


@dataclass
class ElevationMap:
    """Per-cell height estimate. Arrays may carry a leading env axis."""

    geometry: GridGeometry
    h: np.ndarray
    var: np.ndarray
    observed: np.ndarray
    prior_height: float = 0.0
    prior_var: float = 1.0

    @classmethod
    def empty(cls, geometry: GridGeometry, prior_height=0.0, prior_var=1.0, batch=None):
        shape = (geometry.height_cells, geometry.width_cells)
        if batch is not None:
            shape = (batch,) + shape
        return cls(geometry, np.full(shape, float(prior_height)), np.full(shape, float(prior_var)),
                   np.zeros(shape, dtype=bool), float(prior_height), float(prior_var))

    def copy(self) -> "ElevationMap":
        return replace(self, h=self.h.copy(), var=self.var.copy(), observed=self.observed.copy())

    def reset(self, envs) -> None:
        self.h[envs] = self.prior_height
        self.var[envs] = self.prior_var
        self.observed[envs] = False

    def as_heightmap(self) -> Heightmap:
        return Heightmap(self.h, self.geometry.resolution, self.geometry.origin)


def ray_pattern(model: SensorModel, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Ground-plane footprints (range, azimuth) of the forward sector rays.

    Rays follow an area-uniform golden-angle spiral; a ``rng`` rotates the
    spiral phase so consecutive scans cover different cells.
    """
    n = model.rays_per_scan
    k = np.arange(n)
    shift = 0.0 if rng is None else rng.random()
    reach = model.max_range
    lo = min(model.min_ground_range, reach)
    u = (k + 0.5) / n
    rng_ground = np.sqrt(lo**2 + (reach**2 - lo**2) * u)
    az = -model.fov / 2 + model.fov * np.mod(k * _GOLDEN + shift, 1.0)
    return rng_ground, az


def simulate_depth_scan(truth: Heightmap, sensor_pose, model: SensorModel, rng,
                        footprints=None) -> list[PointMeasurement]:
    """Synthetic depth scan of one sensor. ``sensor_pose`` is (x, y, z, yaw)."""
    x, y, z, yaw = sensor_pose
    pts = _scan_arrays(truth.heights, truth.resolution, truth.origin,
                       np.array([x]), np.array([y]), np.array([z]), np.array([yaw]),
                       model, [rng], footprints)
    px, py, pz, d, keep = (a[0] for a in pts)
    return [PointMeasurement(float(a), float(b), float(c), float(e))
            for a, b, c, e in zip(px[keep], py[keep], pz[keep], d[keep])]


def _scan_arrays(heights, resolution, origin, x, y, z, yaw, model, rngs, footprints=None):
    """Batched scan: one row per env. Returns px, py, p_z, d, keep (N, rays)."""
    n_env = len(x)
    if footprints is None:
        rows = [ray_pattern(model, r) for r in rngs]
        rr = np.stack([r[0] for r in rows])
        az = np.stack([r[1] for r in rows])
    else:
        rr = np.broadcast_to(np.asarray(footprints[0], dtype=np.float64), (n_env, len(footprints[0])))
        az = np.broadcast_to(np.asarray(footprints[1], dtype=np.float64), rr.shape)
    ang = yaw[:, None] + az
    px = x[:, None] + rr * np.cos(ang)
    py = y[:, None] + rr * np.sin(ang)
    ground = bilinear(heights, resolution, origin, px, py)
    d = np.sqrt(rr**2 + (z[:, None] - ground) ** 2)
    sigma = np.sqrt(model.alpha_d) * d
    noise = np.stack([r.standard_normal(rr.shape[1]) for r in rngs])
    pz = ground + sigma * noise
    keep = d <= model.max_range
    return px, py, pz, d, keep


def _fuse(emap: ElevationMap, env, ci, cj, pz, var_p) -> None:
    """Sequential per-cell fusion, vectorized in rounds: each round applies the
    earliest pending measurement of every distinct cell, so the order within a
    cell is preserved."""
    g = emap.geometry
    key = (env * g.height_cells + ci) * g.width_cells + cj
    pending = np.arange(len(key))
    while len(pending):
        _, first = np.unique(key[pending], return_index=True)
        take = pending[np.sort(first)]
        e, i, j = env[take], ci[take], cj[take]
        fresh = ~emap.observed[e, i, j]
        h_new, v_new = kalman_update_cell(emap.h[e, i, j], emap.var[e, i, j], pz[take], var_p[take])
        h_new = np.where(fresh, pz[take], h_new)
        v_new = np.where(fresh, np.maximum(var_p[take], VAR_FLOOR), v_new)
        emap.h[e, i, j] = h_new
        emap.var[e, i, j] = v_new
        emap.observed[e, i, j] = True
        mask = np.ones(len(pending), dtype=bool)
        mask[np.searchsorted(pending, take)] = False
        pending = pending[mask]


def _cells(geometry: GridGeometry, px, py):
    ci = np.rint((py - geometry.origin[1]) / geometry.resolution).astype(np.int64)
    cj = np.rint((px - geometry.origin[0]) / geometry.resolution).astype(np.int64)
    inside = (ci >= 0) & (ci < geometry.height_cells) & (cj >= 0) & (cj < geometry.width_cells)
    return ci, cj, inside


def integrate_point_cloud(emap: ElevationMap, points, model: SensorModel) -> ElevationMap:
    """Return a new map with ``points`` fused in order. Each point lands in
    the cell whose node is nearest; points outside the grid are ignored."""
    out = emap.copy()
    if len(points) == 0:
        return out
    arr = np.array([[p.x, p.y, p.p_z, p.d] for p in points], dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains non-finite values")
    batched = out.h.ndim == 3
    if not batched:
        out.h, out.var, out.observed = out.h[None], out.var[None], out.observed[None]
    ci, cj, inside = _cells(out.geometry, arr[:, 0], arr[:, 1])
    var_p = model.alpha_d * arr[:, 3] ** 2
    env = np.zeros(int(inside.sum()), dtype=np.int64)
    _fuse(out, env, ci[inside], cj[inside], arr[inside, 2], var_p[inside])
    if not batched:
        out.h, out.var, out.observed = out.h[0], out.var[0], out.observed[0]
    return out


def scan_into_map_batch(emap: ElevationMap, truth_heights, truth_geometry: GridGeometry,
                        x, y, z, yaw, model: SensorModel, rngs, envs=None) -> None:
    """In-place batched scan + fusion for the envs listed in ``envs``."""
    envs = np.arange(len(x)) if envs is None else np.asarray(envs)
    if len(envs) == 0:
        return
    sub = [rngs[e] for e in envs]
    px, py, pz, d, keep = _scan_arrays(truth_heights[envs], truth_geometry.resolution,
                                       truth_geometry.origin, x[envs], y[envs],
                                       z[envs] + model.sensor_height, yaw[envs], model, sub)
    if model.pose_noise > 0:
        # hits are registered relative to the believed (perturbed) pose
        px = px + np.array([r.normal(0.0, model.pose_noise) for r in sub])[:, None]
        py = py + np.array([r.normal(0.0, model.pose_noise) for r in sub])[:, None]
    env_idx = np.broadcast_to(envs[:, None], px.shape)
    ci, cj, inside = _cells(emap.geometry, px, py)
    m = keep & inside
    _fuse(emap, env_idx[m], ci[m], cj[m], pz[m], model.alpha_d * d[m] ** 2)


def sample_map_scan_dots(emap: ElevationMap, base_pose, spacing: float, grid_noise_sigma: float,
                         rng) -> ScanDots:
    """Scan dots read from the estimated map plus per-dot Gaussian noise.
    ``base_pose`` is (x, y, yaw, z)."""
    x, y, yaw, z = base_pose
    px, py = scan_points(x, y, yaw, spacing)
    g = emap.geometry
    vals = bilinear(emap.h, g.resolution, g.origin, px, py) - z
    if grid_noise_sigma > 0:
        vals = vals + rng.normal(0.0, grid_noise_sigma, size=vals.shape)
    return ScanDots(np.asarray(vals, dtype=np.float64), spacing, (x, y, yaw))


def map_scan_batch(emap: ElevationMap, x, y, yaw, z, spacing, grid_noise_sigma, rngs) -> np.ndarray:
    px, py = scan_points(x, y, yaw, spacing)
    g = emap.geometry
    vals = bilinear(emap.h, g.resolution, g.origin, px, py) - np.asarray(z)[:, None]
    if grid_noise_sigma > 0:
        vals = vals + np.stack([r.normal(0.0, grid_noise_sigma, size=vals.shape[1]) for r in rngs])
    return vals
