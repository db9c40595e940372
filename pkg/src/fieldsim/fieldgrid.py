"""Multi-resolution hashed feature grids and the occupancy grid for free-space skipping.

Each grid level is a table of F-dimensional features indexed either densely
(row-major, when every corner of the level fits) or through the usual
spatial-hash primes. Queries trilinearly blend the 8 cell corners and
concatenate across levels. The occupancy grid is a voxel bitmask built from
aggregated static LiDAR points, dilated with a cube (Chebyshev) structuring
element, and queried by the stratified ray sampler to skip empty space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .geometry import Aabb

_HASH_PRIMES = (1, 2654435761, 805459861)

_CORNER_OFFSETS = np.array(
    [[cx, cy, cz] for cx in (0, 1) for cy in (0, 1) for cz in (0, 1)],
    dtype=np.int64)
_CIX, _CIY, _CIZ = (_CORNER_OFFSETS[:, k] for k in range(3))


@dataclass
class HashGridConfig:
    levels: int = 4
    base_resolution: int = 16
    per_level_scale: float = 2.0
    table_size: int = 1 << 16
    feature_dim: int = 2
    domain: Aabb = field(default_factory=lambda: Aabb(-np.ones(3), np.ones(3)))

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.per_level_scale <= 1.0:
            raise ValueError("per_level_scale must be > 1")

    def resolution(self, level: int) -> int:
        """Corners per axis at the given level."""
        return int(np.floor(self.base_resolution * self.per_level_scale ** level))

    @property
    def out_dim(self) -> int:
        return self.levels * self.feature_dim


def hash_index(cells: np.ndarray, level: int, cfg: HashGridConfig) -> np.ndarray:
    """Map integer corner coords (..., 3) to table rows for one level.

    Levels whose full corner lattice fits in the table get the injective
    row-major index; finer levels use the xor-of-primes spatial hash.
    """
    if level >= cfg.levels:
        raise ValueError(f"level {level} out of range (L={cfg.levels})")
    cells = np.asarray(cells, dtype=np.int64)
    res = cfg.resolution(level)
    if res ** 3 <= cfg.table_size:
        return (cells[..., 0] * res + cells[..., 1]) * res + cells[..., 2]
    c = cells.astype(np.uint32)
    h = (c[..., 0] * np.uint32(_HASH_PRIMES[0])
         ^ c[..., 1] * np.uint32(_HASH_PRIMES[1])
         ^ c[..., 2] * np.uint32(_HASH_PRIMES[2]))
    return (h & np.uint32(cfg.table_size - 1)).astype(np.int64)


def _corner_ids(cell: np.ndarray, level: int, cfg: HashGridConfig) -> np.ndarray:
    """Table rows for all 8 corners of each cell, (N, 8).

    Matches hash_index over the expanded corner lattice without
    materializing the (N, 8, 3) coordinate array: the row-major index is
    affine in the offset, and the xor hash only needs the two per-axis
    products.
    """
    res = cfg.resolution(level)
    if res ** 3 <= cfg.table_size:
        base = (cell[:, 0] * res + cell[:, 1]) * res + cell[:, 2]
        lin = (_CIX * res + _CIY) * res + _CIZ
        return base[:, None] + lin[None, :]
    two = np.arange(2, dtype=np.uint32)
    c = cell.astype(np.uint32)
    hx = (c[:, 0:1] + two) * np.uint32(_HASH_PRIMES[0])
    hy = (c[:, 1:2] + two) * np.uint32(_HASH_PRIMES[1])
    hz = (c[:, 2:3] + two) * np.uint32(_HASH_PRIMES[2])
    h = hx[:, _CIX] ^ hy[:, _CIY] ^ hz[:, _CIZ]
    return (h & np.uint32(cfg.table_size - 1)).astype(np.int64)


class MultiResGrid:
    """Trainable feature tables, one per level, over an axis-aligned domain."""

    def __init__(self, cfg: HashGridConfig, rng: np.random.Generator,
                 name: str = "grid"):
        self.cfg = cfg
        self.name = name
        self.tables = [
            rng.uniform(-1e-4, 1e-4, size=(cfg.table_size, cfg.feature_dim))
            for _ in range(cfg.levels)]

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.tables.{l}": t for l, t in enumerate(self.tables)}

    def _level_coords(self, x: np.ndarray, level: int):
        """Clamped integer cell plus fractional position for one level."""
        cfg = self.cfg
        res = cfg.resolution(level)
        lo = np.asarray(cfg.domain.min, dtype=x.dtype)
        scale = np.asarray((res - 1.0) / (cfg.domain.max - cfg.domain.min),
                           dtype=x.dtype)
        u = (x - lo) * scale
        cell = np.minimum(np.floor(u), res - 2).astype(np.int64)
        cell = np.maximum(cell, 0)
        return cell, u - cell.astype(u.dtype), res

    def query(self, x: np.ndarray, p: dict | None = None,
              x_t: "ad.Tensor | None" = None) -> ad.Tensor:
        """Interpolated features (N, L*F) at points x inside the domain.

        p maps parameter names to tape tensors during training. When x_t is
        given (a tape tensor holding the same coordinates as x), the
        trilinear weights are built on the tape too, so gradients reach the
        query positions — needed when poses upstream are being optimized.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 3:
            raise ValueError("query expects points shaped (N, 3)")
        dom = self.cfg.domain
        eps = 1e-9 * np.maximum(1.0, np.abs(dom.max - dom.min))
        if np.any(x < dom.min - eps) or np.any(x > dom.max + eps):
            raise ValueError(f"{self.name}: query point outside grid domain")
        # coordinate math in the active tape dtype (float32 while training)
        x = x.astype(ad.default_dtype(), copy=False)
        p = p or {}
        per_level = []
        for level in range(self.cfg.levels):
            cell, frac, res = self._level_coords(x, level)
            ids = _corner_ids(cell, level, self.cfg)
            weights = self._corner_weights(x, frac, level, x_t)
            table_l = p.get(f"{self.name}.tables.{level}")
            if table_l is None:
                table_l = self.tables[level]
            per_level.append(ad.trilinear_gather(table_l, ids, weights))
        return ad.concat(per_level, axis=1)

    def _corner_weights(self, x, frac, level, x_t):
        if x_t is None:
            f = frac
            wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
            wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
            wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
            w = wx[:, _CIX] * wy[:, _CIY]
            w *= wz[:, _CIZ]
            return ad.constant(w)
        # rebuild the fractional coordinate on the tape: frac = x*s - (lo*s + cell),
        # with the (piecewise-constant) cell taken from the numeric pass
        cfg = self.cfg
        res = cfg.resolution(level)
        lo, hi = cfg.domain.min, cfg.domain.max
        scale = (res - 1) / (hi - lo)
        n = x.shape[0]
        cell = np.maximum(np.minimum(np.floor((x - lo) * scale), res - 2), 0)
        shift = np.tile(lo * scale, (n, 1)) + cell
        u_t = ad.mul(x_t, ad.constant(np.tile(scale, (n, 1))))
        f_t = ad.sub(u_t, ad.constant(shift))
        one = ad.constant(np.ones((n, 1)))
        axes = []
        for k in range(3):
            fk = ad.slice_(f_t, (slice(None), slice(k, k + 1)))
            axes.append((ad.sub(one, fk), fk))
        w = []
        for cx, cy, cz in _CORNER_OFFSETS:
            w.append(ad.mul(ad.mul(axes[0][cx], axes[1][cy]), axes[2][cz]))
        return ad.concat(w, axis=1)


@dataclass
class OccupancyGrid:
    resolution: np.ndarray          # voxels per axis
    voxel_size: float
    origin: np.ndarray
    occupied: np.ndarray            # bool (nx, ny, nz)
    empty_input: bool = False

    def query(self, x: np.ndarray) -> np.ndarray:
        """True where points land in occupied voxels; outside counts as free."""
        x = np.asarray(x)
        idx = np.floor((x - self.origin) / self.voxel_size).astype(np.int64)
        inside = np.logical_and(idx >= 0, idx < self.resolution).all(axis=-1)
        out = np.zeros(x.shape[:-1], dtype=bool)
        if np.any(inside):
            ii = idx[inside]
            out[inside] = self.occupied[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out

    def to_bitset(self) -> tuple[dict, np.ndarray]:
        header = {
            "resolution": [int(v) for v in self.resolution],
            "origin": [float(v) for v in self.origin],
            "voxel_size": float(self.voxel_size),
        }
        return header, np.packbits(self.occupied.reshape(-1))

    @staticmethod
    def from_bitset(header: dict, bits: np.ndarray) -> "OccupancyGrid":
        res = np.asarray(header["resolution"], dtype=np.int64)
        flat = np.unpackbits(bits)[: int(np.prod(res))]
        return OccupancyGrid(res, float(header["voxel_size"]),
                             np.asarray(header["origin"], dtype=np.float64),
                             flat.reshape(tuple(res)).astype(bool))


def build_occupancy(points: np.ndarray, roi: Aabb, voxel_size: float = 0.25,
                    dilation_radius: int = 2) -> OccupancyGrid:
    """Voxelize static points over the ROI and dilate by a Chebyshev radius."""
    res = np.ceil((roi.max - roi.min) / voxel_size).astype(np.int64)
    res = np.maximum(res, 1)
    occ = np.zeros(tuple(res), dtype=bool)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return OccupancyGrid(res, voxel_size, roi.min.copy(), occ,
                             empty_input=True)
    idx = np.floor((points - roi.min) / voxel_size).astype(np.int64)
    idx = np.clip(idx, 0, res - 1)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    if dilation_radius > 0:
        size = 2 * dilation_radius + 1
        occ = ndimage.binary_dilation(occ, structure=np.ones((size,) * 3))
    return OccupancyGrid(res, voxel_size, roi.min.copy(), occ)


def stratified_offsets(n_total: int, rng: np.random.Generator | None):
    """Per-sample jitter in [0,1); fixed midpoints when no generator is given."""
    if rng is None:
        return np.full(n_total, 0.5)
    return rng.random(n_total)


def ray_skip_samples(occ: OccupancyGrid, origin, direction, t_range,
                     step: float, rng: np.random.Generator | None = None):
    """Stratified t values along one ray, keeping only occupied voxels."""
    t0, t1 = t_range
    n = int(np.floor((t1 - t0) / step))
    if n <= 0:
        return np.empty(0)
    ts = t0 + (np.arange(n) + stratified_offsets(n, rng)) * step
    pts = np.asarray(origin)[None, :] + ts[:, None] * np.asarray(direction)[None, :]
    return ts[occ.query(pts)]


def ray_skip_samples_batch(occ: OccupancyGrid | None, origins, dirs,
                           t0, t1, step: float,
                           rng: np.random.Generator | None = None,
                           max_samples: int = 256):
    """Vectorized free-space-skipping sampler for a batch of rays.

    Returns flat sample ts, their positions, and the per-ray sample counts.
    Rays whose interval would exceed max_samples get a coarser step so the
    cap holds. With occ None every stratified sample is kept.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    span = np.maximum(t1 - t0, 0.0)
    steps = np.maximum(step, span / max_samples)
    counts = np.floor(span / steps).astype(np.int64)
    counts = np.minimum(counts, max_samples)
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0), np.empty((0, 3)),
                np.zeros(len(counts), dtype=np.int64))
    ray_of = np.repeat(np.arange(len(counts)), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    local = np.arange(total) - np.repeat(starts, counts)
    ts = (t0[ray_of] + (local + stratified_offsets(total, rng))
          * steps[ray_of])
    pts = origins[ray_of] + ts[:, None] * dirs[ray_of]
    if occ is not None:
        keep = occ.query(pts)
        ts, pts, ray_of = ts[keep], pts[keep], ray_of[keep]
        counts = np.bincount(ray_of, minlength=len(counts)).astype(np.int64)
    return ts, pts, counts
