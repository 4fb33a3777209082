"""Truncated signed distance volume: integration, ray casting, surface extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from ._validation import check_depth
from .geometry import CameraIntrinsics, RigidPose
from .tracking import SurfaceMaps

SNAPSHOT_MAGIC = b"TSDF"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sII3ddd")  # magic, version, N, voxel_size, origin, truncation


@dataclass
class TsdfVolume:
    """Dense ``N^3`` grid of normalized TSDF values and integration weights.

    Arrays are indexed ``[x, y, z]``; voxel ``(i, j, k)`` is centred at
    ``origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``.
    """

    resolution: int
    voxel_size: float
    origin: np.ndarray
    truncation: float
    max_weight: float = 64.0
    tsdf: np.ndarray | None = None
    weight: np.ndarray | None = None

    def __post_init__(self):
        n = int(self.resolution)
        if n < 2:
            raise ValueError("resolution must be >= 2")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if self.truncation < 2 * self.voxel_size - 1e-12:
            raise ValueError("truncation must be at least two voxels")
        if not self.max_weight > 0:
            raise ValueError("max_weight must be positive")
        self.resolution = n
        self.voxel_size = float(self.voxel_size)
        self.truncation = float(self.truncation)
        self.max_weight = float(self.max_weight)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        if self.tsdf is None:
            self.tsdf = np.ones((n, n, n), dtype=np.float32)
        if self.weight is None:
            self.weight = np.zeros((n, n, n), dtype=np.float32)
        if self.tsdf.shape != (n, n, n) or self.weight.shape != (n, n, n):
            raise ValueError("tsdf/weight arrays must be N^3")

    @classmethod
    def for_scene(cls, scene, resolution: int = 128, margin: float = 0.5,
                  truncation_factor: float = 4.0, max_weight: float = 64.0) -> TsdfVolume:
        """Cubic volume covering the scene's finite primitives plus ``margin``."""
        bbox = scene.bounding_box()
        if bbox is None:
            lo, hi = np.full(3, -1.0), np.full(3, 1.0)
        else:
            lo, hi = bbox
        lo, hi = lo - margin, hi + margin
        size = float(np.max(hi - lo))
        vs = size / resolution
        origin = (lo + hi) / 2 - size / 2
        return cls(resolution, vs, origin, truncation_factor * vs, max_weight)

    def same_grid(self, other) -> bool:
        return (self.resolution == other.resolution and self.voxel_size == other.voxel_size
                and np.array_equal(self.origin, other.origin))

    def voxel_centers(self, index: np.ndarray) -> np.ndarray:
        """World coordinates of voxel centres for integer indices of shape (..., 3)."""
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.voxel_size

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        """Integer index of the voxel containing each point (may be out of range)."""
        return np.floor((np.asarray(points, dtype=float) - self.origin) / self.voxel_size).astype(np.intp)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + self.resolution * self.voxel_size

    def copy(self) -> TsdfVolume:
        return TsdfVolume(self.resolution, self.voxel_size, self.origin.copy(), self.truncation,
                          self.max_weight, self.tsdf.copy(), self.weight.copy())

    def touched(self) -> int:
        return int(np.count_nonzero(self.weight))


def integrate_measurement(tsdf, weight, d, max_weight):
    """Running-average update of one voxel with a normalized measurement ``d``."""
    new_t = (weight * tsdf + d) / (weight + 1.0)
    return new_t, np.minimum(weight + 1.0, max_weight)


def depth_edges(depth: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels whose 3x3 neighbourhood spans more than ``threshold`` in depth.

    Invalid neighbours count as discontinuities, so pixels next to dropouts
    are flagged too.
    """
    ok = depth > 0
    hi = maximum_filter(np.where(ok, depth, np.inf), size=3, mode="nearest")
    lo = minimum_filter(np.where(ok, depth, -np.inf), size=3, mode="nearest")
    return ~ok | ~(hi - lo <= threshold)


def integrate_frame(vol: TsdfVolume, depth: np.ndarray, pose: RigidPose,
                    intrinsics: CameraIntrinsics, edge_threshold: float | None = 0.1,
                    slab: int = 16) -> TsdfVolume:
    """Fuse one depth image in place (projective SDF, unit weight per frame).

    Voxels with ``sdf >= -tau`` are updated with ``clamp(sdf / tau, -1, 1)``.
    Measurements taken at depth discontinuities (see ``depth_edges``) are
    skipped: a voxel just inside an object silhouette otherwise picks up the
    background depth through nearest-pixel lookup and gets carved away.
    ``edge_threshold=None`` disables the check.
    """
    pose.check()
    depth = check_depth(depth, intrinsics.shape)
    n = vol.resolution
    tau = vol.truncation
    usable = depth > 0
    if edge_threshold is not None:
        usable &= ~depth_edges(depth, edge_threshold)
    w2c = pose.inverse()
    r, t = w2c.rotation, w2c.translation
    ax = [vol.origin[i] + (np.arange(n) + 0.5) * vol.voxel_size for i in range(3)]
    y, z = np.meshgrid(ax[1], ax[2], indexing="ij")
    for x0 in range(0, n, slab):
        xs = ax[0][x0:x0 + slab]
        # camera coords for voxels in this slab, shape (sx, n, n)
        pc = [r[i, 0] * xs[:, None, None] + (r[i, 1] * y + r[i, 2] * z + t[i])[None]
              for i in range(3)]
        zc = pc[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(intrinsics.fx * pc[0] / zc + intrinsics.cx)
            v = np.rint(intrinsics.fy * pc[1] / zc + intrinsics.cy)
        ok = (zc > 0) & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
        ui = np.where(ok, u, 0).astype(np.intp)
        vi = np.where(ok, v, 0).astype(np.intp)
        ok &= usable[vi, ui]
        sdf = depth[vi, ui] - zc
        ok &= sdf >= -tau
        if not ok.any():
            continue
        d = np.clip(sdf[ok] / tau, -1.0, 1.0)
        ts = vol.tsdf[x0:x0 + slab]
        ws = vol.weight[x0:x0 + slab]
        w_old = ws[ok].astype(float)
        new_t, new_w = integrate_measurement(ts[ok].astype(float), w_old, d, vol.max_weight)
        ts[ok] = np.clip(new_t, -1.0, 1.0)
        ws[ok] = new_w
    return vol


@numba.njit(cache=True)
def _sample(tsdf, weight, g0, g1, g2):
    """Trilinear TSDF at continuous grid coords; NaN unless all 8 corners observed."""
    n = tsdf.shape[0]
    i = int(np.floor(g0))
    j = int(np.floor(g1))
    k = int(np.floor(g2))
    if i < 0 or j < 0 or k < 0 or i + 1 >= n or j + 1 >= n or k + 1 >= n:
        return np.nan
    fx = g0 - i
    fy = g1 - j
    fz = g2 - k
    acc = 0.0
    for di in range(2):
        wx = fx if di else 1.0 - fx
        for dj in range(2):
            wy = fy if dj else 1.0 - fy
            for dk in range(2):
                if weight[i + di, j + dj, k + dk] <= 0:
                    return np.nan
                wz = fz if dk else 1.0 - fz
                acc += wx * wy * wz * tsdf[i + di, j + dj, k + dk]
    return acc


@numba.njit(cache=True)
def _gradient(tsdf, weight, g0, g1, g2, out):
    """Central-difference gradient (grid units, step one voxel); False if unobservable."""
    for a in range(3):
        p0 = g0 + (1.0 if a == 0 else 0.0)
        p1 = g1 + (1.0 if a == 1 else 0.0)
        p2 = g2 + (1.0 if a == 2 else 0.0)
        m0 = g0 - (1.0 if a == 0 else 0.0)
        m1 = g1 - (1.0 if a == 1 else 0.0)
        m2 = g2 - (1.0 if a == 2 else 0.0)
        fp = _sample(tsdf, weight, p0, p1, p2)
        fm = _sample(tsdf, weight, m0, m1, m2)
        if np.isnan(fp) or np.isnan(fm):
            return False
        out[a] = fp - fm
    nrm = np.sqrt(out[0] ** 2 + out[1] ** 2 + out[2] ** 2)
    if nrm < 1e-12:
        return False
    for a in range(3):
        out[a] /= nrm
    return True


@numba.njit(cache=True)
def _raycast_kernel(tsdf, weight, origin, vs, rot, cam, fx, fy, cx, cy, height, width,
                    vertices, normals, valid):
    n = tsdf.shape[0]
    lo = origin + 0.5 * vs
    hi = origin + (n - 0.5) * vs
    step = 0.5 * vs
    d = np.empty(3)
    grad = np.empty(3)
    for v in range(height):
        for u in range(width):
            dc0 = (u - cx) / fx
            dc1 = (v - cy) / fy
            nrm = np.sqrt(dc0 * dc0 + dc1 * dc1 + 1.0)
            for a in range(3):
                d[a] = (rot[a, 0] * dc0 + rot[a, 1] * dc1 + rot[a, 2]) / nrm
            t_near = 0.0
            t_far = np.inf
            hit_box = True
            for a in range(3):
                if abs(d[a]) < 1e-15:
                    if cam[a] < lo[a] or cam[a] > hi[a]:
                        hit_box = False
                else:
                    t0 = (lo[a] - cam[a]) / d[a]
                    t1 = (hi[a] - cam[a]) / d[a]
                    if t0 > t1:
                        t0, t1 = t1, t0
                    t_near = max(t_near, t0)
                    t_far = min(t_far, t1)
            if not hit_box or t_near > t_far:
                continue
            prev = np.nan
            t = t_near
            while t <= t_far:
                g0 = (cam[0] + t * d[0] - origin[0]) / vs - 0.5
                g1 = (cam[1] + t * d[1] - origin[1]) / vs - 0.5
                g2 = (cam[2] + t * d[2] - origin[2]) / vs - 0.5
                cur = _sample(tsdf, weight, g0, g1, g2)
                if not np.isnan(cur):
                    if not np.isnan(prev) and prev > 0 and cur < 0:
                        tc = t - step + step * prev / (prev - cur)
                        px = cam[0] + tc * d[0]
                        py = cam[1] + tc * d[1]
                        pz = cam[2] + tc * d[2]
                        ok = _gradient(tsdf, weight, (px - origin[0]) / vs - 0.5,
                                       (py - origin[1]) / vs - 0.5, (pz - origin[2]) / vs - 0.5, grad)
                        if ok:
                            vertices[v, u, 0] = px
                            vertices[v, u, 1] = py
                            vertices[v, u, 2] = pz
                            for a in range(3):
                                normals[v, u, a] = grad[a]
                            valid[v, u] = True
                        break
                    if cur < 0:
                        # entered a surface from behind or unobserved space
                        break
                prev = cur
                t += step


def raycast_surface(vol: TsdfVolume, pose: RigidPose, intrinsics: CameraIntrinsics) -> SurfaceMaps:
    """Predict world-frame vertex/normal maps by marching camera rays through the volume."""
    h, w = intrinsics.shape
    vertices = np.zeros((h, w, 3))
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    _raycast_kernel(vol.tsdf, vol.weight, vol.origin, vol.voxel_size, pose.rotation.copy(),
                    pose.translation.copy(), intrinsics.fx, intrinsics.fy, intrinsics.cx,
                    intrinsics.cy, h, w, vertices, normals, valid)
    return SurfaceMaps(vertices, normals, valid, intrinsics)


def predicted_depth(maps: SurfaceMaps, pose: RigidPose) -> np.ndarray:
    """Camera-z depth of ray-cast vertices (0 where invalid)."""
    z = (maps.vertices - pose.translation) @ pose.rotation[:, 2]
    return np.where(maps.valid, z, 0.0)


def model_pyramid(vol: TsdfVolume, pose: RigidPose, intrinsics: CameraIntrinsics,
                  levels: int) -> list[SurfaceMaps]:
    """Ray-cast predictions at each pyramid resolution, finest first."""
    out = []
    k = intrinsics
    for _ in range(levels):
        out.append(raycast_surface(vol, pose, k))
        k = k.scaled(0.5)
    return out


@numba.njit(cache=True)
def _normals_at(tsdf, weight, grid_pts, out, ok):
    g = np.empty(3)
    for m in range(grid_pts.shape[0]):
        ok[m] = _gradient(tsdf, weight, grid_pts[m, 0], grid_pts[m, 1], grid_pts[m, 2], g)
        if ok[m]:
            out[m, 0] = g[0]
            out[m, 1] = g[1]
            out[m, 2] = g[2]


@dataclass
class SurfacePointCloud:
    positions: np.ndarray  # (M, 3)
    normals: np.ndarray    # (M, 3)

    def __len__(self):
        return self.positions.shape[0]


def extract_surface_points(vol: TsdfVolume) -> SurfacePointCloud:
    """Zero crossings on every observed, untruncated axis-aligned voxel edge."""
    t = vol.tsdf.astype(float)
    w = vol.weight
    pos_list = []
    n = vol.resolution
    for a in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a] = slice(0, n - 1)
        hi[a] = slice(1, n)
        ta, tb = t[tuple(lo)], t[tuple(hi)]
        mask = ((w[tuple(lo)] > 0) & (w[tuple(hi)] > 0) & ((ta >= 0) != (tb >= 0))
                & (np.abs(ta) < 1) & (np.abs(tb) < 1))
        idx = np.argwhere(mask).astype(float)
        frac = ta[mask] / (ta[mask] - tb[mask])
        idx[:, a] += frac
        pos_list.append(idx)
    grid = np.concatenate(pos_list) if pos_list else np.zeros((0, 3))
    normals = np.zeros_like(grid)
    ok = np.zeros(grid.shape[0], dtype=bool)
    if grid.shape[0]:
        _normals_at(vol.tsdf, vol.weight, grid, normals, ok)
    positions = vol.origin + (grid[ok] + 0.5) * vol.voxel_size
    return SurfacePointCloud(positions, normals[ok])


def save_volume(vol: TsdfVolume, path: str | Path):
    n = vol.resolution
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, n, vol.voxel_size,
                          *vol.origin.tolist(), vol.truncation)
    rec = np.empty(n ** 3, dtype="<f4,<f4")
    rec["f0"] = vol.tsdf.ravel(order="F")
    rec["f1"] = vol.weight.ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_volume(path: str | Path, max_weight: float = 64.0) -> TsdfVolume:
    data = Path(path).read_bytes()
    magic, version, n, vs, ox, oy, oz, tau = _HEADER.unpack_from(data, 0)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a TSDF snapshot")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    off = _HEADER.size
    if len(data) != off + 8 * n ** 3:
        raise ValueError(f"{path}: truncated snapshot")
    rec = np.frombuffer(data, dtype="<f4,<f4", count=n ** 3, offset=off)
    tsdf = rec["f0"].astype(np.float32).reshape((n, n, n), order="F").copy()
    weight = rec["f1"].astype(np.float32).reshape((n, n, n), order="F").copy()
    return TsdfVolume(n, vs, np.array([ox, oy, oz]), tau, max_weight, tsdf, weight)
