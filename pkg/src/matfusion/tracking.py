"""Depth back-projection, normal estimation and coarse-to-fine point-to-plane ICP."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_depth
from .exceptions import InsufficientCorrespondences, SingularSystem
from .geometry import CameraIntrinsics, RigidPose, nearest_rotation, pixel_rays, skew

log = logging.getLogger(__name__)

PYRAMID_SPREAD = 0.05
SINGULAR_COND = 1e10


@dataclass
class PointMap:
    """Per-pixel 3-vectors (vertices or normals) with a validity mask."""

    points: np.ndarray  # (H, W, 3), zeros where invalid
    valid: np.ndarray   # (H, W) bool

    @property
    def shape(self):
        return self.valid.shape


VertexMap = PointMap
NormalMap = PointMap


@dataclass
class SurfaceMaps:
    """Vertex and normal map pair for one pyramid level."""

    vertices: np.ndarray
    normals: np.ndarray
    valid: np.ndarray
    intrinsics: CameraIntrinsics

    @classmethod
    def from_maps(cls, vmap: PointMap, nmap: PointMap, intrinsics: CameraIntrinsics) -> SurfaceMaps:
        valid = vmap.valid & nmap.valid
        return cls(vmap.points, nmap.points, valid, intrinsics)


def backproject(depth: np.ndarray, intrinsics: CameraIntrinsics) -> PointMap:
    depth = check_depth(depth, intrinsics.shape)
    valid = np.isfinite(depth) & (depth > 0)
    d = np.where(valid, depth, 0.0)
    pts = pixel_rays(intrinsics) * d[..., None]
    return PointMap(pts, valid)


def compute_normals(vmap: PointMap, camera_center=None) -> PointMap:
    """Central-difference normals oriented towards the camera.

    ``camera_center`` is the viewpoint in the frame of ``vmap`` (origin for
    camera-frame maps).
    """
    p, ok = vmap.points, vmap.valid
    h, w = ok.shape
    normals = np.zeros_like(p)
    valid = np.zeros_like(ok)
    if h < 3 or w < 3:
        return PointMap(normals, valid)
    dx = p[1:-1, 2:] - p[1:-1, :-2]
    dy = p[2:, 1:-1] - p[:-2, 1:-1]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    inner = (ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1] & ok[:-2, 1:-1]
             & (norm >= 1e-12))
    n = np.where(inner[..., None], n / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    center = np.zeros(3) if camera_center is None else np.asarray(camera_center, dtype=float)
    view = p[1:-1, 1:-1] - center
    flip = np.sum(n * view, axis=-1) > 0
    n[flip] *= -1
    normals[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = inner
    return PointMap(normals, valid)


def _downsample_depth(depth: np.ndarray) -> np.ndarray:
    h, w = depth.shape
    blocks = depth.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(h // 2, w // 2, 4)
    ok = blocks > 0
    vals = np.where(ok, blocks, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-invalid blocks
        med = np.nanmedian(vals, axis=-1)
    keep = ok & (np.abs(blocks - med[..., None]) < PYRAMID_SPREAD)
    cnt = keep.sum(axis=-1)
    total = np.where(keep, blocks, 0.0).sum(axis=-1)
    return np.where(cnt > 0, total / np.maximum(cnt, 1), 0.0)


def build_pyramid(depth: np.ndarray, intrinsics: CameraIntrinsics, levels: int):
    """Depth pyramid, finest first.

    Each coarse pixel averages the valid pixels of its 2x2 block lying within
    5 cm of the block median; blocks with no such pixel become invalid.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    depth = np.asarray(depth, dtype=float)
    f = 2 ** (levels - 1)
    if depth.shape[0] % f or depth.shape[1] % f:
        raise ValueError(f"resolution {depth.shape} not divisible by {f} for {levels} levels")
    out = [(depth, intrinsics)]
    for _ in range(levels - 1):
        d, k = out[-1]
        out.append((_downsample_depth(d), k.scaled(0.5)))
    return out


def frame_pyramid(depth: np.ndarray, intrinsics: CameraIntrinsics, levels: int) -> list[SurfaceMaps]:
    """Camera-frame vertex/normal maps for every pyramid level, finest first."""
    maps = []
    for d, k in build_pyramid(depth, intrinsics, levels):
        v = backproject(d, k)
        maps.append(SurfaceMaps.from_maps(v, compute_normals(v), k))
    return maps


@dataclass
class IcpConfig:
    pyramid_levels: int = 3
    iterations_per_level: tuple = (10, 5, 4)   # coarsest first
    max_correspondence_dist: float = 0.1
    max_normal_angle: float = 20.0             # degrees
    min_valid_correspondences: int = 100

    def __post_init__(self):
        self.iterations_per_level = tuple(int(i) for i in self.iterations_per_level)
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if len(self.iterations_per_level) != self.pyramid_levels:
            raise ValueError("iterations_per_level needs one entry per pyramid level")
        if min(self.iterations_per_level) < 0:
            raise ValueError("iteration counts must be non-negative")
        if not (self.max_correspondence_dist > 0 and self.max_normal_angle > 0
                and self.min_valid_correspondences > 0):
            raise ValueError("ICP thresholds must be positive")


@dataclass
class IcpResult:
    pose: RigidPose
    final_residual_rms: float
    correspondence_count: int
    converged: bool
    residual_history: list = field(default_factory=list)  # per level, coarsest first


def point_to_plane_system(src: np.ndarray, dst: np.ndarray, normals: np.ndarray):
    """Normal equations ``A x = b`` for the linearized point-to-plane error.

    ``x = (wx, wy, wz, tx, ty, tz)`` is a small rotation (applied as
    ``I + [w]x``) followed by a translation, acting on ``src``.
    """
    jac = np.hstack([np.cross(src, normals), normals])
    r = np.einsum("ij,ij->i", src - dst, normals)
    return jac.T @ jac, -jac.T @ r


def solve_point_to_plane(src, dst, normals) -> np.ndarray:
    a, b = point_to_plane_system(src, dst, normals)
    eig = np.linalg.eigvalsh(a)
    if not np.all(np.isfinite(eig)) or eig[0] <= eig[-1] / SINGULAR_COND:
        raise SingularSystem(f"point-to-plane system is degenerate (eigenvalues {eig[0]:.3g}..{eig[-1]:.3g})")
    return np.linalg.solve(a, b)


def _apply_increment(pose: RigidPose, x: np.ndarray) -> RigidPose:
    r_inc = nearest_rotation(np.eye(3) + skew(x[:3]))
    return RigidPose(nearest_rotation(r_inc @ pose.rotation), r_inc @ pose.translation + x[3:])


class _Associator:
    """Projective data association of one frame level against model maps."""

    def __init__(self, frame: SurfaceMaps, model: SurfaceMaps, model_pose: RigidPose, cfg: IcpConfig):
        self.p = frame.vertices[frame.valid]
        self.n = frame.normals[frame.valid]
        self.model = model
        self.world_to_model = model_pose.inverse()
        self.max_dist = cfg.max_correspondence_dist
        self.min_cos = np.cos(np.radians(cfg.max_normal_angle))

    def __call__(self, pose: RigidPose):
        src = self.p @ pose.rotation.T + pose.translation
        n_src = self.n @ pose.rotation.T
        k = self.model.intrinsics
        pm = self.world_to_model.apply(src)
        z = pm[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(k.fx * pm[:, 0] / z + k.cx)
            v = np.rint(k.fy * pm[:, 1] / z + k.cy)
        ok = (z > 0) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
        ui = np.where(ok, u, 0).astype(int)
        vi = np.where(ok, v, 0).astype(int)
        ok &= self.model.valid[vi, ui]
        q = self.model.vertices[vi, ui]
        nq = self.model.normals[vi, ui]
        ok &= np.linalg.norm(src - q, axis=1) <= self.max_dist
        ok &= np.einsum("ij,ij->i", n_src, nq) >= self.min_cos
        src, q, nq = src[ok], q[ok], nq[ok]
        if len(src):
            rms = float(np.sqrt(np.mean(np.einsum("ij,ij->i", src - q, nq) ** 2)))
        else:
            rms = np.inf
        return src, q, nq, rms


def icp_align(frame_maps: list[SurfaceMaps], model_maps: list[SurfaceMaps], init: RigidPose,
              cfg: IcpConfig | None = None, model_pose: RigidPose | None = None) -> IcpResult:
    """Estimate the camera-to-world pose of a frame against model predictions.

    ``frame_maps`` hold camera-frame vertices/normals, ``model_maps`` world-frame
    vertices/normals rendered from ``model_pose`` (defaults to ``init``). Both
    are ordered finest level first. A step that would raise the residual RMS is
    halved (up to four times) before the level is abandoned, so the RMS never
    increases within a level.
    """
    cfg = cfg or IcpConfig()
    if len(frame_maps) != len(model_maps) or len(frame_maps) < cfg.pyramid_levels:
        raise ValueError("frame and model pyramids need the configured number of levels")
    for f, m in zip(frame_maps, model_maps):
        if f.valid.shape != m.valid.shape:
            raise ValueError(f"pyramid level shape mismatch {f.valid.shape} vs {m.valid.shape}")
    model_pose = init if model_pose is None else model_pose
    pose = init
    history = []
    count, rms, first_rms = 0, np.inf, np.inf
    for level in reversed(range(cfg.pyramid_levels)):
        iters = cfg.iterations_per_level[cfg.pyramid_levels - 1 - level]
        assoc = _Associator(frame_maps[level], model_maps[level], model_pose, cfg)
        src, q, nq, rms = assoc(pose)
        if len(src) < cfg.min_valid_correspondences:
            raise InsufficientCorrespondences(
                f"level {level}: {len(src)} correspondences < {cfg.min_valid_correspondences}")
        first_rms = rms
        settled = False
        level_hist = [rms]
        for _ in range(iters):
            if rms < 1e-12:
                settled = True
                break
            x = solve_point_to_plane(src, q, nq)
            accepted = False
            for _half in range(5):
                trial = _apply_increment(pose, x)
                t_src, t_q, t_nq, t_rms = assoc(trial)
                if len(t_src) >= cfg.min_valid_correspondences and t_rms <= rms:
                    accepted = True
                    break
                x = 0.5 * x
            if not accepted:
                break
            pose, src, q, nq, rms = trial, t_src, t_q, t_nq, t_rms
            level_hist.append(rms)
            if np.linalg.norm(x) < 1e-10:
                settled = True
                break
        history.append(level_hist)
        count = len(src)
    converged = count >= cfg.min_valid_correspondences and (rms < first_rms or rms < 1e-6 or settled)
    log.debug("icp: rms %.3g count %d converged %s", rms, count, converged)
    return IcpResult(pose, float(rms), int(count), bool(converged), history)
