"""Analytic scenes, an RGB-D ray-cast renderer and a depth sensor noise model."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, RigidPose, look_at, pixel_rays, rotation_angle
from .materials import N_CLASSES, UNKNOWN, material_id, material_name

MIN_DEPTH = 0.1
MAX_DEPTH = 10.0

MAX_STEP_ROTATION_DEG = 15.0
MAX_STEP_TRANSLATION = 0.1


def _check_material(mid: int):
    if not 0 <= mid < N_CLASSES:
        raise ValueError(f"material id {mid} out of range [0, {N_CLASSES})")


def _check_color(color) -> np.ndarray:
    c = np.asarray(color, dtype=float).reshape(3)
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError(f"color channels must lie in [0, 1], got {c}")
    return c


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    material: int
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    kind = "box"

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(3)
        hi = np.asarray(self.hi, dtype=float).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(hi > lo)):
            raise ValueError("box needs finite corners with max > min on every axis")
        _check_material(self.material)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "color", _check_color(self.color))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        # slab method; dirs (..., 3), returns first positive hit parameter or inf
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (self.lo - origin) * inv
            t1 = (self.hi - origin) * inv
        tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
        tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
        hit = tmax >= np.maximum(tmin, 0.0)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where(hit & (t > 0), t, np.inf)

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance to the box surface."""
        c = (self.lo + self.hi) / 2
        h = (self.hi - self.lo) / 2
        q = np.abs(points - c) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return np.abs(outside + inside)

    def bounds(self):
        return self.lo, self.hi

    def to_dict(self) -> dict:
        return {"kind": "box", "min": self.lo.tolist(), "max": self.hi.tolist(),
                "material": material_name(self.material), "color": self.color.tolist()}


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    material: int
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    kind = "sphere"

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        if not np.all(np.isfinite(c)) or not (np.isfinite(self.radius) and self.radius > 0):
            raise ValueError("sphere needs a finite center and positive radius")
        _check_material(self.material)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "color", _check_color(self.color))

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = np.sum(dirs * dirs, axis=-1)
        b = np.sum(dirs * oc, axis=-1)
        c = oc @ oc - self.radius ** 2
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near = (-b - sq) / a
        t_far = (-b + sq) / a
        t = np.where(t_near > 0, t_near, t_far)
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def distance(self, points):
        return np.abs(np.linalg.norm(points - self.center, axis=-1) - self.radius)

    def bounds(self):
        return self.center - self.radius, self.center + self.radius

    def to_dict(self):
        return {"kind": "sphere", "center": self.center.tolist(), "radius": self.radius,
                "material": material_name(self.material), "color": self.color.tolist()}


@dataclass(frozen=True)
class Plane:
    """Plane ``{x : normal . x = offset}`` bounding the half-space ``normal . x <= offset``."""

    normal: np.ndarray
    offset: float
    material: int
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    kind = "plane"

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        if not np.all(np.isfinite(n)) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must have unit norm (within 1e-9)")
        if not np.isfinite(self.offset):
            raise ValueError("plane offset must be finite")
        _check_material(self.material)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "color", _check_color(self.color))

    def intersect(self, origin, dirs):
        # two-sided: the boundary {normal . x = offset} is hit from either side
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origin @ self.normal) / denom
        return np.where((t > 0) & np.isfinite(t), t, np.inf)

    def distance(self, points):
        return np.abs(points @ self.normal - self.offset)

    def bounds(self):
        return None

    def to_dict(self):
        return {"kind": "plane", "normal": self.normal.tolist(), "offset": self.offset,
                "material": material_name(self.material), "color": self.color.tolist()}


Primitive = Box | Sphere | Plane


@dataclass(frozen=True)
class Scene:
    primitives: tuple

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise ValueError("scene must contain at least one primitive")
        object.__setattr__(self, "primitives", prims)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Bounds of the finite primitives (planes are unbounded and skipped)."""
        boxes = [p.bounds() for p in self.primitives if p.bounds() is not None]
        if not boxes:
            return None
        return (np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0))

    def surface_distance(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distance from each point to the nearest primitive surface, and that primitive's index."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        d = np.stack([p.distance(points) for p in self.primitives], axis=0)
        idx = np.argmin(d, axis=0)
        return d[idx, np.arange(points.shape[0])], idx

    def material_at(self, points: np.ndarray) -> np.ndarray:
        _, idx = self.surface_distance(points)
        mats = np.array([p.material for p in self.primitives], dtype=np.uint8)
        return mats[idx]

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, doc: dict) -> Scene:
        prims = []
        for i, p in enumerate(doc["primitives"]):
            kind = p.get("kind")
            mat = material_id(p["material"])
            color = p.get("color", [0.5, 0.5, 0.5])
            if kind == "box":
                prims.append(Box(p["min"], p["max"], mat, color))
            elif kind == "sphere":
                prims.append(Sphere(p["center"], p["radius"], mat, color))
            elif kind == "plane":
                prims.append(Plane(p["normal"], p["offset"], mat, color))
            else:
                raise ValueError(f"primitive {i}: unknown kind {kind!r}")
        return cls(tuple(prims))


def load_scene(path: str | Path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def save_scene(scene: Scene, path: str | Path):
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2) + "\n")


def demo_scene() -> Scene:
    """Desk-scale three-primitive scene: wooden floor with a fabric and a glass ball.

    Balls touch the floor only at a single hidden point, so every visible
    surface point has an unambiguous material.
    """
    return Scene((
        Plane((0.0, 0.0, 1.0), 0.0, material_id("wood"), (0.55, 0.35, 0.2)),
        Sphere((-0.25, 0.2, 0.2), 0.2, material_id("fabric"), (0.2, 0.3, 0.8)),
        Sphere((0.25, -0.2, 0.2), 0.2, material_id("glass"), (0.85, 0.9, 0.95)),
    ))


@dataclass
class RgbdFrame:
    depth: np.ndarray        # (H, W) float64 metres, 0 = invalid
    color: np.ndarray        # (H, W, 3) float64 in [0, 1]
    true_labels: np.ndarray  # (H, W) uint8, 255 = no surface
    frame_index: int = 0

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


def render_frame(scene: Scene, intrinsics: CameraIntrinsics, pose: RigidPose,
                 frame_index: int = 0) -> RgbdFrame:
    """Ray-cast the scene; depth is camera-z of the nearest hit."""
    pose.check()
    rays_cam = pixel_rays(intrinsics)
    # z component of rays_cam is 1, so the ray parameter equals camera-z depth
    rays_world = rays_cam @ pose.rotation.T
    origin = pose.translation
    best = np.full(intrinsics.shape, np.inf)
    owner = np.full(intrinsics.shape, -1, dtype=int)
    for k, prim in enumerate(scene.primitives):
        t = prim.intersect(origin, rays_world)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = k
    valid = np.isfinite(best) & (best >= MIN_DEPTH) & (best <= MAX_DEPTH)
    depth = np.where(valid, best, 0.0)
    labels = np.full(intrinsics.shape, UNKNOWN, dtype=np.uint8)
    color = np.zeros(intrinsics.shape + (3,))
    mats = np.array([p.material for p in scene.primitives], dtype=np.uint8)
    cols = np.array([p.color for p in scene.primitives])
    labels[valid] = mats[owner[valid]]
    color[valid] = cols[owner[valid]]
    return RgbdFrame(depth, color, labels, frame_index)


@dataclass(frozen=True)
class SensorNoise:
    depth_sigma_base: float = 0.0
    depth_sigma_slope: float = 0.0
    dropout_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.depth_sigma_base, self.depth_sigma_slope, self.dropout_prob) < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.dropout_prob > 1:
            raise ValueError("dropout_prob must be <= 1")


def apply_sensor_noise(frame: RgbdFrame, noise: SensorNoise) -> RgbdFrame:
    """Gaussian depth noise with depth-proportional sigma plus random dropout.

    Perturbed depths leaving the sensor range are invalidated. Labels and
    color are passed through unchanged.
    """
    rng = np.random.default_rng([noise.seed, frame.frame_index])
    depth = frame.depth.copy()
    valid = depth > 0
    sigma = noise.depth_sigma_base + noise.depth_sigma_slope * depth
    eps = rng.standard_normal(depth.shape)
    drop = rng.random(depth.shape) < noise.dropout_prob
    if noise.depth_sigma_base > 0 or noise.depth_sigma_slope > 0:
        depth[valid] = depth[valid] + sigma[valid] * eps[valid]
    depth[drop] = 0.0
    depth[(depth < MIN_DEPTH) | (depth > MAX_DEPTH)] = 0.0
    return replace(frame, depth=depth)


def generate_orbit_trajectory(center, radius: float, height: float, n_frames: int,
                              arc: float = 2 * np.pi) -> list[RigidPose]:
    """Poses on a horizontal circle around ``center`` looking at it.

    Frame ``k`` sits at angle ``arc * k / n_frames`` measured from +x.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=float)
    poses = []
    for k in range(n_frames):
        a = arc * k / n_frames
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), height])
        poses.append(look_at(eye, center))
    return poses


def trajectory_violations(poses: list[RigidPose]) -> list[int]:
    """Indices ``k`` where the step ``k-1 -> k`` is too large to track."""
    bad = []
    for k in range(1, len(poses)):
        rel = poses[k - 1].inverse() @ poses[k]
        if (np.degrees(rotation_angle(rel.rotation)) >= MAX_STEP_ROTATION_DEG
                or np.linalg.norm(rel.translation) >= MAX_STEP_TRANSLATION):
            bad.append(k)
    return bad


def save_trajectory(poses: list[RigidPose], path: str | Path):
    mats = [p.matrix().tolist() for p in poses]
    Path(path).write_text(json.dumps(mats) + "\n")


def load_trajectory(path: str | Path) -> list[RigidPose]:
    mats = json.loads(Path(path).read_text())
    if not isinstance(mats, list) or not mats:
        raise ValueError(f"{path}: expected a non-empty list of 4x4 matrices")
    return [RigidPose.from_matrix(m).check() for m in mats]
