"""Per-voxel Bayesian fusion of 2-D material probabilities."""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_depth
from .exceptions import GridMismatch
from .fusion import SurfacePointCloud, TsdfVolume
from .geometry import CameraIntrinsics, RigidPose
from .materials import N_CLASSES, UNKNOWN
from .semantics import ProbabilityMap
from .tracking import backproject

EPS = 1e-6
LVOL_MAGIC = b"LVOL"
LVOL_VERSION = 1
_HEADER = struct.Struct("<4sII3dd")  # magic, version, N, origin, voxel_size
_RECORD = np.dtype([("acc", "<f4", (N_CLASSES,)), ("count", "<u4")])
# 26-neighbourhood, fixed order used to break count ties
NEIGHBORS = np.array([d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)])


@dataclass
class LabelVolume:
    """Log-likelihood accumulators on the TSDF grid.

    Only observed voxels are stored: ``keys`` are sorted flat voxel ids
    (``i + N * (j + N * k)``), ``acc`` their 23-vectors and ``count`` the
    number of observations.
    """

    resolution: int
    voxel_size: float
    origin: np.ndarray
    keys: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    acc: np.ndarray = field(default_factory=lambda: np.zeros((0, N_CLASSES)))
    count: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    skipped: int = 0  # pixels that fell outside the grid

    def __post_init__(self):
        self.resolution = int(self.resolution)
        self.voxel_size = float(self.voxel_size)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)

    @classmethod
    def for_volume(cls, vol: TsdfVolume) -> LabelVolume:
        return cls(vol.resolution, vol.voxel_size, vol.origin.copy())

    def same_grid(self, other) -> bool:
        return (self.resolution == other.resolution and self.voxel_size == other.voxel_size
                and np.array_equal(self.origin, other.origin))

    def flat_index(self, ijk: np.ndarray) -> np.ndarray:
        n = self.resolution
        ijk = np.asarray(ijk, dtype=np.int64)
        return ijk[..., 0] + n * (ijk[..., 1] + n * ijk[..., 2])

    def lookup(self, flat: np.ndarray) -> np.ndarray:
        """Row in ``acc`` for each flat id, -1 if never observed."""
        flat = np.asarray(flat, dtype=np.int64)
        if len(self.keys) == 0:
            return np.full(flat.shape, -1)
        pos = np.minimum(np.searchsorted(self.keys, flat), len(self.keys) - 1)
        return np.where(self.keys[pos] == flat, pos, -1)

    def add(self, flat: np.ndarray, contrib: np.ndarray, counts: np.ndarray):
        """Add per-voxel contributions (``flat`` unique and sorted)."""
        rows = self.lookup(flat)
        old = rows >= 0
        self.acc[rows[old]] += contrib[old]
        self.count[rows[old]] += counts[old]
        if np.any(~old):
            keys = np.concatenate([self.keys, flat[~old]])
            order = np.argsort(keys, kind="stable")
            self.keys = keys[order]
            self.acc = np.concatenate([self.acc, contrib[~old]])[order]
            self.count = np.concatenate([self.count, counts[~old]])[order]

    def copy(self) -> LabelVolume:
        return LabelVolume(self.resolution, self.voxel_size, self.origin.copy(), self.keys.copy(),
                           self.acc.copy(), self.count.copy(), self.skipped)

    def quantized(self) -> LabelVolume:
        """Copy with accumulators rounded to float32, the snapshot precision."""
        out = self.copy()
        out.acc = out.acc.astype(np.float32).astype(float)
        return out

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """``(N^3, 23)`` accumulators and ``(N^3,)`` counts in flat-id order."""
        n3 = self.resolution ** 3
        acc = np.zeros((n3, N_CLASSES))
        cnt = np.zeros(n3, np.int64)
        acc[self.keys] = self.acc
        cnt[self.keys] = self.count
        return acc, cnt


def fuse_frame_labels(lv: LabelVolume, prob: ProbabilityMap, depth: np.ndarray, pose: RigidPose,
                      intrinsics: CameraIntrinsics, volume: TsdfVolume | None = None,
                      eps: float = EPS) -> LabelVolume:
    """Add ``log(max(p, eps))`` of every valid pixel to its voxel, in place.

    A pixel is used when it has valid depth and a valid probability vector.
    Contributions are summed per voxel within the frame before being added,
    so fusing frames A then B gives exactly ``acc(A) + acc(B)``.
    """
    if volume is not None and not lv.same_grid(volume):
        raise GridMismatch("label volume grid differs from the reconstruction volume")
    depth = check_depth(depth, prob.shape)
    vmap = backproject(depth, intrinsics)
    use = vmap.valid & prob.valid
    if not use.any():
        return lv
    world = pose.apply(vmap.points[use])
    ijk = np.floor((world - lv.origin) / lv.voxel_size).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < lv.resolution), axis=1)
    lv.skipped += int(np.count_nonzero(~inside))
    if not inside.any():
        return lv
    flat = lv.flat_index(ijk[inside])
    logs = np.log(np.maximum(prob.probs[use][inside], eps))
    order = np.argsort(flat, kind="stable")
    uniq, start = np.unique(flat[order], return_index=True)
    contrib = np.add.reduceat(logs[order], start, axis=0)
    counts = np.diff(np.append(start, len(order))).astype(np.int64)
    lv.add(uniq, contrib, counts)
    return lv


def posterior(acc: np.ndarray) -> np.ndarray:
    """Softmax of accumulator rows."""
    e = np.exp(acc - acc.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class VoxelLabels:
    """Finalized labels for the observed voxels of a LabelVolume."""

    keys: np.ndarray        # flat voxel ids (sorted)
    material: np.ndarray    # uint8, 255 below min_observations
    confidence: np.ndarray  # 0 where unlabeled
    count: np.ndarray

    def at(self, flat: np.ndarray):
        """(material, confidence, count) per flat id; unobserved → (255, 0, 0)."""
        flat = np.asarray(flat, dtype=np.int64)
        if len(self.keys) == 0:
            z = np.zeros(flat.shape)
            return np.full(flat.shape, UNKNOWN, np.uint8), z, z.astype(np.int64)
        pos = np.minimum(np.searchsorted(self.keys, flat), len(self.keys) - 1)
        hit = self.keys[pos] == flat
        mat = np.where(hit, self.material[pos], UNKNOWN).astype(np.uint8)
        conf = np.where(hit, self.confidence[pos], 0.0)
        cnt = np.where(hit, self.count[pos], 0)
        return mat, conf, cnt


def finalize_labels(lv: LabelVolume, min_observations: int = 3) -> VoxelLabels:
    """Argmax class (lowest id on ties) and its posterior for well-observed voxels."""
    if min_observations < 0:
        raise ValueError("min_observations must be >= 0")
    material = np.full(len(lv.keys), UNKNOWN, np.uint8)
    confidence = np.zeros(len(lv.keys))
    ok = lv.count >= min_observations
    if ok.any():
        acc = lv.acc[ok]
        best = np.argmax(acc, axis=1)
        material[ok] = best
        confidence[ok] = posterior(acc)[np.arange(len(best)), best]
    return VoxelLabels(lv.keys.copy(), material, confidence, lv.count.copy())


@dataclass
class LabeledSurfaceModel:
    positions: np.ndarray
    normals: np.ndarray
    material: np.ndarray    # uint8, never 255
    confidence: np.ndarray
    dropped: int = 0

    def __len__(self):
        return self.positions.shape[0]

    def __post_init__(self):
        n = len(self.positions)
        if not (len(self.normals) == len(self.material) == len(self.confidence) == n):
            raise ValueError("per-point arrays differ in length")


def label_surface(points: SurfacePointCloud, lv: LabelVolume, labels: VoxelLabels) -> LabeledSurfaceModel:
    """Give each surface point the label of its voxel.

    Unlabelled voxels fall back to the labelled 26-neighbour with the most
    observations (first in ``NEIGHBORS`` order on ties); points with neither
    are dropped.
    """
    n = lv.resolution
    ijk = np.floor((points.positions - lv.origin) / lv.voxel_size).astype(np.int64)
    m = len(ijk)
    mat = np.full(m, UNKNOWN, np.uint8)
    conf = np.zeros(m)
    inside = np.all((ijk >= 0) & (ijk < n), axis=1)
    own_m, own_c, _ = labels.at(lv.flat_index(np.clip(ijk, 0, n - 1)))
    own = inside & (own_m != UNKNOWN)
    mat[own], conf[own] = own_m[own], own_c[own]
    need = np.nonzero(inside & ~own)[0]
    if len(need):
        nb = ijk[need][:, None, :] + NEIGHBORS[None]           # (k, 26, 3)
        nb_in = np.all((nb >= 0) & (nb < n), axis=2)
        nm, nc, ncount = labels.at(lv.flat_index(np.clip(nb, 0, n - 1)))
        usable = nb_in & (nm != UNKNOWN)
        score = np.where(usable, ncount, -1)
        best = np.argmax(score, axis=1)
        found = usable[np.arange(len(need)), best]
        rows = need[found]
        mat[rows] = nm[found, best[found]]
        conf[rows] = nc[found, best[found]]
    keep = mat != UNKNOWN
    return LabeledSurfaceModel(points.positions[keep], points.normals[keep], mat[keep], conf[keep],
                               int(np.count_nonzero(~keep)))


class LabelFusion(BaseEstimator):
    """Incremental label fusion with an estimator interface.

    ``partial_fit`` fuses one frame; ``predict`` labels surface points.
    """

    def __init__(self, min_observations=3, eps=EPS):
        self.min_observations = min_observations
        self.eps = eps

    def fit(self, volume: TsdfVolume, frames=()):
        self.volume_labels_ = LabelVolume.for_volume(volume)
        self._grid = volume
        for prob, depth, pose, intrinsics in frames:
            self.partial_fit(prob, depth, pose, intrinsics)
        return self

    def partial_fit(self, prob, depth, pose, intrinsics):
        fuse_frame_labels(self.volume_labels_, prob, depth, pose, intrinsics, self._grid, self.eps)
        return self

    def predict(self, points: SurfacePointCloud) -> LabeledSurfaceModel:
        labels = finalize_labels(self.volume_labels_, self.min_observations)
        return label_surface(points, self.volume_labels_, labels)


def save_label_volume(lv: LabelVolume, path):
    n = lv.resolution
    header = _HEADER.pack(LVOL_MAGIC, LVOL_VERSION, n, *lv.origin.tolist(), lv.voxel_size)
    rec = np.zeros(n ** 3, dtype=_RECORD)
    rec["acc"][lv.keys] = lv.acc
    rec["count"][lv.keys] = lv.count
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_label_volume(path) -> LabelVolume:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated label volume")
    magic, version, n, ox, oy, oz, vs = _HEADER.unpack_from(data)
    if magic != LVOL_MAGIC:
        raise ValueError(f"{path}: not a label volume snapshot")
    if version != LVOL_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if len(data) != _HEADER.size + n ** 3 * _RECORD.itemsize:
        raise ValueError(f"{path}: size does not match N={n}")
    rec = np.frombuffer(data, _RECORD, n ** 3, _HEADER.size)
    keys = np.nonzero(rec["count"])[0].astype(np.int64)
    return LabelVolume(n, vs, np.array([ox, oy, oz]), keys, rec["acc"][keys].astype(float),
                       rec["count"][keys].astype(np.int64))
