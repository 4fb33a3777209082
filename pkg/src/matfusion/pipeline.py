"""End-to-end pipeline: render, track, fuse, segment, label, index; plus artifacts and metrics."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import EmptyModel, LengthMismatch, StageError, TrackingError
from .fusion import (TsdfVolume, extract_surface_points, integrate_frame, load_volume,
                     model_pyramid, save_volume)
from .geometry import CameraIntrinsics, RigidPose
from .label_fusion import (LabeledSurfaceModel, LabelVolume, finalize_labels, fuse_frame_labels,
                           label_surface, load_label_volume, save_label_volume)
from .materials import PALETTE, load_response_table
from .query import build_octree, load_events, raycast_query, replay_impacts
from .semantics import (CrfParams, SegmenterNoise, dense_crf_refine, flip_segment,
                        oracle_segment)
from .synthetic import (Scene, SensorNoise, apply_sensor_noise, demo_scene,
                        generate_orbit_trajectory, load_scene, load_trajectory, render_frame,
                        save_scene, save_trajectory)
from .tracking import IcpConfig, frame_pyramid, icp_align

log = logging.getLogger(__name__)

STAGES = ("render", "track", "segment", "label_fuse", "extract", "index")
RESUME_POINTS = ("segment", "extract")

ARTIFACTS = {
    "trajectory_gt": "trajectory_gt.json",
    "trajectory_est": "trajectory_est.json",
    "volume": "volume.tsdf",
    "labels": "labels.lvol",
    "ply": "model.ply",
    "metrics": "metrics.json",
    "timings": "timings.json",
    "impacts": "impacts.json",
}

DEFAULTS = {
    "scene": None,  # path to a scene JSON; None uses the built-in demo scene
    "trajectory": {"path": None, "center": [0.0, 0.0, 0.15], "radius": 1.2, "height": 0.6,
                   "n_frames": 60, "arc": math.pi},
    "intrinsics": {"width": 128, "height": 128, "fov_deg": 60.0},
    "sensor_noise": {"depth_sigma_base": 0.0, "depth_sigma_slope": 0.0, "dropout_prob": 0.0},
    "segmenter": {"mode": "oracle", "confusion_prob": 0.0, "leak_concentration": 1,
                  "flip_prob": 0.2},
    "volume": {"resolution": 128, "voxel_size": None, "margin": 0.5, "truncation_factor": 4.0,
               "max_weight": 64.0, "edge_threshold": 0.1},
    "icp": {"pyramid_levels": 3, "iterations_per_level": [10, 5, 4],
            "max_correspondence_dist": 0.1, "max_normal_angle": 20.0,
            "min_valid_correspondences": 100},
    "crf": {"enabled": True, "w_appearance": 10.0, "w_smooth": 3.0, "theta_alpha": 60.0,
            "theta_beta": 20.0, "theta_gamma": 3.0, "iterations": 5},
    "fusion": {"min_observations": 3},
    "octree": {"leaf_capacity": 32, "max_depth": 10, "radius": None},
    "material_table": None,
    "impacts": None,  # optional path to a JSON list of impact events to replay
    "output_dir": "out",
    "seed": 0,
    "record_timings": False,
}


def _merge(base: dict, override: dict, where="config") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ValueError(f"unknown {where} key {k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ValueError(f"{where}.{k} must be an object")
            out[k] = _merge(base[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


@dataclass
class PipelineConfig:
    """Validated pipeline configuration (see ``DEFAULTS`` for the schema).

    Relative paths are resolved against ``base_dir`` (the config file's
    directory when loaded from disk).
    """

    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        self.values = _merge(DEFAULTS, self.values)
        self.base_dir = Path(self.base_dir)
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> PipelineConfig:
        return cls(doc, Path(base_dir) if base_dir is not None else Path.cwd())

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def path(self, key_or_value) -> Path | None:
        v = self.values.get(key_or_value, key_or_value) if isinstance(key_or_value, str) else key_or_value
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.path(self.values["output_dir"])

    def with_overrides(self, **flat) -> PipelineConfig:
        """Copy with dotted-key overrides, e.g. ``{"trajectory.n_frames": 5}``."""
        doc = self.to_dict()
        for key, value in flat.items():
            parts = key.split(".")
            node = doc
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ValueError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return PipelineConfig(doc, self.base_dir)

    # -- typed views -------------------------------------------------------
    def icp(self) -> IcpConfig:
        d = dict(self.values["icp"])
        d["iterations_per_level"] = tuple(d["iterations_per_level"])
        return IcpConfig(**d)

    def crf(self) -> CrfParams | None:
        d = dict(self.values["crf"])
        enabled = d.pop("enabled")
        params = CrfParams(**d)
        return params if enabled else None

    def sensor_noise(self, seed: int) -> SensorNoise:
        return SensorNoise(**self.values["sensor_noise"], seed=seed)

    def intrinsics(self) -> CameraIntrinsics:
        d = self.values["intrinsics"]
        if "fx" in d:
            return CameraIntrinsics.from_dict(d)
        return CameraIntrinsics.default(int(d["width"]), int(d["height"]), float(d.get("fov_deg", 60.0)))

    def validate(self):
        v = self.values
        self.icp()
        self.crf()
        self.sensor_noise(0)
        k = self.intrinsics()
        seg = v["segmenter"]
        if seg["mode"] not in ("oracle", "flip"):
            raise ValueError("segmenter.mode must be 'oracle' or 'flip'")
        SegmenterNoise(seg["confusion_prob"], seg["leak_concentration"])
        if not 0 <= seg["flip_prob"] <= 1:
            raise ValueError("segmenter.flip_prob must lie in [0, 1]")
        if v["crf"]["enabled"] and k.width * k.height > 16384:
            raise ValueError("CRF needs frames of at most 16384 px; disable crf.enabled for larger frames")
        t = v["trajectory"]
        if t["path"] is None and (int(t["n_frames"]) < 1 or not t["radius"] > 0):
            raise ValueError("trajectory needs n_frames >= 1 and radius > 0")
        vol = v["volume"]
        if int(vol["resolution"]) < 2 or vol["truncation_factor"] < 2 or not vol["max_weight"] > 0:
            raise ValueError("invalid volume parameters")
        if vol["voxel_size"] is not None and not vol["voxel_size"] > 0:
            raise ValueError("volume.voxel_size must be positive")
        if int(v["fusion"]["min_observations"]) < 0:
            raise ValueError("fusion.min_observations must be >= 0")
        oc = v["octree"]
        if int(oc["leaf_capacity"]) < 1 or int(oc["max_depth"]) < 0:
            raise ValueError("invalid octree parameters")
        if oc["radius"] is not None and not oc["radius"] > 0:
            raise ValueError("octree.radius must be positive")
        for key in ("scene", "material_table", "impacts"):
            p = self.path(key)
            if p is not None and not p.is_file():
                raise FileNotFoundError(f"{key} file not found: {p}")
        if t["path"] is not None and not self.path(t["path"]).is_file():
            raise FileNotFoundError(f"trajectory file not found: {self.path(t['path'])}")
        return self


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return PipelineConfig(doc, path.parent)


def save_config(cfg: PipelineConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def sub_seed(master: int, stage: str) -> int:
    """Stage seed derived by hashing the master seed with the stage name."""
    digest = hashlib.sha256(f"{int(master)}/{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ----------------------------------------------------------------------------
# metrics


def compute_ate(estimated, truth) -> float:
    """Translation RMSE after aligning ``estimated[0]`` onto ``truth[0]``.

    The first frame is the alignment anchor and is excluded from the mean, so a
    constant offset on every later frame is reported as that offset; a single
    frame gives exactly 0.
    """
    if len(estimated) != len(truth):
        raise LengthMismatch(f"trajectories differ in length ({len(estimated)} vs {len(truth)})")
    if len(truth) == 0:
        raise ValueError("trajectories must contain at least one pose")
    if len(truth) == 1:
        return 0.0
    align = truth[0] @ estimated[0].inverse()
    diff = np.array([(align @ e).translation - t.translation for e, t in zip(estimated[1:], truth[1:])])
    return float(np.sqrt(np.mean(np.sum(diff ** 2, axis=1))))


@dataclass
class MetricsReport:
    ate_rmse_m: float = 0.0
    surface_mean_m: float = 0.0
    surface_p95_m: float = 0.0
    label_accuracy: float = 0.0
    stage_times_s: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    counts: dict = field(default_factory=dict)
    status: str = "ok"
    partial: bool = False

    def to_dict(self) -> dict:
        return {"ate_rmse_m": self.ate_rmse_m, "surface_mean_m": self.surface_mean_m,
                "surface_p95_m": self.surface_p95_m, "label_accuracy": self.label_accuracy,
                "stage_times_s": dict(self.stage_times_s), "counts": dict(self.counts),
                "status": self.status, "partial": self.partial}

    @classmethod
    def from_dict(cls, d) -> MetricsReport:
        return cls(**{k: d[k] for k in ("ate_rmse_m", "surface_mean_m", "surface_p95_m",
                                        "label_accuracy", "stage_times_s", "counts",
                                        "status", "partial") if k in d})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def surface_stats(scene: Scene, positions: np.ndarray) -> tuple[float, float]:
    if len(positions) == 0:
        return 0.0, 0.0
    d, _ = scene.surface_distance(positions)
    return float(np.mean(d)), float(np.percentile(d, 95))


def label_accuracy(scene: Scene, model: LabeledSurfaceModel) -> float:
    if len(model) == 0:
        return 0.0
    truth = scene.material_at(model.positions)
    return float(np.mean(truth == model.material))


# ----------------------------------------------------------------------------
# PLY

PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1"),
                      ("material", "u1"), ("confidence", "<f4")])
_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
              "ushort": "<u2", "uint16": "<u2", "short": "<i2", "int16": "<i2",
              "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4"}


def export_ply(model: LabeledSurfaceModel, path):
    """Binary little-endian PLY with position, normal, palette colour, material, confidence."""
    if len(model) == 0:
        raise EmptyModel("cannot export an empty model")
    rec = np.empty(len(model), dtype=PLY_DTYPE)
    for i, a in enumerate("xyz"):
        rec[a] = model.positions[:, i]
        rec["n" + a] = model.normals[:, i]
    mat = np.asarray(model.material, dtype=np.uint8)
    rgb = PALETTE[mat]
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    rec["material"] = mat
    rec["confidence"] = model.confidence
    props = "".join(f"property {'float' if PLY_DTYPE[n].kind == 'f' else 'uchar'} {n}\n"
                    for n in PLY_DTYPE.names)
    header = ("ply\nformat binary_little_endian 1.0\ncomment matfusion labelled surface\n"
              f"element vertex {len(model)}\n{props}end_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply_vertices(path) -> np.ndarray:
    """Vertex records of a binary little-endian PLY as a structured array."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body = raw.index(b"\n", end) + 1
    lines = raw[:body].decode("ascii").splitlines()
    fmt, count, fields, current = None, None, [], None
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                count = int(tok[2])
            elif count is not None:
                break   # vertex block ends; later elements are ignored
        elif tok[0] == "property" and current == "vertex":
            if tok[1] == "list":
                raise ValueError(f"{path}: list properties on vertices are not supported")
            fields.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise ValueError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
    if count is None:
        raise ValueError(f"{path}: no vertex element")
    dt = np.dtype(fields)
    if len(raw) < body + count * dt.itemsize:
        raise ValueError(f"{path}: truncated vertex data")
    return np.frombuffer(raw, dt, count, body).copy()


def read_ply(path) -> LabeledSurfaceModel:
    v = read_ply_vertices(path)
    pos = np.column_stack([v["x"], v["y"], v["z"]]).astype(float)
    nrm = np.column_stack([v["nx"], v["ny"], v["nz"]]).astype(float)
    return LabeledSurfaceModel(pos, nrm, v["material"].astype(np.uint8), v["confidence"].astype(float))


# ----------------------------------------------------------------------------
# stages


def _stage_io(stage, fn, *args):
    """Run a loader, attributing failures to ``stage`` with CLI exit codes."""
    try:
        return fn(*args)
    except (StageError, TrackingError):
        raise
    except OSError as e:
        raise StageError(stage, f"{e}", exit_code=4) from e
    except (ValueError, KeyError, TypeError) as e:
        raise StageError(stage, f"{args[0] if args else ''}: {e}", exit_code=2) from e


def make_scene(cfg: PipelineConfig) -> Scene:
    path = cfg.path("scene")
    if path is None:
        return demo_scene()
    return _stage_io("load_scene", load_scene, path)


def make_trajectory(cfg: PipelineConfig) -> list[RigidPose]:
    t = cfg["trajectory"]
    if t["path"] is not None:
        return _stage_io("load_trajectory", load_trajectory, cfg.path(t["path"]))
    return generate_orbit_trajectory(t["center"], float(t["radius"]), float(t["height"]),
                                     int(t["n_frames"]), float(t["arc"]))


def make_volume(cfg: PipelineConfig, scene: Scene) -> TsdfVolume:
    v = cfg["volume"]
    vol = TsdfVolume.for_scene(scene, int(v["resolution"]), float(v["margin"]),
                               float(v["truncation_factor"]), float(v["max_weight"]))
    if v["voxel_size"] is not None:
        vs = float(v["voxel_size"])
        centre = vol.origin + vol.resolution * vol.voxel_size / 2
        vol = TsdfVolume(vol.resolution, vs, centre - vol.resolution * vs / 2,
                         float(v["truncation_factor"]) * vs, vol.max_weight)
    return vol


def render_sequence(scene, intrinsics, poses, noise: SensorNoise | None = None) -> list:
    frames = []
    for k, pose in enumerate(poses):
        f = render_frame(scene, intrinsics, pose, k)
        if noise is not None:
            f = apply_sensor_noise(f, noise)
        frames.append(f)
    return frames


@dataclass
class TrackingOutcome:
    poses: list
    failed_frame: int | None = None
    error: str = ""


def track_and_fuse(frames, intrinsics, first_pose, vol: TsdfVolume, icp: IcpConfig,
                   edge_threshold=0.1) -> TrackingOutcome:
    """Frame-to-model tracking with interleaved TSDF integration.

    Frame 0 uses ``first_pose``; every later frame is aligned by ICP against
    the ray-cast prediction from the previous estimate. Stops at the first
    tracking failure and reports it.
    """
    poses = []
    for k, f in enumerate(frames):
        if k == 0:
            pose = first_pose
        else:
            try:
                res = icp_align(frame_pyramid(f.depth, intrinsics, icp.pyramid_levels),
                                model_pyramid(vol, poses[-1], intrinsics, icp.pyramid_levels),
                                poses[-1], icp)
            except TrackingError as e:
                return TrackingOutcome(poses, k, f"{type(e).__name__}: {e}")
            pose = res.pose
        poses.append(pose)
        integrate_frame(vol, f.depth, pose, intrinsics, edge_threshold)
    return TrackingOutcome(poses)


def segment_frame(frame, cfg: PipelineConfig, seed: int, crf: CrfParams | None):
    seg = cfg["segmenter"]
    valid = frame.depth > 0
    if seg["mode"] == "flip":
        prob = flip_segment(frame.true_labels, seg["flip_prob"], seed, valid)
    else:
        prob = oracle_segment(frame.true_labels,
                              SegmenterNoise(seg["confusion_prob"], seg["leak_concentration"], seed),
                              valid)
    if crf is not None and prob.valid.any():
        prob = dense_crf_refine(prob, frame.color * 255.0, crf)
    return prob


def fuse_labels(frames, poses, intrinsics, vol, cfg: PipelineConfig) -> LabelVolume:
    lv = LabelVolume.for_volume(vol)
    crf = cfg.crf()
    for k, (f, pose) in enumerate(zip(frames, poses)):
        prob = segment_frame(f, cfg, sub_seed(cfg["seed"], f"segmenter/{k}"), crf)
        fuse_frame_labels(lv, prob, f.depth, pose, intrinsics, vol)
    return lv


def build_labeled_model(vol: TsdfVolume, lv: LabelVolume, min_observations: int):
    """Surface points of ``vol`` labelled from ``lv`` at snapshot (float32) precision."""
    points = extract_surface_points(vol)
    labels = finalize_labels(lv.quantized(), min_observations)
    return points, label_surface(points, lv, labels)


@dataclass
class PipelineResult:
    report: MetricsReport
    scene: Scene
    truth: list
    poses: list
    volume: TsdfVolume
    label_volume: LabelVolume | None = None
    model: LabeledSurfaceModel | None = None
    tree: object = None
    impacts: list | None = None


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_pipeline(cfg: PipelineConfig, resume_from: str | None = None,
                 write: bool = True) -> PipelineResult:
    """Run all stages and write artifacts into ``cfg.output_dir``.

    ``resume_from`` ("segment" or "extract") reloads the estimated trajectory,
    TSDF snapshot and, for "extract", the label snapshot from the output
    directory instead of recomputing them. Frames are re-rendered since
    rendering is pure. On tracking loss the partial artifacts and a report
    with ``partial: true`` are written before ``StageError`` (exit code 3)
    is raised.
    """
    if resume_from is not None and resume_from not in RESUME_POINTS:
        raise ValueError(f"resume_from must be one of {RESUME_POINTS}")
    out = cfg.output_dir
    if write:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StageError("output", f"{out}: {e}", exit_code=4) from e
    times = {s: 0.0 for s in STAGES}
    clock = time.perf_counter

    t0 = clock()
    scene = make_scene(cfg)
    truth = make_trajectory(cfg)
    intr = cfg.intrinsics()
    noise = cfg.sensor_noise(sub_seed(cfg["seed"], "sensor_noise"))
    frames = render_sequence(scene, intr, truth, noise)
    if write:
        save_trajectory(truth, out / ARTIFACTS["trajectory_gt"])
    times["render"] = clock() - t0

    t0 = clock()
    if resume_from is None:
        vol = make_volume(cfg, scene)
        outcome = track_and_fuse(frames, intr, truth[0], vol, cfg.icp(), cfg["volume"]["edge_threshold"])
        poses = outcome.poses
        if write:
            save_trajectory(poses, out / ARTIFACTS["trajectory_est"])
            save_volume(vol, out / ARTIFACTS["volume"])
    else:
        poses = _stage_io("track", load_trajectory, out / ARTIFACTS["trajectory_est"])
        vol = _stage_io("track", load_volume, out / ARTIFACTS["volume"], cfg["volume"]["max_weight"])
        outcome = TrackingOutcome(poses)
        if len(poses) != len(truth):
            raise StageError("track", "saved trajectory does not match the configured frames")
    times["track"] = clock() - t0

    counts = {"frames": len(frames), "frames_tracked": len(poses),
              "voxels_touched": vol.touched()}
    if outcome.failed_frame is not None:
        # partial report: trajectory prefix and the volume fused so far
        points = extract_surface_points(vol)
        mean, p95 = surface_stats(scene, points.positions)
        report = MetricsReport(compute_ate(poses, truth[:len(poses)]), mean, p95, 0.0,
                               times if cfg["record_timings"] else {s: 0.0 for s in STAGES},
                               {**counts, "points": len(points), "failed_frame": outcome.failed_frame},
                               status="tracking_lost", partial=True)
        if write:
            (out / ARTIFACTS["metrics"]).write_text(report.to_json())
            _write_json(out / ARTIFACTS["timings"], times)
        raise StageError("track", f"tracking lost at frame {outcome.failed_frame}: {outcome.error}",
                         exit_code=3)

    min_obs = int(cfg["fusion"]["min_observations"])
    if resume_from == "extract":
        lv = _stage_io("label_fuse", load_label_volume, out / ARTIFACTS["labels"])
    else:
        t0 = clock()
        lv = fuse_labels(frames, poses, intr, vol, cfg)
        times["segment"] = clock() - t0   # segmentation and label fusion share one pass
        if write:
            save_label_volume(lv, out / ARTIFACTS["labels"])

    t0 = clock()
    points, model = build_labeled_model(vol, lv, min_obs)
    if write and len(model):
        export_ply(model, out / ARTIFACTS["ply"])
    times["extract"] = clock() - t0

    t0 = clock()
    tree, impacts = None, None
    if len(model):
        oc = cfg["octree"]
        tree = build_octree(model, int(oc["leaf_capacity"]), int(oc["max_depth"]))
        if cfg["impacts"] is not None:
            table = load_response_table(cfg.path("material_table"))
            events = _stage_io("impacts", load_events, cfg.path("impacts"))
            radius = oc["radius"] or vol.voxel_size
            impacts = replay_impacts(events, tree, model, table, radius)
            if write:
                _write_json(out / ARTIFACTS["impacts"], impacts)
    times["index"] = clock() - t0

    mean, p95 = surface_stats(scene, points.positions)
    counts.update({"points": len(points), "labeled_points": len(model),
                   "dropped_points": model.dropped, "labeled_voxels": int(np.count_nonzero(lv.count >= min_obs)),
                   "label_pixels_outside": lv.skipped,
                   "octree_nodes": 0 if tree is None else tree.n_nodes})
    report = MetricsReport(compute_ate(poses, truth), mean, p95, label_accuracy(scene, model),
                           times if cfg["record_timings"] else {s: 0.0 for s in STAGES}, counts)
    if write:
        (out / ARTIFACTS["metrics"]).write_text(report.to_json())
        _write_json(out / ARTIFACTS["timings"], times)
    log.info("pipeline done: ATE %.4g m, label accuracy %.4f", report.ate_rmse_m, report.label_accuracy)
    return PipelineResult(report, scene, truth, poses, vol, lv, model, tree, impacts)


class SemanticReconstructor(BaseEstimator):
    """Estimator facade over the pipeline.

    ``fit`` runs the full pipeline in memory (no artifacts) on the
    configured scene, or on ``X`` when a Scene is passed; ``predict`` casts
    material query rays against the fitted model.
    """

    def __init__(self, config=None, n_frames=None, seed=None):
        self.config = config
        self.n_frames = n_frames
        self.seed = seed

    def _config(self) -> PipelineConfig:
        cfg = self.config if isinstance(self.config, PipelineConfig) else PipelineConfig(self.config or {})
        over = {}
        if self.n_frames is not None:
            over["trajectory.n_frames"] = int(self.n_frames)
        if self.seed is not None:
            over["seed"] = int(self.seed)
        return cfg.with_overrides(**over) if over else cfg

    def fit(self, X: Scene | None = None, y=None):
        cfg = self._config()
        if X is not None:
            with tempfile.TemporaryDirectory() as tmp:
                save_scene(X, Path(tmp) / "scene.json")
                cfg = cfg.with_overrides(scene=str(Path(tmp) / "scene.json"))
                result = run_pipeline(cfg, write=False)
        else:
            result = run_pipeline(cfg, write=False)
        self.result_ = result
        self.metrics_ = result.report
        self.model_ = result.model
        self.trajectory_ = result.poses
        self.radius_ = cfg["octree"]["radius"] or result.volume.voxel_size
        return self

    def predict(self, origins, directions) -> list:
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        if self.result_.tree is None:
            return [None] * len(origins)
        return [raycast_query(self.result_.tree, self.model_, o, d, self.radius_)
                for o, d in zip(origins, directions)]

    def score(self, X=None, y=None) -> float:
        """Label accuracy of the fitted model against the scene's ground truth."""
        return self.metrics_.label_accuracy
