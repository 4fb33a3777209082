import json

import numpy as np
import pytest

from matfusion import cli
from matfusion.exceptions import EmptyModel, LengthMismatch, StageError
from matfusion.geometry import RigidPose, rotation_from_axis_angle
from matfusion.label_fusion import LabeledSurfaceModel
from matfusion.materials import PALETTE, material_id
from matfusion.pipeline import (ARTIFACTS, MetricsReport, PipelineConfig, SemanticReconstructor,
                                compute_ate, export_ply, load_config, read_ply,
                                read_ply_vertices, run_pipeline, save_config, sub_seed)
from matfusion.synthetic import generate_orbit_trajectory

WOOD, GLASS = material_id("wood"), material_id("glass")

# small, fast configuration: 64 px frames, 48^3 grid, 12 frames over a short arc
SMALL = {"intrinsics": {"width": 64, "height": 64}, "volume": {"resolution": 48},
         "trajectory": {"n_frames": 12, "arc": 0.6},
         "icp": {"min_valid_correspondences": 30}}


def small_cfg(out, **over):
    return PipelineConfig({**SMALL, "output_dir": str(out)}).with_overrides(**over)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    return run_pipeline(small_cfg(out)), out


# config


def test_config_defaults_and_overrides(tmp_path):
    cfg = PipelineConfig()
    assert cfg["volume"]["resolution"] == 128 and cfg["crf"]["enabled"]
    c2 = cfg.with_overrides(**{"volume.resolution": 64, "seed": 3})
    assert c2["volume"]["resolution"] == 64 and c2["seed"] == 3 and cfg["seed"] == 0
    with pytest.raises(ValueError):
        cfg.with_overrides(**{"volume.nope": 1})
    with pytest.raises(ValueError):
        PipelineConfig({"segmenter": {"mode": "magic"}})
    with pytest.raises(ValueError):
        PipelineConfig({"intrinsics": {"width": 256, "height": 256}})   # too large for the CRF
    PipelineConfig({"intrinsics": {"width": 256, "height": 256}, "crf": {"enabled": False}})
    with pytest.raises(FileNotFoundError):
        PipelineConfig({"scene": str(tmp_path / "missing.json")})
    save_config(c2, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back.to_dict() == c2.to_dict() and back.base_dir == tmp_path
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ValueError):
        load_config(tmp_path / "bad.json")


def test_sub_seed():
    assert sub_seed(0, "a") == sub_seed(0, "a")
    assert len({sub_seed(0, "a"), sub_seed(0, "b"), sub_seed(1, "a")}) == 3


# ATE


def _shifted(poses, dx):
    return [RigidPose(p.rotation, p.translation + dx) for p in poses]


def test_ate_examples():
    truth = generate_orbit_trajectory([0, 0, 0], 1.0, 0.5, 10)
    assert compute_ate(truth, truth) < 1e-12
    est = [truth[0]] + _shifted(truth[1:], np.array([0.001, 0, 0]))
    assert compute_ate(est, truth) == pytest.approx(0.001, abs=1e-12)
    assert compute_ate(truth[:1], truth[:1]) == 0.0
    with pytest.raises(LengthMismatch):
        compute_ate(truth[:3], truth)


def test_ate_is_gauge_invariant():
    truth = generate_orbit_trajectory([0, 0, 0], 1.0, 0.5, 10)
    g = RigidPose(rotation_from_axis_angle([1, 2, 3], 0.7), np.array([0.3, -1, 2]))
    moved = [g @ p for p in truth]
    assert compute_ate(moved, truth) < 1e-12


def test_ate_formula_oracle():
    rng = np.random.default_rng(0)
    truth = generate_orbit_trajectory([0, 0, 0], 1.0, 0.5, 8)
    est = [RigidPose(p.rotation, p.translation + rng.normal(0, 0.01, 3)) for p in truth]
    # hand-rolled: anchor frame 0 with 4x4 matrices, RMSE over frames 1..n-1
    a = truth[0].matrix() @ np.linalg.inv(est[0].matrix())
    errs = [np.sum(((a @ e.matrix())[:3, 3] - t.translation) ** 2) for e, t in zip(est[1:], truth[1:])]
    assert abs(compute_ate(est, truth) - np.sqrt(np.mean(errs))) < 1e-12


# PLY


def _model(n=1, mats=(WOOD,)):
    rng = np.random.default_rng(n)
    mats = np.resize(np.array(mats, np.uint8), n)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return LabeledSurfaceModel(rng.normal(size=(n, 3)), nrm, mats, rng.uniform(0, 1, n))


def test_ply_single_point(tmp_path):
    m = _model(1)
    export_ply(m, tmp_path / "a.ply")
    raw = (tmp_path / "a.ply").read_bytes()
    head = raw[:raw.index(b"end_header\n") + 11].decode()
    assert "format binary_little_endian 1.0" in head and "element vertex 1" in head
    assert len(raw) - len(head) == 4 * 6 + 4 + 4
    v = read_ply_vertices(tmp_path / "a.ply")
    assert (v["red"][0], v["green"][0], v["blue"][0]) == tuple(PALETTE[WOOD])
    with pytest.raises(EmptyModel):
        export_ply(_model(0), tmp_path / "e.ply")


def test_ply_roundtrip_bit_exact(tmp_path):
    m = _model(500, (WOOD, GLASS))
    export_ply(m, tmp_path / "a.ply")
    back = read_ply(tmp_path / "a.ply")
    assert np.array_equal(back.positions, m.positions.astype(np.float32).astype(float))
    assert np.array_equal(back.material, m.material)
    assert set(back.material.tolist()) == {WOOD, GLASS}
    export_ply(back, tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


# end to end


def test_small_run_artifacts(small_run):
    result, out = small_run
    for name in ("trajectory_gt", "trajectory_est", "volume", "labels", "ply", "metrics", "timings"):
        assert (out / ARTIFACTS[name]).is_file()
    rep = MetricsReport.from_dict(json.loads((out / ARTIFACTS["metrics"]).read_text()))
    assert rep.status == "ok" and not rep.partial
    assert rep.counts["frames_tracked"] == 12 and rep.label_accuracy > 0.9
    assert rep.ate_rmse_m < 0.01
    assert all(v == 0.0 for v in rep.stage_times_s.values())   # timings only on request
    assert len(read_ply(out / ARTIFACTS["ply"])) == len(result.model)


def test_single_frame_run(tmp_path):
    result = run_pipeline(small_cfg(tmp_path, **{"trajectory.n_frames": 1}))
    assert result.report.ate_rmse_m == 0.0 and len(result.model) > 0


def test_resume_matches_full_run(small_run):
    full, out = small_run
    cfg = small_cfg(out)
    for point in ("segment", "extract"):
        again = run_pipeline(cfg, resume_from=point, write=False)
        assert np.array_equal(again.model.positions, full.model.positions)
        assert np.array_equal(again.model.material, full.model.material)
        assert np.max(np.abs(again.model.confidence - full.model.confidence)) < 1e-9
        a, b = again.report.to_dict(), full.report.to_dict()
        for k in ("ate_rmse_m", "surface_mean_m", "label_accuracy"):
            assert abs(a[k] - b[k]) < 1e-9
    with pytest.raises(ValueError):
        run_pipeline(cfg, resume_from="render", write=False)


def test_corrupt_scene_names_stage_and_path(tmp_path):
    bad = tmp_path / "scene.json"
    bad.write_text('{"primitives": [{"type": "sphere"}]}')
    with pytest.raises(StageError) as e:
        run_pipeline(small_cfg(tmp_path / "o", scene=str(bad)))
    assert e.value.stage == "load_scene" and str(bad) in str(e.value)
    assert e.value.exit_code == 2


def test_tracking_loss_writes_partial_report(tmp_path):
    cfg = small_cfg(tmp_path, **{"trajectory.n_frames": 6, "trajectory.arc": 3.1416})
    with pytest.raises(StageError) as e:
        run_pipeline(cfg)
    assert e.value.exit_code == 3 and e.value.stage == "track"
    rep = json.loads((tmp_path / ARTIFACTS["metrics"]).read_text())
    assert rep["partial"] and rep["status"] == "tracking_lost"
    n = rep["counts"]["frames_tracked"]
    assert n == rep["counts"]["failed_frame"] and 1 <= n < 6
    assert len(json.loads((tmp_path / ARTIFACTS["trajectory_est"]).read_text())) == n


def test_semantic_reconstructor():
    est = SemanticReconstructor(config={**SMALL}, n_frames=8, seed=1)
    assert est.get_params()["n_frames"] == 8
    est.fit()
    assert est.score() > 0.9 and len(est.trajectory_) == 8
    c = est.model_.positions.mean(0)
    hits = est.predict([c + [0, 0, 2.0]], [[0, 0, -1.0]])
    assert len(hits) == 1


# CLI


def _cli(*argv):
    return cli.main([str(a) for a in argv])


def _small_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, "output_dir": "out"}))
    return path


def test_cli_exit_codes(tmp_path):
    cfg = _small_config_file(tmp_path)
    assert _cli("track", "--frames", tmp_path / "missing.npz", "--config", cfg) == 4
    bad = tmp_path / "bad.json"
    bad.write_text('{"volume": {"resolution": 1}}')
    assert _cli("pipeline", "--config", bad) == 2
    assert _cli("pipeline", "--config", cfg, "--set", "nope=1") == 2
    assert _cli("pipeline", "--config", cfg, "--frames-count", 6,
                "--set", "trajectory.arc=3.1416", "--output-dir", tmp_path / "lost") == 3


def test_cli_stage_chain(tmp_path, capsys):
    cfg = _small_config_file(tmp_path)
    d = tmp_path / "chain"
    common = ["--config", cfg, "--set", "trajectory.n_frames=6"]
    assert _cli("render", "--out", d, *common) == 0
    assert _cli("track", "--frames", d / "frames.npz", "--init", d / "trajectory_gt.json",
                "--out", d, *common) == 0
    assert _cli("segment", "--frames", d / "frames.npz", "--out", d / "seg", *common) == 0
    assert (d / "seg" / "seg_0000.pmap").is_file() and (d / "seg" / "labels_0005.pgm").is_file()
    assert _cli("label-fuse", "--frames", d / "frames.npz", "--trajectory", d / "trajectory_est.json",
                "--volume", d / "volume.tsdf", "--segments", d / "seg", "--out", d, *common) == 0
    assert _cli("extract", "--volume", d / "volume.tsdf", "--labels", d / "labels.lvol",
                "--out", d / "model.ply", *common) == 0
    model = read_ply(d / "model.ply")
    c = model.positions.mean(0)
    capsys.readouterr()
    assert _cli("query", "--model", d / "model.ply", "--origin", *(c + [0, 0, 2]),
                "--direction", 0, 0, -1, *common) == 0
    out = json.loads(capsys.readouterr().out)
    assert out is None or out["material"] in ("wood", "glass", "fabric")
    assert _cli("metrics", "--estimated", d / "trajectory_est.json", "--truth", d / "trajectory_gt.json",
                "--model", d / "model.ply", *common) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["ate_rmse_m"] < 0.01 and rep["label_accuracy"] > 0.9
