import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matfusion.exceptions import InsufficientCorrespondences, SingularSystem
from matfusion.geometry import (CameraIntrinsics, RigidPose, nearest_rotation, project,
                                rotation_angle, rotation_from_axis_angle)
from matfusion.materials import material_id
from matfusion.synthetic import Plane, Scene, demo_scene, generate_orbit_trajectory, render_frame
from matfusion.tracking import (IcpConfig, SurfaceMaps, backproject, build_pyramid,
                                compute_normals, frame_pyramid, icp_align, point_to_plane_system,
                                solve_point_to_plane)

INTR = CameraIntrinsics.default(128, 128)
WOOD = material_id("wood")


def world_maps(depth, pose, levels=3, intr=INTR):
    """Model maps as the tracker sees them: world-frame vertices/normals."""
    out = []
    for m in frame_pyramid(depth, intr, levels):
        v = np.where(m.valid[..., None], pose.apply(m.vertices), 0.0)
        n = np.where(m.valid[..., None], m.normals @ pose.rotation.T, 0.0)
        out.append(SurfaceMaps(v, n, m.valid, m.intrinsics))
    return out


def orbit_pose(k=10):
    return generate_orbit_trajectory([0, 0, 0.15], 1.2, 0.6, 60, np.pi)[k]


def translated(pose, dx):
    return RigidPose(pose.rotation, pose.translation + np.asarray(dx, dtype=float))


# back-projection and normals


def test_backproject_examples():
    intr = CameraIntrinsics(50.0, 50.0, 10.0, 10.0, 21, 21)
    d = np.zeros((21, 21))
    d[10, 10] = 2.0
    d[10, 20] = 1.0   # u = cx + 10 = cx + fx/5
    v = backproject(d, intr)
    assert np.allclose(v.points[10, 10], [0, 0, 2.0])
    assert np.allclose(v.points[10, 20], [10 / 50.0, 0, 1.0])
    assert v.valid.sum() == 2
    intr2 = CameraIntrinsics(50.0, 50.0, 10.0, 10.0, 60, 21)
    d2 = np.zeros((21, 60))
    d2[10, 60 - 1] = 1.0
    assert np.allclose(backproject(d2, intr2).points[10, 59], [(59 - 10) / 50.0, 0, 1.0])


def test_backproject_reprojects():
    rng = np.random.default_rng(0)
    d = rng.uniform(0.5, 3.0, INTR.shape)
    v = backproject(d, INTR)
    u, w = project(v.points, INTR)
    vv, uu = np.mgrid[0:INTR.height, 0:INTR.width]
    assert np.max(np.abs(u - uu)) < 1e-9 and np.max(np.abs(w - vv)) < 1e-9


def test_backproject_rejects_bad_depth():
    with pytest.raises(ValueError):
        backproject(np.full(INTR.shape, np.nan), INTR)
    with pytest.raises(ValueError):
        backproject(np.ones((4, 4)), INTR)


def test_normals_fronto_parallel():
    n = compute_normals(backproject(np.full(INTR.shape, 2.0), INTR))
    assert n.valid[1:-1, 1:-1].all() and not n.valid[0].any()
    assert np.allclose(n.points[n.valid], [0, 0, -1], atol=1e-6)


def test_normals_tilted_plane():
    s = np.sqrt(0.5)
    normal = np.array([0.0, -s, -s])
    f = render_frame(Scene((Plane(normal, normal @ [0, 0, 2.0], WOOD),)), INTR, RigidPose.identity())
    n = compute_normals(backproject(f.depth, INTR))
    assert np.max(np.abs(n.points[n.valid] - normal)) < 1e-3
    assert np.allclose(np.linalg.norm(n.points[n.valid], axis=1), 1, atol=1e-6)


def test_normals_invalid_next_to_hole():
    d = np.full((16, 16), 2.0)
    d[8, 8] = 0.0
    n = compute_normals(backproject(d, CameraIntrinsics.default(16, 16)))
    assert not n.valid[8, 7] and not n.valid[7, 8] and not n.valid[8, 9] and not n.valid[9, 8]
    assert n.valid[5, 5]


# pyramid


def test_pyramid_examples():
    d = np.full((4, 4), 2.0)
    intr = CameraIntrinsics(4.0, 4.0, 1.5, 1.5, 4, 4)
    (only,) = build_pyramid(d, intr, 1)
    assert only[0] is d and only[1] == intr
    coarse = build_pyramid(d, intr, 2)[1][0]
    assert coarse[0, 0] == 2.0
    d[1, 1] = 5.0
    assert build_pyramid(d, intr, 2)[1][0][0, 0] == 2.0
    d[:] = 0.0
    assert build_pyramid(d, intr, 2)[1][0][0, 0] == 0.0


def test_pyramid_shapes_and_intrinsics():
    lv = build_pyramid(np.ones((128, 128)), INTR, 3)
    assert [x[0].shape for x in lv] == [(128, 128), (64, 64), (32, 32)]
    assert lv[2][1].fx == pytest.approx(INTR.fx / 4)
    # pixel centres stay aligned: coarse pixel 0 covers fine pixels 0 and 1
    assert lv[1][1].cx == pytest.approx((INTR.cx - 0.5) / 2)
    with pytest.raises(ValueError):
        build_pyramid(np.ones((10, 10)), CameraIntrinsics.default(10, 10), 3)


# linear system


def test_normal_equations_match_stacked_lstsq():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = 40
        src = rng.normal(size=(m, 3))
        dst = src + 0.01 * rng.normal(size=(m, 3))
        nrm = rng.normal(size=(m, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        x = solve_point_to_plane(src, dst, nrm)
        # independent stacked formulation: r_i + J_i x with J_i = [p x n, n]
        jac = np.array([np.concatenate([np.cross(p, n), n]) for p, n in zip(src, nrm)])
        r = np.array([(p - q) @ n for p, q, n in zip(src, dst, nrm)])
        ref, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        assert np.max(np.abs(x - ref)) < 1e-9


def test_normal_equations_are_symmetric():
    rng = np.random.default_rng(2)
    a, _ = point_to_plane_system(rng.normal(size=(10, 3)), rng.normal(size=(10, 3)),
                                 rng.normal(size=(10, 3)))
    assert np.array_equal(a, a.T)


def test_nearest_rotation():
    r = rotation_from_axis_angle([0, 1, 1], 0.3)
    noisy = r + 1e-4 * np.random.default_rng(0).normal(size=(3, 3))
    q = nearest_rotation(noisy)
    assert np.allclose(q.T @ q, np.eye(3), atol=1e-12) and np.linalg.det(q) > 0
    assert rotation_angle(q.T @ r) < 1e-3


# ICP


def test_self_alignment():
    pose = orbit_pose()
    f = render_frame(demo_scene(), INTR, pose)
    res = icp_align(frame_pyramid(f.depth, INTR, 3), world_maps(f.depth, pose), pose)
    assert res.final_residual_rms < 1e-9
    assert np.allclose(res.pose.matrix(), pose.matrix(), atol=1e-9)
    assert res.converged and res.correspondence_count >= 100


def test_recovers_5mm_offset():
    truth = orbit_pose()
    model_pose = translated(truth, [0.005, 0, 0])
    scene = demo_scene()
    frame = render_frame(scene, INTR, truth)
    model = render_frame(scene, INTR, model_pose)
    res = icp_align(frame_pyramid(frame.depth, INTR, 3), world_maps(model.depth, model_pose),
                    model_pose)
    err_t = np.linalg.norm(res.pose.translation - truth.translation)
    err_r = np.degrees(rotation_angle(res.pose.rotation.T @ truth.rotation))
    assert err_t < 5e-4 and err_r < 0.05
    assert res.converged


def test_residual_non_increasing_and_rotation_orthonormal():
    truth = orbit_pose(20)
    start = RigidPose(rotation_from_axis_angle([0, 0, 1], np.radians(1.0)) @ truth.rotation,
                      truth.translation + [0.01, -0.01, 0.005])
    scene = demo_scene()
    f = render_frame(scene, INTR, truth)
    res = icp_align(frame_pyramid(f.depth, INTR, 3), world_maps(f.depth, truth), start,
                    model_pose=truth)
    for level in res.residual_history:
        assert all(b <= a + 1e-9 for a, b in zip(level, level[1:]))
    assert res.pose.is_valid(1e-6)


def test_empty_frame_is_tracking_loss():
    pose = orbit_pose()
    f = render_frame(demo_scene(), INTR, pose)
    empty = frame_pyramid(np.zeros(INTR.shape), INTR, 3)
    with pytest.raises(InsufficientCorrespondences):
        icp_align(empty, world_maps(f.depth, pose), pose)


def test_single_plane_is_singular():
    f = render_frame(Scene((Plane((0, 0, -1), -2.0, WOOD),)), INTR, RigidPose.identity())
    maps = frame_pyramid(f.depth, INTR, 3)
    with pytest.raises(SingularSystem):
        icp_align(maps, world_maps(f.depth, RigidPose.identity()), translated(RigidPose.identity(), [0, 0, 0.01]))


def test_mismatched_pyramids_rejected():
    a = frame_pyramid(np.ones((32, 32)), CameraIntrinsics.default(32, 32), 3)
    b = frame_pyramid(np.ones((64, 64)), CameraIntrinsics.default(64, 64), 3)
    with pytest.raises(ValueError):
        icp_align(a, b, RigidPose.identity())


def test_icp_config_validation():
    with pytest.raises(ValueError):
        IcpConfig(pyramid_levels=2)
    with pytest.raises(ValueError):
        IcpConfig(max_correspondence_dist=0)


def _random_rigid(rng):
    axis = rng.normal(size=3)
    return RigidPose(rotation_from_axis_angle(axis, rng.uniform(-np.pi, np.pi)), rng.uniform(-1, 1, 3))


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_equivariance(seed):
    rng = np.random.default_rng(seed)
    g = _random_rigid(rng)
    truth = orbit_pose(30)
    model_pose = translated(truth, [0.004, -0.003, 0.002])
    scene = demo_scene()
    frame = frame_pyramid(render_frame(scene, INTR, truth).depth, INTR, 3)
    model_depth = render_frame(scene, INTR, model_pose).depth
    base = icp_align(frame, world_maps(model_depth, model_pose), model_pose)
    moved = icp_align(frame, world_maps(model_depth, g @ model_pose), g @ model_pose)
    expect = g @ base.pose
    assert np.max(np.abs(moved.pose.matrix() - expect.matrix())) < 1e-6
