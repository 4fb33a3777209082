import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import binary_dilation

from matfusion.fusion import (TsdfVolume, depth_edges, extract_surface_points, integrate_frame,
                              integrate_measurement, load_volume, predicted_depth,
                              raycast_surface, save_volume)
from matfusion.geometry import CameraIntrinsics, RigidPose
from matfusion.materials import material_id
from matfusion.tracking import backproject
from matfusion.synthetic import (Plane, Scene, Sphere, demo_scene, generate_orbit_trajectory,
                                 render_frame)

WOOD = material_id("wood")
INTR = CameraIntrinsics.default(64, 64)


def plane_volume(n=64):
    # slab around the plane z = 2 seen from the origin
    vs = 1.0 / n
    return TsdfVolume(n, vs, np.array([-0.5, -0.5, 1.5]), 4 * vs)


def plane_frame(z=2.0, intr=INTR):
    return render_frame(Scene((Plane((0, 0, -1), -z, WOOD),)), intr, RigidPose.identity())


def test_measurement_examples():
    t, w = integrate_measurement(1.0, 0.0, 0.5, 64)
    assert (t, w) == (0.5, 1.0)
    t, w = integrate_measurement(1.0, 1.0, 0.0, 64)
    assert (t, w) == (0.5, 2.0)
    assert integrate_measurement(0.0, 64.0, 1.0, 64)[1] == 64


def test_fresh_volume_state():
    vol = plane_volume(8)
    assert np.all(vol.tsdf == 1) and np.all(vol.weight == 0)
    with pytest.raises(ValueError):
        TsdfVolume(8, 0.1, np.zeros(3), 0.15)


def test_behind_surface_skip():
    vol = plane_volume()
    integrate_frame(vol, plane_frame().depth, RigidPose.identity(), INTR)
    i = j = vol.resolution // 2
    zc = vol.origin[2] + (np.arange(vol.resolution) + 0.5) * vol.voxel_size
    k_behind = int(np.argmin(np.abs(zc - (2 + 2 * vol.truncation))))
    assert vol.weight[i, j, k_behind] == 0
    # in front of the surface, inside the band: positive and exactly sdf / tau
    k = int(np.argmin(np.abs(zc - (2 - 0.5 * vol.truncation))))
    assert vol.weight[i, j, k] == 1
    assert vol.tsdf[i, j, k] == pytest.approx((2 - zc[k]) / vol.truncation, abs=1e-6)
    # far in front: clamped to +1
    assert vol.tsdf[i, j, 0] == 1 and vol.weight[i, j, 0] == 1


def test_no_overlap_leaves_volume_unchanged():
    vol = plane_volume(16)
    behind = RigidPose(np.diag([1.0, -1.0, -1.0]), np.zeros(3))   # looking away
    integrate_frame(vol, plane_frame().depth, behind, INTR)
    assert vol.touched() == 0


def test_depth_edges():
    d = np.full((10, 10), 2.0)
    d[:, 5:] = 3.0
    e = depth_edges(d, 0.1)
    assert e[:, 4:6].all() and not e[:, :4].any() and not e[:, 7:].any()
    d[0, 0] = 0.0
    assert depth_edges(d, 0.1)[1, 1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=64))
def test_running_average_equals_mean(ds):
    t, w = np.float32(1.0), np.float32(0.0)
    for d in ds:
        nt, nw = integrate_measurement(float(t), float(w), d, 64.0)
        t, w = np.float32(nt), np.float32(nw)   # stored as float32 like the volume
    assert abs(float(t) - np.mean(ds)) < 1e-6
    assert w == len(ds)


def test_volume_running_average_and_bounds():
    rng = np.random.default_rng(0)
    intr = CameraIntrinsics.default(16, 16)
    vol = TsdfVolume(8, 0.05, np.array([-0.2, -0.2, 1.0]), 0.2, max_weight=64)
    zc = vol.origin[2] + (np.arange(8) + 0.5) * 0.05
    meas = []
    for d in rng.uniform(1.15, 1.45, 60):
        integrate_frame(vol, np.full((16, 16), d), RigidPose.identity(), intr)
        sdf = d - zc
        meas.append(np.where(sdf >= -0.2, np.clip(sdf / 0.2, -1, 1), np.nan))
        assert np.all(np.abs(vol.tsdf) <= 1) and vol.weight.max() <= 64
    meas = np.array(meas)
    for z in range(8):
        m = meas[:, z][~np.isnan(meas[:, z])]
        if len(m):
            assert abs(vol.tsdf[4, 4, z] - m.mean()) < 1e-6
            assert vol.weight[4, 4, z] == len(m)


def test_weight_clamp_and_order_insensitivity():
    intr = CameraIntrinsics.default(16, 16)
    rng = np.random.default_rng(1)
    depths = rng.uniform(1.15, 1.45, 30)
    a = TsdfVolume(8, 0.05, np.array([-0.2, -0.2, 1.0]), 0.2)
    b = a.copy()
    for d in depths:
        integrate_frame(a, np.full((16, 16), d), RigidPose.identity(), intr)
    for d in depths[::-1]:
        integrate_frame(b, np.full((16, 16), d), RigidPose.identity(), intr)
    assert np.max(np.abs(a.tsdf - b.tsdf)) < 1e-6
    c = TsdfVolume(8, 0.05, np.array([-0.2, -0.2, 1.0]), 0.2, max_weight=5)
    for d in depths:
        integrate_frame(c, np.full((16, 16), d), RigidPose.identity(), intr)
    assert c.weight.max() == 5


def test_raycast_plane():
    vol = plane_volume()
    integrate_frame(vol, plane_frame().depth, RigidPose.identity(), INTR)
    maps = raycast_surface(vol, RigidPose.identity(), INTR)
    d = predicted_depth(maps, RigidPose.identity())
    c = INTR.height // 2
    assert maps.valid[c, c]
    assert abs(d[c, c] - 2.0) < 0.5 * vol.voxel_size
    inner = maps.valid.copy()
    inner[:8] = inner[-8:] = False
    inner[:, :8] = inner[:, -8:] = False
    cosang = maps.normals[inner] @ np.array([0, 0, -1.0])
    assert np.degrees(np.arccos(np.clip(cosang, -1, 1))).max() < 2.0


def test_raycast_miss_is_invalid():
    scene = Scene((Sphere((0, 0, 2.0), 0.2, WOOD),))
    vol = TsdfVolume.for_scene(scene, 32, margin=0.1)
    integrate_frame(vol, render_frame(scene, INTR, RigidPose.identity()).depth, RigidPose.identity(), INTR)
    maps = raycast_surface(vol, RigidPose.identity(), INTR)
    assert not maps.valid[0, 0] and maps.valid[32, 32]


def test_raycast_reproduces_fused_frame():
    scene = demo_scene()
    intr = CameraIntrinsics.default(128, 128)
    pose = generate_orbit_trajectory([0, 0, 0.15], 1.2, 0.6, 60, np.pi)[0]
    vol = TsdfVolume.for_scene(scene, 128)
    f = render_frame(scene, intr, pose)
    integrate_frame(vol, f.depth, pose, intr)
    d = predicted_depth(raycast_surface(vol, pose, intr), pose)
    hit = d > 0
    err = np.abs(d - f.depth)
    assert hit.sum() > 1000
    assert np.mean(err[hit & f.valid] < vol.voxel_size) >= 0.95
    # coverage: pixels whose surface lies well inside the volume, away from depth
    # discontinuities and the image border (voxels there are seen by too few rays)
    v = backproject(f.depth, intr)
    world = pose.apply(v.points)
    lo, hi = vol.bounds
    mask = v.valid & np.all((world > lo + vol.truncation) & (world < hi - vol.truncation), axis=-1)
    mask &= ~binary_dilation(depth_edges(f.depth, 0.1), iterations=4)
    mask[:4] = mask[-4:] = False
    mask[:, :4] = mask[:, -4:] = False
    assert mask.sum() > 2000
    assert np.mean(hit[mask] & (err[mask] < vol.voxel_size)) >= 0.95


def test_extract_empty():
    assert len(extract_surface_points(plane_volume(8))) == 0


def test_extract_plane_normals():
    vol = plane_volume()
    integrate_frame(vol, plane_frame().depth, RigidPose.identity(), INTR)
    pts = extract_surface_points(vol)
    assert len(pts) > 100
    assert np.allclose(np.linalg.norm(pts.normals, axis=1), 1, atol=1e-6)
    # tsdf grows towards the camera, so the gradient normal points to -z
    ang = np.degrees(np.arccos(np.clip(pts.normals @ [0, 0, -1.0], -1, 1)))
    assert ang.max() < 5.0
    lo, hi = vol.bounds
    assert np.all(pts.positions >= lo) and np.all(pts.positions <= hi)


def test_extract_sphere_from_orbit():
    sphere = Sphere((0, 0, 0.3), 0.3, WOOD)
    scene = Scene((sphere,))
    vol = TsdfVolume.for_scene(scene, 64, margin=0.2)
    for k, p in enumerate(generate_orbit_trajectory([0, 0, 0.3], 1.2, 0.5, 60)):
        integrate_frame(vol, render_frame(scene, INTR, p).depth, p, INTR)
    pts = extract_surface_points(vol)
    err = np.abs(np.linalg.norm(pts.positions - sphere.center, axis=1) - sphere.radius)
    assert np.mean(err <= vol.voxel_size) >= 0.95


def test_snapshot_roundtrip(tmp_path):
    vol = plane_volume(16)
    integrate_frame(vol, plane_frame().depth, RigidPose.identity(), INTR)
    save_volume(vol, tmp_path / "v.tsdf")
    raw = (tmp_path / "v.tsdf").read_bytes()
    assert raw[:4] == b"TSDF" and len(raw) == 4 + 4 + 4 + 8 + 24 + 8 + 16 ** 3 * 8
    # x-fastest records: record 1 is voxel (1, 0, 0)
    rec = np.frombuffer(raw, "<f4", offset=52)
    assert rec[2] == vol.tsdf[1, 0, 0] and rec[3] == vol.weight[1, 0, 0]
    back = load_volume(tmp_path / "v.tsdf")
    assert back.same_grid(vol) and back.truncation == vol.truncation
    assert np.array_equal(back.tsdf, vol.tsdf) and np.array_equal(back.weight, vol.weight)
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_volume(tmp_path / "bad")
