import numpy as np
import pytest

from vischain import camera as cm
from vischain.transforms import Transform, look_at


def identity_cam(fx=100.0, fy=100.0, cx=32.0, cy=32.0, w=64, h=64):
    return cm.CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h)


def test_principal_point_projection():
    uv, vis = cm.project_point(identity_cam(), (0.0, 0.0, 1.0))
    assert vis
    np.testing.assert_allclose(uv, (32, 32), atol=1e-12)


def test_offset_projection():
    uv, vis = cm.project_point(identity_cam(), (0.1, 0.0, 1.0))
    assert vis
    np.testing.assert_allclose(uv, (42, 32), atol=1e-12)


def test_behind_camera_marker():
    uv, vis = cm.project_point(identity_cam(), (0.0, 0.0, -1.0))
    assert not vis


def test_scale_consistency():
    cam = identity_cam()
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = rng.uniform([-1, -1, 0.5], [1, 1, 3])
        lam = rng.uniform(0.1, 10)
        uv1, _ = cm.project_point(cam, p)
        uv2, _ = cm.project_point(cam, lam * p)
        np.testing.assert_allclose(uv1, uv2, atol=1e-9)


def test_rigid_invariance():
    # moving camera and world by the same transform leaves pixels unchanged
    rng = np.random.default_rng(2)
    base = identity_cam()
    move = Transform.from_rpy((0.3, -0.2, 0.9), (0.4, -0.1, 1.2))
    moved = cm.CameraModel(fx=100, fy=100, cx=32, cy=32, width=64, height=64,
                           pose=move.compose(base.pose))
    for _ in range(20):
        p = rng.uniform([-1, -1, 0.5], [1, 1, 3])
        uv1, _ = cm.project_point(base, p)
        uv2, _ = cm.project_point(moved, move.apply(p))
        np.testing.assert_allclose(uv1, uv2, atol=1e-9)


def test_project_chain_all_in_front_matches_pointwise():
    cam = identity_cam()
    segs = np.array([[[0, 0, 1.0], [0.1, 0, 1.0]],
                     [[0.1, 0, 1.0], [0.1, 0.1, 1.5]]])
    poly = cm.project_chain(cam, segs)
    assert poly.visibility.all()
    k = 0
    for seg in segs:
        for p in seg:
            uv, _ = cm.project_point(cam, p)
            np.testing.assert_allclose(poly.points[k], uv, atol=1e-12)
            k += 1


def test_project_chain_fully_behind_is_invisible():
    cam = identity_cam()
    segs = np.array([[[0, 0, -1.0], [0.1, 0, -2.0]]])
    poly = cm.project_chain(cam, segs)
    assert not poly.visibility.any()


def test_straddling_segment_clipped_at_plane():
    cam = identity_cam()
    a = np.array([0.2, 0.1, -0.5])
    b = np.array([-0.1, 0.3, 1.5])
    poly = cm.project_chain(cam, np.array([[a, b]]))
    # independent line-plane solve
    t = (cm.Z_MIN - a[2]) / (b[2] - a[2])
    clipped = a + t * (b - a)
    assert abs(clipped[2] - cm.Z_MIN) < 1e-9
    expect_u = cam.fx * clipped[0] / cm.Z_MIN + cam.cx
    np.testing.assert_allclose(poly.points[0][0], expect_u, rtol=1e-9)


def test_out_of_frame_point_kept_but_flagged():
    cam = identity_cam()
    poly = cm.project_chain(cam, np.array([[[5.0, 0, 1.0], [0.0, 0, 1.0]]]))
    assert not poly.visibility[0] and poly.visibility[1]
    assert poly.points[0][0] > cam.width  # coordinates preserved


def test_camera_json_round_trip(tmp_path):
    cam = cm.CameraModel(fx=60, fy=60, cx=32, cy=32, width=64, height=64,
                         pose=look_at((2.3, 0.0, 1.5), (0, 0, 0)))
    path = tmp_path / "cam.json"
    cm.save_camera(cam, path)
    again = cm.load_camera(path)
    assert (again.fx, again.fy, again.width, again.height) == (60, 60, 64, 64)
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = rng.uniform(-1, 1, 3)
        u1, v1 = cm.project_point(cam, p)[0]
        u2, v2 = cm.project_point(again, p)[0]
        np.testing.assert_allclose((u1, v1), (u2, v2), atol=1e-9)


def test_invalid_intrinsics_rejected():
    with pytest.raises(ValueError):
        identity_cam(fx=-1.0)
    with pytest.raises(ValueError):
        identity_cam(cx=64.0)


def test_look_at_points_z_axis_at_target():
    pose = look_at((2.0, 1.0, 3.0), (0.0, 0.0, 0.0))
    fwd = pose.matrix() @ np.array([0.0, 0.0, 1.0])
    want = -np.array([2.0, 1.0, 3.0]) / np.linalg.norm([2.0, 1.0, 3.0])
    np.testing.assert_allclose(fwd, want, atol=1e-12)


def test_transform_compose_inverse():
    rng = np.random.default_rng(4)
    for _ in range(10):
        t1 = Transform.from_rpy(rng.uniform(-1, 1, 3), rng.uniform(-3, 3, 3))
        t2 = Transform.from_rpy(rng.uniform(-1, 1, 3), rng.uniform(-3, 3, 3))
        p = rng.uniform(-2, 2, 3)
        np.testing.assert_allclose(t1.compose(t2).apply(p), t1.apply(t2.apply(p)),
                                   atol=1e-12)
        np.testing.assert_allclose(t1.inverse().apply(t1.apply(p)), p, atol=1e-12)
