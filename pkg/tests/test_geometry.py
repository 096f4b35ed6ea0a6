import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation

from kinefit import geometry as geo


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def test_quat_angle_deg_examples():
    assert geo.quat_angle_deg([1, 0, 0, 0]) == 0.0
    s = np.sqrt(0.5)
    assert geo.quat_angle_deg([s, 0.0, 0.0, s]) == pytest.approx(90.0, abs=1e-6)
    # (0.5, 0.5, 0.5, 0.5): closed form 2*atan(sqrt(3)) in degrees
    expected = np.degrees(2.0 * np.arctan(np.sqrt(3.0)))
    assert expected == pytest.approx(120.0, abs=1e-9)
    assert geo.quat_angle_deg([0.5, 0.5, 0.5, 0.5]) == pytest.approx(expected, abs=1e-9)


def test_quat_angle_sign_invariance_and_range():
    rng = np.random.default_rng(0)
    q = random_quats(rng, 500)
    a = geo.quat_angle_deg(q)
    b = geo.quat_angle_deg(-q)
    assert np.array_equal(a, b)
    assert np.all(a >= 0.0) and np.all(a <= 180.0)


def test_quat_angle_zero_norm_rejected():
    with pytest.raises(ValueError):
        geo.quat_angle_deg([0.0, 0.0, 0.0, 0.0])


def test_conversion_round_trips_match_scipy():
    rng = np.random.default_rng(42)
    for q in random_quats(rng, 1000):
        r = geo.Rotation.from_quat(q)
        m = r.as_matrix()
        # orthonormal, right-handed
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-9)
        assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-9)
        # scipy as the independent oracle (xyzw order there)
        m_ref = ScipyRotation.from_quat(np.roll(q, -1)).as_matrix()
        np.testing.assert_allclose(m, m_ref, atol=1e-9)
        # round trips preserve the rotation within 1e-9 rad
        for back in (geo.Rotation.from_matrix(m),
                     geo.Rotation.from_rotvec(r.as_rotvec())):
            rel = back.inverse() @ r
            assert np.radians(rel.angle_deg()) < 1e-9


def test_rotvec_matrix_round_trip():
    rng = np.random.default_rng(9)
    for _ in range(200):
        v = rng.normal(size=3) * rng.uniform(0, np.pi)
        m = geo.rotvec_to_matrix(v)
        np.testing.assert_allclose(
            m, ScipyRotation.from_rotvec(v).as_matrix(), atol=1e-9)
        v_back = geo.matrix_to_rotvec(m)
        np.testing.assert_allclose(geo.rotvec_to_matrix(v_back), m, atol=1e-9)


def test_rotate_world_from_cam():
    r = geo.Rotation.identity()
    np.testing.assert_allclose(geo.rotate_world_from_cam(r, [1, 2, 3]), [1, 2, 3])
    r180 = geo.Rotation.from_rotvec([0, 0, np.pi])
    np.testing.assert_allclose(geo.rotate_world_from_cam(r180, [1, 0, 0]),
                               [-1, 0, 0], atol=1e-12)
    rng = np.random.default_rng(3)
    for _ in range(100):
        r = geo.Rotation.from_quat(random_quats(rng, 1)[0])
        x = rng.normal(size=3)
        y = geo.rotate_world_from_cam(r, x)
        assert np.linalg.norm(y) == pytest.approx(np.linalg.norm(x), abs=1e-9)
        np.testing.assert_allclose(r.inverse().apply(y), x, atol=1e-9)


def test_project_examples():
    k = geo.CameraIntrinsics(fx=1000, fy=1000, cx=540, cy=960, width=1080, height=1920)
    np.testing.assert_allclose(geo.project([0, 0, 1], k), [540, 960])
    np.testing.assert_allclose(geo.project([0.1, 0, 1], k), [640, 960])
    with pytest.raises(geo.PointBehindCameraError):
        geo.project([0, 0, -1], k)
    with pytest.raises(geo.PointBehindCameraError):
        geo.project([0.5, 0.5, 0.0], k)


def test_project_unproject_identity():
    k = geo.CameraIntrinsics(fx=900, fy=1100, cx=500, cy=400, width=1000, height=800)
    rng = np.random.default_rng(8)
    for _ in range(200):
        x = np.array([rng.normal(), rng.normal(), rng.uniform(0.5, 5.0)])
        uv = geo.project(x, k)
        # unproject at the known depth
        back = np.array([(uv[0] - k.cx) / k.fx * x[2],
                         (uv[1] - k.cy) / k.fy * x[2], x[2]])
        np.testing.assert_allclose(back, x, atol=1e-9)
        assert np.max(np.abs(geo.project(back, k) - uv)) < 1e-9


def test_project_batch_masks_behind_camera():
    k = geo.CameraIntrinsics(fx=1000, fy=1000, cx=540, cy=960, width=1080, height=1920)
    pts = np.array([[0, 0, 1.0], [0, 0, -1.0], [0.1, 0, 2.0]])
    uv, valid = geo.project_batch(pts, k)
    assert valid.tolist() == [True, False, True]
    np.testing.assert_allclose(uv[0], [540, 960])
    np.testing.assert_allclose(uv[2], [590, 960])


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        geo.CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
    with pytest.raises(ValueError):
        geo.CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)


def test_quat_median_constant_and_noisy():
    q = np.array([[1.0, 0, 0, 0]] * 5)
    np.testing.assert_allclose(geo.quat_median(q), [1, 0, 0, 0], atol=1e-12)
    # constants with sign flips still give the constant
    q[2] = -q[2]
    np.testing.assert_allclose(geo.quat_median(q), [1, 0, 0, 0], atol=1e-12)
    rng = np.random.default_rng(4)
    base = geo.rotvec_to_quat(np.array([0.3, -0.2, 0.5]))
    samples = []
    for _ in range(101):
        d = geo.rotvec_to_quat(rng.normal(scale=0.02, size=3))
        samples.append(geo.quat_multiply(base, d))
    med = geo.quat_median(samples)
    rel = geo.quat_multiply(geo.quat_conjugate(med), base)
    assert geo.quat_angle_deg(rel) < 1.0


def test_look_at_world_from_cam_properties():
    rng = np.random.default_rng(12)
    for _ in range(50):
        target = rng.normal(size=3) * 3
        if np.linalg.norm(target) < 0.1:
            continue
        m = geo.look_at_world_from_cam(target)
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-12)
        # camera +z maps onto the target direction
        np.testing.assert_allclose(m @ [0, 0, 1], target / np.linalg.norm(target),
                                   atol=1e-12)
