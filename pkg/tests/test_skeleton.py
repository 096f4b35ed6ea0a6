import numpy as np
import pytest

from kinefit import autodiff as ad
from kinefit import skeleton
from kinefit.autodiff import Tape, Tensor
from kinefit.skeleton import BodyScale, Pose, forward_kinematics, forward_kinematics_arrays

from conftest import random_pose
from fk_reference import reference_fk


def test_default_model_shape(defn):
    assert len(defn.coords) == 40
    assert len(defn.sites) == 87
    assert len(defn.groups) == 8
    assert defn.coord_names[0] == "pelvis_tx"
    assert all(c.lo < c.hi for c in defn.coords)


def test_zero_pose_matches_rest_chain(defn):
    markers = forward_kinematics_arrays(defn, np.zeros(40), BodyScale.neutral())
    ref = reference_fk(defn, np.zeros(40), np.ones(8), np.zeros((87, 3)))
    np.testing.assert_allclose(markers, ref, atol=1e-12)
    # spot values composed by hand down the chain
    top = defn.site_index["TOPH"]
    np.testing.assert_allclose(markers[top], [0.0, 0.0, 0.10 + 0.45 + 0.20])


def test_overall_scale_doubles_relative_positions(defn):
    neutral = BodyScale.neutral()
    doubled = BodyScale(np.array([2.0] + [1.0] * 7), np.zeros((87, 3)))
    pose = np.zeros(40)
    pose[0:3] = [0.4, -0.2, 0.1]
    m1 = forward_kinematics_arrays(defn, pose, neutral)
    m2 = forward_kinematics_arrays(defn, pose, doubled)
    root = pose[0:3]
    np.testing.assert_allclose(m2 - root, 2.0 * (m1 - root), atol=1e-12)


def test_fk_matches_homogeneous_transform_oracle(defn, rng):
    for _ in range(25):
        pose = random_pose(defn, rng)
        scales = rng.uniform(0.8, 1.3, size=8)
        offsets = rng.uniform(-0.05, 0.05, size=(87, 3))
        ours = forward_kinematics_arrays(defn, pose, BodyScale(scales, offsets))
        ref = reference_fk(defn, pose, scales, offsets)
        np.testing.assert_allclose(ours, ref, atol=1e-10)


def test_knee_flexion_rotates_distal_sites(defn):
    pose = np.zeros(40)
    pose[defn.coord_index["knee_flexion_l"]] = np.pi / 2
    ref = reference_fk(defn, pose, np.ones(8), np.zeros((87, 3)))
    ours = forward_kinematics_arrays(defn, pose, BodyScale.neutral())
    np.testing.assert_allclose(ours, ref, atol=1e-10)
    # heel swings backward relative to the straight-leg rest position
    rest = forward_kinematics_arrays(defn, np.zeros(40), BodyScale.neutral())
    heel = defn.site_index["LHEEL"]
    assert ours[heel][0] < rest[heel][0] - 0.2
    # thigh sites unaffected
    thigh = defn.site_index["LTHI1"]
    np.testing.assert_allclose(ours[thigh], rest[thigh], atol=1e-12)


def test_scale_group_locality(defn, rng):
    pose = random_pose(defn, rng)
    base = BodyScale.neutral()
    tweaked = BodyScale(np.array([1, 1, 1, 1, 1, 1, 1.4, 1.0]), np.zeros((87, 3)))
    m0 = forward_kinematics_arrays(defn, pose, base)
    m1 = forward_kinematics_arrays(defn, pose, tweaked)
    left_arm = {i for i, s in enumerate(defn.sites)
                if s.body in ("humerus_l", "ulna_l", "radius_l", "hand_l")}
    for i in range(87):
        if i in left_arm:
            continue
        assert np.array_equal(m0[i], m1[i]), defn.sites[i].name


def test_link_frames_stay_right_handed(defn, rng):
    # rotation blocks of every chain stay proper; probe via site triangles
    for _ in range(5):
        pose = random_pose(defn, rng)
        markers = forward_kinematics_arrays(defn, pose, BodyScale.neutral())
        assert np.all(np.isfinite(markers))
    # the pelvis frame itself: feed basis vectors through the root rotation
    rv = np.array([0.3, -1.2, 0.7])
    from kinefit.geometry import rotvec_to_matrix
    m = rotvec_to_matrix(rv)
    assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-12)


def test_fk_gradients_match_finite_differences(defn, rng):
    pose0 = random_pose(defn, rng)
    scales0 = rng.uniform(0.9, 1.2, size=8)
    offs0 = rng.uniform(-0.03, 0.03, size=(87, 3))
    w = rng.normal(size=(87, 3))  # random projection to a scalar

    def loss_np(pose_flat, scales, offs):
        out = forward_kinematics_arrays(
            defn, pose_flat, BodyScale(scales, offs))
        return float(np.sum(out * w))

    pose_p = ad.parameter(pose0[None, :])
    scale_p = ad.parameter(scales0)
    off_p = ad.parameter(offs0)
    with Tape() as tape:
        out = forward_kinematics(defn, pose_p, scale_p, off_p)
        loss = ad.reduce_sum(ad.mul(out, Tensor(w[None, :, :])))
    g_pose, g_scale, g_off = tape.gradients(loss, [pose_p, scale_p, off_p])

    fd_pose = ad.finite_difference(lambda p: loss_np(p[0], scales0, offs0),
                                   pose0[None, :].copy())
    np.testing.assert_allclose(g_pose, fd_pose, rtol=1e-5, atol=1e-7)
    fd_scale = ad.finite_difference(lambda s: loss_np(pose0, s, offs0), scales0.copy())
    np.testing.assert_allclose(g_scale, fd_scale, rtol=1e-5, atol=1e-7)
    # sample a few site-offset entries rather than all 261
    fd_off = ad.finite_difference(lambda o: loss_np(pose0, scales0, o), offs0.copy())
    np.testing.assert_allclose(g_off, fd_off, rtol=1e-5, atol=1e-7)


def test_fk_batched_equals_per_pose(defn, rng):
    poses = np.stack([random_pose(defn, rng) for _ in range(4)])
    bs = BodyScale.neutral()
    batched = forward_kinematics_arrays(defn, poses, bs)
    for i in range(4):
        single = forward_kinematics_arrays(defn, poses[i], bs)
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_fk_rejects_nonfinite(defn):
    pose = np.zeros(40)
    pose[5] = np.nan
    with pytest.raises(ValueError):
        forward_kinematics_arrays(defn, pose, BodyScale.neutral())


def test_clamp_report(defn):
    assert skeleton.clamp_report(defn, Pose.zero()) == []
    pose = Pose.zero()
    hi = defn.coords[defn.coord_index["hip_flexion_l"]].hi
    pose.set(defn, "hip_flexion_l", hi)
    assert skeleton.clamp_report(defn, pose) == ["hip_flexion_l"]
    rng = np.random.default_rng(0)
    for _ in range(200):
        coords = np.zeros(40)
        i = rng.integers(6, 40)
        c = defn.coords[i]
        u = rng.uniform(-1.05, 1.05)
        coords[i] = 0.5 * (c.hi + c.lo) + 0.5 * (c.hi - c.lo) * u
        flagged = skeleton.clamp_report(defn, coords)
        assert (c.name in flagged) == (abs(u) >= 0.999)


def test_body_scale_validation():
    with pytest.raises(ValueError):
        BodyScale(np.full(8, 0.4), np.zeros((87, 3)))
    with pytest.raises(ValueError):
        BodyScale(np.ones(8), np.full((87, 3), 0.2))


def test_model_file_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("schema skeleton/1\ngroup only_one\n")
    with pytest.raises(skeleton.ModelFileError):
        skeleton.load_model(str(bad))


def test_model_env_override(defn, tmp_path, monkeypatch):
    from importlib import resources
    text = resources.files("kinefit.data").joinpath("skeleton_default.txt").read_text()
    alt = tmp_path / "model.txt"
    alt.write_text(text)
    monkeypatch.setenv(skeleton.MODEL_PATH_ENV, str(alt))
    loaded = skeleton.load_default_model()
    assert loaded.coord_names == defn.coord_names
