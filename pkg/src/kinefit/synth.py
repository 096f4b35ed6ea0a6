"""Ground-truth generator for end-to-end tests.

Parametric whole-body motions are rendered through the default skeleton and
a scripted camera into exactly the observation streams the loaders ingest:
2D/3D keypoints with confidences, camera intrinsics, and an orientation
stream.  Ground truth (pose series, body scale, gait events) is emitted
alongside, so fits can be scored against a known answer.

The camera sits at the world origin for static and orbiting paths (the
orbit is rotation-only, which is the configuration translation-error
evaluation is restricted to); the follow path translates behind the subject
and emits keypoints relative to its own moving position.

Noise model: 2D keypoints get isotropic pixel noise; 3D keypoints get
camera-frame noise with a configurable multiplier along the optical axis
(monocular depth is the least constrained direction); confidences follow
the 30 mm logistic applied to a scripted detector uncertainty, with
occlusion windows forcing zero confidence.  Everything is deterministic
given the seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fitting import ObservationSet, confidence_from_std
from .gait import EventDetectorConfig, GaitEvents, detect_events_kinematic
from .geometry import (CameraIntrinsics, look_at_world_from_cam, matrix_to_quat,
                       quat_multiply, rotvec_to_quat)
from .skeleton import (BodyScale, SkeletonDefinition, forward_kinematics_arrays,
                       N_COORDS)

__all__ = [
    "CoordCurve",
    "MotionScript",
    "NoiseSpec",
    "OcclusionWindow",
    "CameraPath",
    "SynthTrial",
    "gait_script",
    "tug_script",
    "standing_script",
    "generate",
    "view_classify",
    "DEFAULT_INTRINSICS",
]

DEFAULT_INTRINSICS = CameraIntrinsics(fx=1000.0, fy=1000.0, cx=540.0, cy=960.0,
                                      width=1080, height=1920)


@dataclass
class CoordCurve:
    """offset + slope*t + sum of sinusoids; degrees for rotational
    coordinates, meters for translations."""

    offset: float = 0.0
    slope: float = 0.0
    terms: list[tuple[float, float, float]] = field(default_factory=list)
    # each term: (amplitude, frequency_hz, phase_rad)

    def sample(self, t: np.ndarray) -> np.ndarray:
        out = self.offset + self.slope * t
        for amp, freq, phase in self.terms:
            out = out + amp * np.sin(2.0 * math.pi * freq * t + phase)
        return out


@dataclass
class MotionScript:
    """Parametric body motion plus the true body scale."""

    kind: str                       # gait | tug | standing
    duration: float
    fps: float = 30.0
    curves: dict[str, CoordCurve] = field(default_factory=dict)
    body_scale: BodyScale = field(default_factory=BodyScale.neutral)
    cadence_hz: float = 0.9

    def __post_init__(self):
        if self.duration <= 1.0:
            raise ValueError("trial duration must exceed 1 s")

    def frame_times(self) -> np.ndarray:
        return np.arange(int(round(self.duration * self.fps))) / self.fps

    def pose_series(self, defn: SkeletonDefinition, times: np.ndarray) -> np.ndarray:
        """(F, 40) pose series in radians/meters; validates joint limits."""
        poses = np.zeros((len(times), N_COORDS))
        for name, curve in self.curves.items():
            i = defn.coord_index[name]
            vals = curve.sample(times)
            if defn.coords[i].kind != "translational":
                vals = np.radians(vals)
                lo, hi = defn.coords[i].lo, defn.coords[i].hi
                if vals.min() < lo or vals.max() > hi:
                    raise ValueError(
                        f"curve for {name!r} leaves its limits "
                        f"[{math.degrees(lo):.0f}, {math.degrees(hi):.0f}] deg")
            poses[:, i] = vals
        return poses


@dataclass
class OcclusionWindow:
    sites: list[str]
    t_start: float
    t_end: float


@dataclass
class NoiseSpec:
    """Observation corruption; all sigmas >= 0, deterministic given seed."""

    sigma_2d_px: float = 0.0
    sigma_3d_cm: float = 0.0
    depth_noise_multiplier: float = 1.0
    keypoint_std_mm: float = 0.0     # drives the confidence logistic
    sigma_orient_deg: float = 0.0
    occlusions: list[OcclusionWindow] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_2d_px", "sigma_3d_cm", "keypoint_std_mm", "sigma_orient_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.depth_noise_multiplier < 0:
            raise ValueError("depth_noise_multiplier must be non-negative")


@dataclass
class CameraPath:
    """Scripted camera: static or orbiting at the origin, or following."""

    kind: str = "static"             # static | orbit | follow
    target: np.ndarray | None = None  # static: fixed look-at point (world)
    follow_distance: float = 3.0
    follow_height: float = 0.9       # camera height above the pelvis
    imu_rate_hz: float = 30.0

    def world_from_cam(self, pelvis_pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample rotation (N, 3, 3) and camera position (N, 3)."""
        pelvis_pos = np.atleast_2d(pelvis_pos)
        n = len(pelvis_pos)
        if self.kind == "static":
            target = self.target if self.target is not None else pelvis_pos.mean(axis=0)
            rot = look_at_world_from_cam(np.asarray(target, dtype=np.float64))
            return np.broadcast_to(rot, (n, 3, 3)).copy(), np.zeros((n, 3))
        if self.kind == "orbit":
            rots = np.stack([look_at_world_from_cam(p) for p in pelvis_pos])
            return rots, np.zeros((n, 3))
        if self.kind == "follow":
            # trail the subject's smoothed horizontal direction of travel
            mean = pelvis_pos.mean(axis=0)
            disp = pelvis_pos - mean
            heading = pelvis_pos[-1] - pelvis_pos[0]
            heading[2] = 0.0
            hn = np.linalg.norm(heading)
            heading = heading / hn if hn > 1e-6 else np.array([1.0, 0.0, 0.0])
            del disp
            cam_pos = pelvis_pos - self.follow_distance * heading
            cam_pos[:, 2] += self.follow_height
            rots = np.stack([look_at_world_from_cam(p - c)
                             for p, c in zip(pelvis_pos, cam_pos)])
            return rots, cam_pos
        raise ValueError(f"unknown camera kind {self.kind!r}")


@dataclass
class SynthTrial:
    """One generated trial: observations plus the ground truth behind them."""

    observations: ObservationSet
    true_poses: np.ndarray           # (F, 40)
    true_events: GaitEvents | None
    true_body_scale: BodyScale
    cam_rot: np.ndarray              # (F, 3, 3) world-from-camera at frames
    cam_pos: np.ndarray              # (F, 3)
    script: MotionScript


# --- motion templates ---------------------------------------------------------

def _leg_curves(cadence_hz: float, phase: float, amp_scale: float) -> dict[str, CoordCurve]:
    f0 = cadence_hz
    a = amp_scale
    return {
        "hip_flexion": CoordCurve(10.0, 0.0, [(25.0 * a, f0, phase)]),
        "hip_adduction": CoordCurve(0.0, 0.0, [(5.0 * a, f0, phase + 1.2)]),
        "hip_rotation": CoordCurve(0.0, 0.0, [(4.0 * a, f0, phase + 0.5)]),
        "knee_flexion": CoordCurve(30.0, 0.0, [(22.0 * a, f0, phase - 1.1),
                                               (16.0 * a, 2 * f0, 2 * phase + 0.4)]),
        "ankle_flexion": CoordCurve(-5.0, 0.0, [(12.0 * a, f0, phase + 0.6)]),
        "subtalar": CoordCurve(0.0, 0.0, [(4.0 * a, f0, phase + 0.2)]),
        "mtp": CoordCurve(5.0, 0.0, [(8.0 * a, f0, phase + 1.5)]),
    }


def _arm_curves(cadence_hz: float, phase: float, amp_scale: float) -> dict[str, CoordCurve]:
    f0 = cadence_hz
    a = amp_scale
    return {
        "arm_flexion": CoordCurve(0.0, 0.0, [(18.0 * a, f0, phase)]),
        "arm_adduction": CoordCurve(-8.0, 0.0, [(4.0 * a, f0, phase + 0.5)]),
        "arm_rotation": CoordCurve(0.0, 0.0, [(5.0 * a, f0, phase + 0.9)]),
        "elbow_flexion": CoordCurve(35.0, 0.0, [(12.0 * a, f0, phase)]),
        "forearm_pronation": CoordCurve(10.0, 0.0, [(5.0 * a, f0, phase + 0.2)]),
        "wrist_flexion": CoordCurve(0.0, 0.0, [(6.0 * a, f0, phase + 0.8)]),
        "wrist_deviation": CoordCurve(0.0, 0.0, [(4.0 * a, f0, phase + 0.1)]),
    }


def _trunk_curves(cadence_hz: float, amp_scale: float) -> dict[str, CoordCurve]:
    f0 = cadence_hz
    a = amp_scale
    return {
        "pelvis_rot_x": CoordCurve(0.0, 0.0, [(2.0 * a, f0, 0.0)]),
        "pelvis_rot_z": CoordCurve(0.0, 0.0, [(4.0 * a, f0, 0.7)]),
        "lumbar_extension": CoordCurve(-5.0, 0.0, [(4.0 * a, 2 * f0, 0.0)]),
        "lumbar_bending": CoordCurve(0.0, 0.0, [(4.0 * a, f0, 2.0)]),
        "lumbar_rotation": CoordCurve(0.0, 0.0, [(6.0 * a, f0, 0.3)]),
        "neck_extension": CoordCurve(5.0, 0.0, [(4.0 * a, 2 * f0, 1.0)]),
        "neck_bending": CoordCurve(0.0, 0.0, [(3.0 * a, f0, 0.7)]),
        "neck_rotation": CoordCurve(0.0, 0.0, [(4.0 * a, f0, 1.0)]),
    }


def _assemble(trunk, left_leg, right_leg, left_arm, right_arm) -> dict[str, CoordCurve]:
    curves = dict(trunk)
    for side, leg, arm in (("l", left_leg, left_arm), ("r", right_leg, right_arm)):
        curves.update({f"{k}_{side}": v for k, v in leg.items()})
        curves.update({f"{k}_{side}": v for k, v in arm.items()})
    return curves


def gait_script(duration: float = 10.0, cadence_hz: float = 0.9,
                start: tuple[float, float, float] = (0.0, 4.0, -0.25),
                travel: tuple[float, float] = (1.6, 0.0),
                heading_deg: float = 0.0,
                asymmetry: float = 1.0,
                amplitude_scale: float = 1.0,
                bob_m: float = 0.02,
                body_scale: BodyScale | None = None,
                fps: float = 30.0) -> MotionScript:
    """Cyclic walking with arm swing and slow drift across ``travel`` (m).

    ``asymmetry`` scales the right side's leg amplitudes (1.0 symmetric,
    lower values mimic a lateralized impairment); the subject oscillates
    once across the travel span so it stays inside a static camera's view.
    """
    f0 = cadence_hz
    a = amplitude_scale
    trunk = _trunk_curves(f0, a)
    drift_f = 0.5 / duration
    heading = math.radians(heading_deg)
    dx, dy = travel
    trunk["pelvis_tx"] = CoordCurve(start[0], 0.0, [(0.5 * dx, drift_f, 0.0)] if dx else [])
    trunk["pelvis_ty"] = CoordCurve(start[1], 0.0, [(0.5 * dy, drift_f, 0.0)] if dy else [])
    trunk["pelvis_tz"] = CoordCurve(start[2], 0.0, [(bob_m, 2 * f0, 0.0)])
    if heading_deg:
        trunk["pelvis_rot_z"] = CoordCurve(
            heading_deg, 0.0, trunk["pelvis_rot_z"].terms)
    del heading
    return MotionScript(
        kind="gait", duration=duration, fps=fps,
        curves=_assemble(trunk,
                         _leg_curves(f0, 0.0, a),
                         _leg_curves(f0, math.pi, a * asymmetry),
                         _arm_curves(f0, math.pi, a),
                         _arm_curves(f0, 0.0, a * (0.5 + 0.5 * asymmetry))),
        body_scale=body_scale or BodyScale.neutral(),
        cadence_hz=f0)


def tug_script(duration: float = 12.0, cadence_hz: float = 0.9,
               start: tuple[float, float, float] = (2.0, 0.0, -0.25),
               out_distance: float = 3.0,
               body_scale: BodyScale | None = None,
               fps: float = 30.0) -> MotionScript:
    """Out-and-back walk with a smooth 180-degree turn at the far point.

    The subject walks away along +x and returns, turning continuously; a
    rotation-only camera at the origin can track the whole trial.
    """
    f0 = cadence_hz
    trunk = _trunk_curves(f0, 1.0)
    # out-and-back profile: 0 -> out_distance -> 0 over the trial
    trunk["pelvis_tx"] = CoordCurve(start[0] + 0.5 * out_distance, 0.0,
                                    [(0.5 * out_distance, 1.0 / duration,
                                      -math.pi / 2)])
    trunk["pelvis_ty"] = CoordCurve(start[1])
    trunk["pelvis_tz"] = CoordCurve(start[2], 0.0, [(0.02, 2 * f0, 0.0)])
    # heading: faces +x on the way out, -x on the way back
    trunk["pelvis_rot_z"] = CoordCurve(90.0, 0.0, [(90.0, 0.5 / duration, -math.pi / 2)])
    return MotionScript(
        kind="tug", duration=duration, fps=fps,
        curves=_assemble(trunk,
                         _leg_curves(f0, 0.0, 1.0),
                         _leg_curves(f0, math.pi, 1.0),
                         _arm_curves(f0, math.pi, 1.0),
                         _arm_curves(f0, 0.0, 1.0)),
        body_scale=body_scale or BodyScale.neutral(),
        cadence_hz=f0)


def standing_script(duration: float = 6.0,
                    start: tuple[float, float, float] = (0.0, 3.0, -0.25),
                    sway_deg: float = 1.0,
                    body_scale: BodyScale | None = None,
                    fps: float = 30.0) -> MotionScript:
    """Quiet standing with millimetric sway; no gait events."""
    curves = {
        "pelvis_tx": CoordCurve(start[0]),
        "pelvis_ty": CoordCurve(start[1]),
        "pelvis_tz": CoordCurve(start[2], 0.0, [(0.002, 0.3, 0.0)]),
        "pelvis_rot_x": CoordCurve(0.0, 0.0, [(sway_deg, 0.25, 0.0)]),
        "lumbar_extension": CoordCurve(-3.0, 0.0, [(sway_deg, 0.2, 1.0)]),
        "elbow_flexion_l": CoordCurve(15.0),
        "elbow_flexion_r": CoordCurve(15.0),
    }
    return MotionScript(kind="standing", duration=duration, fps=fps, curves=curves,
                        body_scale=body_scale or BodyScale.neutral())


# --- generation ---------------------------------------------------------------

def _pelvis_positions(script: MotionScript, defn: SkeletonDefinition,
                      times: np.ndarray) -> np.ndarray:
    poses = script.pose_series(defn, times)
    return poses[:, 0:3]


def _orientation_stream(script: MotionScript, defn: SkeletonDefinition,
                        camera: CameraPath, noise: NoiseSpec,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    imu_times = np.arange(int(round(script.duration * camera.imu_rate_hz))) \
        / camera.imu_rate_hz
    pelvis = _pelvis_positions(script, defn, imu_times)
    rot, _ = camera.world_from_cam(pelvis)
    quats = np.stack([matrix_to_quat(r) for r in rot])
    if noise.sigma_orient_deg > 0:
        sigma = math.radians(noise.sigma_orient_deg)
        wobble = rng.normal(0.0, sigma, size=(len(quats), 3))
        quats = np.stack([quat_multiply(q, rotvec_to_quat(w))
                          for q, w in zip(quats, wobble)])
    # keep the stream sign-continuous
    for i in range(1, len(quats)):
        if quats[i] @ quats[i - 1] < 0:
            quats[i] = -quats[i]
    return imu_times, quats


def _truth_events(script: MotionScript, defn: SkeletonDefinition,
                  oversample: int = 10) -> GaitEvents | None:
    """Contact events defined kinematically on an oversampled noiseless
    trajectory (heel-height minima / forward-velocity threshold crossings)."""
    if script.kind == "standing":
        return None
    times = np.arange(int(round(script.duration * script.fps * oversample))) \
        / (script.fps * oversample)
    poses = script.pose_series(defn, times)
    markers = forward_kinematics_arrays(defn, poses, script.body_scale)
    cfg = EventDetectorConfig(smooth_window=5 * oversample,
                              refine_window_s=0.12)
    events = detect_events_kinematic(times, markers, defn.site_index, config=cfg)
    if len(events.all_ics()) == 0:
        return None
    return GaitEvents(events.ic_left, events.to_left, events.ic_right,
                      events.to_right, source="ingested")


def generate(script: MotionScript, camera: CameraPath, noise: NoiseSpec,
             defn: SkeletonDefinition,
             intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
             trial_id: str = "synth-0",
             max_out_of_view_s: float = 1.0) -> SynthTrial:
    """Render a script through a camera into loader-ready observations."""
    rng = np.random.default_rng(noise.seed)
    times = script.frame_times()
    poses = script.pose_series(defn, times)
    markers = forward_kinematics_arrays(defn, poses, script.body_scale)
    rot, cam_pos = camera.world_from_cam(poses[:, 0:3])

    rel = markers - cam_pos[:, None, :]
    x_c_true = np.einsum("fji,fkj->fki", rot, rel)
    z = x_c_true[..., 2]
    behind = z <= 0
    z_safe = np.where(behind, 1.0, z)
    u_true = np.stack([intrinsics.fx * x_c_true[..., 0] / z_safe + intrinsics.cx,
                       intrinsics.fy * x_c_true[..., 1] / z_safe + intrinsics.cy],
                      axis=-1)
    in_view = ~np.any(
        behind
        | (u_true[..., 0] < 0) | (u_true[..., 0] >= intrinsics.width)
        | (u_true[..., 1] < 0) | (u_true[..., 1] >= intrinsics.height), axis=1)
    out_of_view_s = float((~in_view).sum()) / script.fps
    if out_of_view_s > max_out_of_view_s:
        raise ValueError(
            f"subject outside the camera frustum for {out_of_view_s:.2f} s "
            f"(> {max_out_of_view_s} s); adjust the camera or travel")

    axis_sigma = np.array([1.0, 1.0, noise.depth_noise_multiplier]) \
        * (noise.sigma_3d_cm / 100.0)
    x_c = x_c_true + rng.normal(size=x_c_true.shape) * axis_sigma
    u = u_true + rng.normal(size=u_true.shape) * noise.sigma_2d_px

    conf = np.full(z.shape, confidence_from_std(noise.keypoint_std_mm))
    for window in noise.occlusions:
        rows = (times >= window.t_start) & (times <= window.t_end)
        cols = [defn.site_index[s] for s in window.sites]
        conf[np.ix_(rows, cols)] = 0.0

    imu_times, quats = _orientation_stream(script, defn, camera, noise, rng)
    obs = ObservationSet(trial_id=trial_id, times=times, kp2d=u, kp3d=x_c,
                         conf=conf, in_view=in_view, intrinsics=intrinsics,
                         orient_times=imu_times, orient_quats=quats,
                         activity=script.kind)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        events = _truth_events(script, defn)
    return SynthTrial(observations=obs, true_poses=poses, true_events=events,
                      true_body_scale=script.body_scale, cam_rot=rot,
                      cam_pos=cam_pos, script=script)


def view_classify(cam_pos: np.ndarray, pelvis_pos: np.ndarray,
                  heading: np.ndarray | None = None,
                  reference_side: str = "right") -> list[str]:
    """Per-frame camera bearing labels relative to the subject's heading.

    Quadrants split at 45 degrees: front, back, or a side; the side matching
    ``reference_side`` is ipsilateral.  Heading defaults to the horizontal
    velocity direction, falling back to the previous frame's heading when
    nearly stationary.
    """
    cam_pos = np.atleast_2d(np.asarray(cam_pos, dtype=np.float64))
    pelvis = np.atleast_2d(np.asarray(pelvis_pos, dtype=np.float64))
    if cam_pos.shape[0] == 1:
        cam_pos = np.broadcast_to(cam_pos, pelvis.shape)
    n = len(pelvis)
    if heading is None:
        vel = np.gradient(pelvis, axis=0)
        vel[:, 2] = 0.0
        heading_arr = np.zeros((n, 3))
        last = np.array([1.0, 0.0, 0.0])
        for i in range(n):
            speed = np.linalg.norm(vel[i])
            if speed > 1e-3:
                last = vel[i] / speed
            heading_arr[i] = last
    else:
        heading_arr = np.broadcast_to(
            np.asarray(heading, dtype=np.float64), (n, 3)).copy()
        heading_arr[:, 2] = 0.0
        heading_arr /= np.linalg.norm(heading_arr, axis=1, keepdims=True)

    labels = []
    for i in range(n):
        to_cam = cam_pos[i] - pelvis[i]
        to_cam[2] = 0.0
        fwd = float(to_cam @ heading_arr[i])
        lateral = float(heading_arr[i][0] * to_cam[1] - heading_arr[i][1] * to_cam[0])
        bearing = math.degrees(math.atan2(lateral, fwd))
        if abs(bearing) <= 45.0:
            labels.append("front")
        elif abs(bearing) >= 135.0:
            labels.append("back")
        else:
            # positive lateral = camera on the subject's left
            side = "left" if bearing > 0 else "right"
            labels.append("ipsilateral" if side == reference_side else "contralateral")
    return labels
