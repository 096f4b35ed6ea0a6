"""Losses and the bilevel session optimizer.

A session holds one trajectory network per trial plus a single shared body
scale.  Each iteration samples a batch of times per trial (snapped to
observed frames), evaluates the networks, runs forward kinematics, and
combines three terms:

- a 3D keypoint term in centimeters, computed after removing each point
  set's mean translation, robustified quadratically within 10 cm;
- a 2D reprojection term in pixels through the calibrated pinhole camera
  (camera at the world origin with the predicted orientation; the pelvis
  translation absorbs any camera motion), quadratic within 5 px;
- an orientation term in degrees against the phone's measured quaternions.

The weighted sum backpropagates through the networks and the shared scale;
Adam with decoupled weight decay (networks only) and an exponentially
decaying learning rate performs the update.  Everything is deterministic
given the config seed.  Trials are evaluated in index order each iteration,
so gradient accumulation into the shared scale has a fixed reduction order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .geometry import CameraIntrinsics, rotvec_to_quat
from .implicit import NetConfig, TrajectoryNet, init_for_trial
from .skeleton import (BodyScale, SkeletonDefinition, forward_kinematics,
                       rotvec_matrices, N_SITES, SCALE_LO, SCALE_HI,
                       SITE_OFFSET_BOUND)

__all__ = [
    "ObservationSet",
    "FitConfig",
    "SessionFit",
    "NumericalAbort",
    "confidence_from_std",
    "loss_3d",
    "loss_2d",
    "loss_phone",
    "total_loss",
    "AdamState",
    "adam_step",
    "lr_at",
    "fit_session",
    "predict_trial",
    "residuals",
]


class NumericalAbort(RuntimeError):
    """The total loss became non-finite; names the first bad tensor."""


@dataclass
class ObservationSet:
    """Per-trial detections and sensor streams.

    2D keypoints are pixels, 3D keypoints are camera-frame meters,
    confidences lie in [0, 1], and the orientation stream carries
    world-from-camera unit quaternions (w, x, y, z) on its own clock.
    """

    trial_id: str
    times: np.ndarray          # (F,) seconds, strictly increasing
    kp2d: np.ndarray           # (F, 87, 2) px
    kp3d: np.ndarray           # (F, 87, 3) m
    conf: np.ndarray           # (F, 87) in [0, 1]
    in_view: np.ndarray        # (F,) bool
    intrinsics: CameraIntrinsics
    orient_times: np.ndarray   # (M,) seconds
    orient_quats: np.ndarray   # (M, 4) wxyz
    activity: str = "walking"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.kp2d = np.asarray(self.kp2d, dtype=np.float64)
        self.kp3d = np.asarray(self.kp3d, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        self.in_view = np.asarray(self.in_view, dtype=bool)
        self.orient_times = np.asarray(self.orient_times, dtype=np.float64)
        self.orient_quats = np.asarray(self.orient_quats, dtype=np.float64).reshape(-1, 4)
        f = len(self.times)
        if f < 1:
            raise ValueError(f"trial {self.trial_id!r}: no frames")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"trial {self.trial_id!r}: timestamps must be strictly increasing")
        for name, arr, shape in (("kp2d", self.kp2d, (f, N_SITES, 2)),
                                 ("kp3d", self.kp3d, (f, N_SITES, 3)),
                                 ("conf", self.conf, (f, N_SITES)),
                                 ("in_view", self.in_view, (f,))):
            if arr.shape != shape:
                raise ValueError(f"trial {self.trial_id!r}: {name} has shape {arr.shape}, expected {shape}")
        if np.any(self.conf < 0) or np.any(self.conf > 1):
            raise ValueError(f"trial {self.trial_id!r}: confidences must lie in [0, 1]")
        if len(self.orient_times) != len(self.orient_quats):
            raise ValueError(f"trial {self.trial_id!r}: orientation stream lengths differ")
        if len(self.orient_times) and np.any(np.diff(self.orient_times) <= 0):
            raise ValueError(f"trial {self.trial_id!r}: orientation timestamps must increase")

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def has_orientation(self) -> bool:
        return len(self.orient_times) > 0


@dataclass
class FitConfig:
    """Loss weights, robustness scales and optimizer schedule.

    ``iterations`` defaults to the desk-scale 2,000; production-scale runs
    raise it (the published schedule used 25,000).
    """

    lambda_3d: float = 1.0
    lambda_2d: float = 0.1
    lambda_phone: float = 1.0
    huber_delta_3d_cm: float = 10.0
    huber_delta_2d_px: float = 5.0
    iterations: int = 2000
    batch_size: int = 300
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    weight_decay: float = 1e-5
    # Constant joint-angle biases and per-site offset corrections span a
    # nearly flat valley of the loss; damping the correction updates keeps
    # the optimizer out of it, in the spirit of gauge damping in bundle
    # adjustment.  1.0 restores fully symmetric updates.
    offset_lr_scale: float = 0.1
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        for name in ("lambda_3d", "lambda_2d", "lambda_phone", "huber_delta_3d_cm",
                     "huber_delta_2d_px", "batch_size", "lr_start", "lr_end"):
            if getattr(self, name) <= 0 and not name.startswith("lambda"):
                raise ValueError(f"{name} must be positive")
            if name.startswith("lambda") and getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if not 0 <= self.offset_lr_scale <= 1:
            raise ValueError("offset_lr_scale must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def confidence_from_std(std_mm) -> np.ndarray | float:
    """Detector uncertainty (mm) -> confidence via a logistic with half
    maximum at 30 mm and width 10 mm."""
    std_mm = np.asarray(std_mm, dtype=np.float64)
    if np.any(std_mm < 0):
        raise ValueError("standard deviation must be non-negative")
    out = ad.sigmoid_np((30.0 - std_mm) / 10.0)
    return float(out) if out.ndim == 0 else out


def rotation_matrices_from_rotvec(rv: Tensor) -> Tensor:
    """Differentiable (B, 3, 3) rotation matrices from rotation vectors."""
    return rotvec_matrices(rv)


def quats_from_rotvec(rv: Tensor) -> Tensor:
    """Differentiable (B, 4) wxyz quaternions from rotation vectors (B, 3)."""
    batch = rv.shape[0]
    s = ad.reduce_sum(ad.mul(rv, rv), axis=1)
    quarter = ad.mul(s, Tensor(0.25))
    w = ad.reshape(ad.cos_sqrt(quarter), (batch, 1))
    scale = ad.reshape(ad.mul(ad.sinc_sqrt(quarter), Tensor(0.5)), (batch, 1))
    return ad.concat([w, ad.mul(scale, rv)], axis=1)


def loss_3d(markers: Tensor, obs_xyz: np.ndarray, conf: np.ndarray,
            r_nc: Tensor, delta_cm: float = 10.0) -> Tensor:
    """Confidence-weighted robust 3D distance in centimeters.

    Observed camera-frame keypoints are rotated into the world by the
    predicted orientation; both point sets then have their per-frame mean
    translation removed, so the term constrains shape and orientation but
    not absolute position.
    """
    obs = Tensor(np.asarray(obs_xyz, dtype=np.float64))
    obs_world = ad.swap_last_axes(ad.matmul(r_nc, ad.swap_last_axes(obs)))
    obs_centered = ad.sub(obs_world, ad.reduce_mean(obs_world, axis=1, keepdims=True))
    model_centered = ad.sub(markers, ad.reduce_mean(markers, axis=1, keepdims=True))
    dist_cm = ad.mul(ad.vector_norm(ad.sub(model_centered, obs_centered), axis=2),
                     Tensor(100.0))
    weighted = ad.mul(ad.huber(dist_cm, delta_cm), Tensor(np.asarray(conf, dtype=np.float64)))
    per_frame = ad.mul(ad.reduce_sum(weighted, axis=1), Tensor(1.0 / markers.shape[1]))
    return ad.reduce_mean(per_frame)


def loss_2d(markers: Tensor, kp2d: np.ndarray, conf: np.ndarray, r_nc: Tensor,
            intrinsics: CameraIntrinsics, delta_px: float = 5.0) -> Tensor:
    """Confidence-weighted robust reprojection error in pixels.

    Model markers are rotated into the camera frame by the inverse predicted
    orientation and projected through the pinhole model; points behind the
    camera are excluded from the sum.
    """
    cam = ad.swap_last_axes(ad.matmul(ad.swap_last_axes(r_nc),
                                      ad.swap_last_axes(markers)))
    x = ad.index_select(cam, 2, [0])
    y = ad.index_select(cam, 2, [1])
    z = ad.index_select(cam, 2, [2])
    valid = z.value[..., 0] > 0.0
    z_safe = ad.masked_fill(z, valid[..., None], 1.0)
    u = ad.add(ad.mul(ad.div(x, z_safe), Tensor(intrinsics.fx)), Tensor(intrinsics.cx))
    v = ad.add(ad.mul(ad.div(y, z_safe), Tensor(intrinsics.fy)), Tensor(intrinsics.cy))
    uv = ad.concat([u, v], axis=2)
    dist = ad.vector_norm(ad.sub(uv, Tensor(np.asarray(kp2d, dtype=np.float64))), axis=2)
    weights = np.asarray(conf, dtype=np.float64) * valid
    weighted = ad.mul(ad.huber(dist, delta_px), Tensor(weights))
    per_frame = ad.mul(ad.reduce_sum(weighted, axis=1), Tensor(1.0 / markers.shape[1]))
    return ad.reduce_mean(per_frame)


# Right-multiplication matrix R(b) with a (x) b = R(b) @ a for wxyz quaternions.
def _right_multiply_matrices(quats: np.ndarray) -> np.ndarray:
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    m = np.empty((len(quats), 4, 4))
    m[:, 0] = np.stack([w, -x, -y, -z], axis=1)
    m[:, 1] = np.stack([x, w, z, -y], axis=1)
    m[:, 2] = np.stack([y, -z, w, x], axis=1)
    m[:, 3] = np.stack([z, y, -x, w], axis=1)
    return m


def loss_phone(cam_rv: Tensor, measured_quats: np.ndarray) -> Tensor:
    """Mean angular difference (degrees) between predicted and measured
    orientation at the sensor sample points."""
    meas = np.asarray(measured_quats, dtype=np.float64).reshape(-1, 4)
    if len(meas) == 0:
        raise ValueError("no orientation samples")
    batch = cam_rv.shape[0]
    q_pred = quats_from_rotvec(cam_rv)
    q_conj = ad.mul(q_pred, Tensor(np.array([1.0, -1.0, -1.0, -1.0])))
    rel = ad.reshape(ad.matmul(Tensor(_right_multiply_matrices(meas)),
                               ad.reshape(q_conj, (batch, 4, 1))), (batch, 4))
    vec = ad.vector_norm(ad.index_select(rel, 1, [1, 2, 3]), axis=1)
    w = ad.absolute(ad.reshape(ad.index_select(rel, 1, [0]), (batch,)))
    angle_deg = ad.mul(ad.atan2(vec, w), Tensor(360.0 / math.pi))
    return ad.reduce_mean(angle_deg)


def total_loss(l3d: Tensor | None, l2d: Tensor | None, lphone: Tensor | None,
               config: FitConfig) -> Tensor:
    """Weighted sum of the available terms."""
    total = Tensor(0.0)
    if l3d is not None:
        total = ad.add(total, ad.mul(l3d, Tensor(config.lambda_3d)))
    if l2d is not None:
        total = ad.add(total, ad.mul(l2d, Tensor(config.lambda_2d)))
    if lphone is not None:
        total = ad.add(total, ad.mul(lphone, Tensor(config.lambda_phone)))
    return total


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.value) for p in params],
                   v=[np.zeros_like(p.value) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0,
              decay_mask: list[bool] | None = None,
              lr_scales: list[float] | None = None) -> None:
    """One in-place Adam update with decoupled weight decay.

    Decay applies only where ``decay_mask`` is True (the trajectory-network
    parameters); shared body-scale parameters are never decayed.  Optional
    per-parameter learning-rate multipliers damp selected directions.
    """
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        lr_i = lr if lr_scales is None else lr * lr_scales[i]
        p.value -= lr_i * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay and (decay_mask is None or decay_mask[i]):
            p.value -= lr_i * weight_decay * p.value


def lr_at(iteration: int, config: FitConfig) -> float:
    """Geometric interpolation from ``lr_start`` to ``lr_end``."""
    if not 0 <= iteration < config.iterations:
        raise ValueError("iteration out of range")
    if config.iterations == 1:
        return config.lr_start
    frac = iteration / (config.iterations - 1)
    return config.lr_start * (config.lr_end / config.lr_start) ** frac


# --- session fitting -----------------------------------------------------------

_SCALE_MID = 0.5 * (SCALE_HI + SCALE_LO)
_SCALE_HALF = 0.5 * (SCALE_HI - SCALE_LO)


def _scale_raw_from_values(values: np.ndarray) -> np.ndarray:
    ratio = np.clip((values - _SCALE_MID) / _SCALE_HALF, -0.999999, 0.999999)
    return np.arctanh(ratio)


def _offsets_raw_from_values(values: np.ndarray) -> np.ndarray:
    ratio = np.clip(values / SITE_OFFSET_BOUND, -0.999999, 0.999999)
    return np.arctanh(ratio)


@dataclass
class SessionFit:
    """Result of a bilevel session fit: one network per trial, one shared
    body scale, and the loss history."""

    trial_ids: list[str]
    nets: list[TrajectoryNet]
    body_scale: BodyScale
    loss_history: list[float]
    config: FitConfig

    def net_for(self, trial_id: str) -> TrajectoryNet:
        return self.nets[self.trial_ids.index(trial_id)]


def _snap_indices(sample_times: np.ndarray, frame_times: np.ndarray) -> np.ndarray:
    """Nearest-frame lookup of sampled times."""
    if len(frame_times) == 1:
        return np.zeros(len(sample_times), dtype=np.intp)
    pos = np.searchsorted(frame_times, sample_times)
    pos = np.clip(pos, 1, len(frame_times) - 1)
    left = frame_times[pos - 1]
    right = frame_times[pos]
    choose_left = (sample_times - left) <= (right - sample_times)
    return np.where(choose_left, pos - 1, pos)


def _trial_iteration_loss(obs: ObservationSet, net: TrajectoryNet,
                          frame_idx: np.ndarray, imu_idx: np.ndarray | None,
                          defn: SkeletonDefinition, scales_t: Tensor,
                          offsets_t: Tensor, config: FitConfig) -> Tensor:
    frame_times = obs.times[frame_idx]
    pose, cam_rv = net.forward(frame_times)
    markers = forward_kinematics(defn, pose, scales_t, offsets_t)
    r_nc = rotation_matrices_from_rotvec(cam_rv)
    l3 = loss_3d(markers, obs.kp3d[frame_idx], obs.conf[frame_idx], r_nc,
                 config.huber_delta_3d_cm)
    l2 = loss_2d(markers, obs.kp2d[frame_idx], obs.conf[frame_idx], r_nc,
                 obs.intrinsics, config.huber_delta_2d_px)
    lph = None
    if imu_idx is not None:
        _, cam_imu = net.forward(obs.orient_times[imu_idx])
        lph = loss_phone(cam_imu, obs.orient_quats[imu_idx])
    return total_loss(l3, l2, lph, config)


def fit_session(trials: list[ObservationSet], defn: SkeletonDefinition,
                config: FitConfig,
                initial_body_scale: BodyScale | None = None,
                progress: bool = False) -> SessionFit:
    """Jointly fit one trajectory network per trial and a single body scale.

    Scale factors and site offsets live behind tanh reparameterizations, so
    they always satisfy the model bounds.  Raises :class:`NumericalAbort`
    with the name of the first non-finite tensor if the loss diverges.
    """
    if not trials:
        raise ValueError("need at least one trial")
    for obs in trials:
        if len(obs.times) < 2:
            raise ValueError(f"trial {obs.trial_id!r}: need at least 2 frames")
        if not np.any(obs.in_view):
            raise ValueError(f"trial {obs.trial_id!r}: no in-view frames")

    nets = [init_for_trial(defn, config.net, max(obs.duration, 1e-3),
                           obs.orient_quats if obs.has_orientation else None,
                           seed=(config.seed, 5, i))
            for i, obs in enumerate(trials)]

    init_scale = initial_body_scale or BodyScale.neutral()
    raw_scales = ad.parameter(_scale_raw_from_values(init_scale.scales), name="raw_scales")
    raw_offsets = ad.parameter(_offsets_raw_from_values(init_scale.site_offsets),
                               name="raw_offsets")

    params: list[Tensor] = []
    decay_mask: list[bool] = []
    lr_scales: list[float] = []
    for net in nets:
        params.extend(net.params)
        decay_mask.extend([True] * len(net.params))
        lr_scales.extend([1.0] * len(net.params))
    params.extend([raw_scales, raw_offsets])
    decay_mask.extend([False, False])
    lr_scales.extend([1.0, config.offset_lr_scale])
    state = AdamState.for_params(params)

    in_view_times = [obs.times[obs.in_view] for obs in trials]
    loss_history: list[float] = []

    for iteration in range(config.iterations):
        lr = lr_at(iteration, config)
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            scales_t = ad.add(Tensor(_SCALE_MID),
                              ad.mul(Tensor(_SCALE_HALF), ad.tanh(raw_scales)))
            offsets_t = ad.mul(Tensor(SITE_OFFSET_BOUND), ad.tanh(raw_offsets))
            total = Tensor(0.0)
            for i, obs in enumerate(trials):
                rng = np.random.default_rng((config.seed, 17, i, iteration))
                samples = rng.uniform(obs.times[0], obs.times[-1], config.batch_size)
                frame_idx = np.flatnonzero(obs.in_view)[
                    _snap_indices(samples, in_view_times[i])]
                imu_idx = None
                if obs.has_orientation and config.lambda_phone > 0:
                    m = len(obs.orient_times)
                    if m <= config.batch_size:
                        imu_idx = np.arange(m)
                    else:
                        rng_imu = np.random.default_rng((config.seed, 23, i, iteration))
                        imu_idx = rng_imu.integers(0, m, size=config.batch_size)
                total = ad.add(total, _trial_iteration_loss(
                    obs, nets[i], frame_idx, imu_idx, defn, scales_t, offsets_t, config))
        value = float(total.value)
        if not np.isfinite(value):
            bad = tape.first_nonfinite() or "total"
            raise NumericalAbort(
                f"loss became non-finite at iteration {iteration}; first bad tensor: {bad}")
        grads = tape.gradients(total, params)
        adam_step(params, grads, state, lr, weight_decay=config.weight_decay,
                  decay_mask=decay_mask, lr_scales=lr_scales)
        loss_history.append(value)
        if progress and (iteration % 200 == 0 or iteration == config.iterations - 1):
            print(f"  iter {iteration:5d}  lr {lr:.2e}  loss {value:.6f}", flush=True)

    body_scale = BodyScale(
        _SCALE_MID + _SCALE_HALF * np.tanh(raw_scales.value),
        SITE_OFFSET_BOUND * np.tanh(raw_offsets.value))
    return SessionFit(trial_ids=[o.trial_id for o in trials], nets=nets,
                      body_scale=body_scale, loss_history=loss_history, config=config)


# --- post-fit evaluation --------------------------------------------------------

def predict_trial(net: TrajectoryNet, defn: SkeletonDefinition,
                  body_scale: BodyScale, times: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pose series (F, 40), camera quaternions (F, 4) and markers (F, 87, 3)."""
    pose, cam_rv = net.evaluate(times)
    quats = np.stack([rotvec_to_quat(v) for v in cam_rv])
    markers = forward_kinematics(defn, Tensor(pose), Tensor(body_scale.scales),
                                 Tensor(body_scale.site_offsets)).value
    return pose, quats, markers


def residuals(session: SessionFit, obs: ObservationSet,
              defn: SkeletonDefinition) -> tuple[float, float]:
    """Confidence-weighted mean Euclidean residuals (2D px, 3D cm), no Huber.

    Evaluated at every in-view frame; 2D residuals additionally exclude
    points behind the camera.
    """
    net = session.net_for(obs.trial_id)
    idx = np.flatnonzero(obs.in_view)
    pose, cam_rv = net.evaluate(obs.times[idx])
    markers = forward_kinematics(defn, Tensor(pose), Tensor(session.body_scale.scales),
                                 Tensor(session.body_scale.site_offsets)).value
    r = rotation_matrices_from_rotvec(Tensor(cam_rv)).value
    conf = obs.conf[idx]

    obs_world = np.einsum("bij,bkj->bki", r, obs.kp3d[idx])
    d3 = np.linalg.norm(
        (markers - markers.mean(axis=1, keepdims=True))
        - (obs_world - obs_world.mean(axis=1, keepdims=True)), axis=2) * 100.0
    w3 = conf.sum()
    mean3 = float((d3 * conf).sum() / w3) if w3 > 0 else 0.0

    cam = np.einsum("bji,bkj->bki", r, markers)
    z = cam[..., 2]
    valid = z > 0
    z_safe = np.where(valid, z, 1.0)
    u = obs.intrinsics.fx * cam[..., 0] / z_safe + obs.intrinsics.cx
    v = obs.intrinsics.fy * cam[..., 1] / z_safe + obs.intrinsics.cy
    d2 = np.linalg.norm(np.stack([u, v], axis=-1) - obs.kp2d[idx], axis=2)
    w2d = conf * valid
    w2 = w2d.sum()
    mean2 = float((d2 * w2d).sum() / w2) if w2 > 0 else 0.0
    return mean2, mean3
