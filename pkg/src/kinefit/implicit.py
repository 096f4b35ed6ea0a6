"""Implicit trajectory function: time -> (pose, camera orientation).

A small tanh MLP over a sinusoidal positional encoding of time outputs 43
channels: 40 pose coordinates plus a 3-channel rotation vector for the
camera orientation in the world frame.  Rotational channels pass through
tanh and an affine map into their coordinate limits, so no reachable
parameter setting can violate a joint range; pelvis-translation channels
bypass tanh and are scaled by a configurable factor so the network operates
in O(1) ranges.

One network owns one trial; separate trials may be fitted concurrently but
a single network must not be shared across threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Rotation, quat_median
from .skeleton import SkeletonDefinition, N_COORDS

__all__ = [
    "NetConfig",
    "PositionalEncoding",
    "TrajectoryNet",
    "init_for_trial",
    "save_checkpoint",
    "load_checkpoint",
]

N_OUTPUTS = N_COORDS + 3
# camera rotation-vector channels share one generous symmetric range
CAMERA_ROTVEC_LIMIT = 2.0 * np.pi

CHECKPOINT_MAGIC = b"KFNET1\n"


@dataclass
class NetConfig:
    """Architecture knobs; the defaults target desk-scale CPU fitting.

    The encoding is a dense harmonic ladder over twice the trial duration
    (non-periodic drift stays in-span), with the band count derived from
    ``encoding_max_hz`` unless ``frequency_bands`` pins it.  A zero-initialized
    linear head from the encoding to the outputs runs alongside the MLP; for
    near-periodic signals this makes the representation problem close to a
    Fourier regression, which converges far faster under a short decaying
    learning-rate schedule than a plain tanh MLP over octave-spaced bands.
    """

    hidden_layers: int = 4
    hidden_units: int = 256
    frequency_bands: int | None = None   # None: derived from duration
    encoding_max_hz: float = 2.5
    encoding_period_scale: float = 2.0
    encoding_spacing: str = "harmonic"   # harmonic | geometric
    translation_scale: float = 5.0

    def validate(self) -> None:
        if self.hidden_layers < 1 or self.hidden_units < 1:
            raise ValueError("network must have at least one hidden layer and unit")
        if self.frequency_bands is not None and self.frequency_bands < 1:
            raise ValueError("need at least one frequency band")
        if self.encoding_max_hz <= 0 or self.encoding_period_scale <= 0:
            raise ValueError("encoding frequency range must be positive")
        if self.encoding_spacing not in ("harmonic", "geometric"):
            raise ValueError("encoding_spacing must be 'harmonic' or 'geometric'")
        if self.translation_scale <= 0:
            raise ValueError("translation scale must be positive")

    def bands_for(self, duration: float) -> int:
        if self.frequency_bands is not None:
            return self.frequency_bands
        period = self.encoding_period_scale * duration
        return max(8, int(np.ceil(self.encoding_max_hz * period)))


class PositionalEncoding:
    """Deterministic encoding of scalar time.

    Features are ``[t, sin(f_k w t), cos(f_k w t)]`` for B frequency
    multipliers f_k (2B + 1 values): consecutive integers 1..B for
    ``harmonic`` spacing, powers of two for ``geometric``.
    """

    def __init__(self, bands: int, omega: float, spacing: str = "harmonic"):
        if bands < 1 or omega <= 0:
            raise ValueError("bands must be >= 1 and omega positive")
        if spacing not in ("harmonic", "geometric"):
            raise ValueError("spacing must be 'harmonic' or 'geometric'")
        self.bands = bands
        self.omega = omega
        self.spacing = spacing
        if spacing == "harmonic":
            self._multipliers = np.arange(1, bands + 1, dtype=np.float64)
        else:
            self._multipliers = 2.0 ** np.arange(bands)

    @property
    def size(self) -> int:
        return 2 * self.bands + 1

    def encode(self, t: np.ndarray) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        phases = t[:, None] * (self.omega * self._multipliers)[None, :]
        return np.concatenate([t[:, None], np.sin(phases), np.cos(phases)], axis=1)


class TrajectoryNet:
    """Tanh MLP plus a linear encoding head, with range-safe outputs."""

    def __init__(self, config: NetConfig, encoding: PositionalEncoding,
                 limits_lo: np.ndarray, limits_hi: np.ndarray, seed: int = 0):
        config.validate()
        self.config = config
        self.encoding = encoding
        # channel layout: [0:3] pelvis translation, [3:43] rotational
        # (37 joint coordinates then 3 camera rotation-vector channels)
        lo = np.concatenate([limits_lo[3:], [-CAMERA_ROTVEC_LIMIT] * 3])
        hi = np.concatenate([limits_hi[3:], [CAMERA_ROTVEC_LIMIT] * 3])
        if lo.shape != (N_OUTPUTS - 3,):
            raise ValueError("limit vectors must cover 40 coordinates")
        self.rot_mid = 0.5 * (hi + lo)
        self.rot_half = 0.5 * (hi - lo)
        self.seed = seed
        rng = np.random.default_rng(seed)
        sizes = ([encoding.size] + [config.hidden_units] * config.hidden_layers
                 + [N_OUTPUTS])
        # parameter layout: W0, b0, ..., W_last, b_last, W_skip
        self.params: list[Tensor] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            w = np.zeros((n_in, n_out)) if last else rng.normal(
                0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
            self.params.append(ad.parameter(w, name=f"W{i}"))
            self.params.append(ad.parameter(np.zeros(n_out), name=f"b{i}"))
        self.params.append(ad.parameter(np.zeros((encoding.size, N_OUTPUTS)),
                                        name="W_skip"))

    @property
    def final_bias(self) -> Tensor:
        return self.params[-2]

    @property
    def skip_weights(self) -> Tensor:
        return self.params[-1]

    def forward(self, t: np.ndarray) -> tuple[Tensor, Tensor]:
        """Evaluate at times ``t`` (seconds); returns pose (B, 40) and
        camera rotation vectors (B, 3), both differentiable."""
        feats = Tensor(self.encoding.encode(t))
        h = feats
        n_layers = (len(self.params) - 1) // 2
        for i in range(n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = ad.add(ad.matmul(h, w), b)
            if i < n_layers - 1:
                h = ad.tanh(h)
        h = ad.add(h, ad.matmul(feats, self.skip_weights))
        trans = ad.mul(ad.index_select(h, 1, [0, 1, 2]),
                       Tensor(self.config.translation_scale))
        rot_raw = ad.index_select(h, 1, np.arange(3, N_OUTPUTS))
        rot = ad.add(ad.mul(ad.tanh(rot_raw), Tensor(self.rot_half)),
                     Tensor(self.rot_mid))
        pose = ad.concat([trans, ad.index_select(rot, 1, np.arange(N_COORDS - 3))],
                         axis=1)
        cam = ad.index_select(rot, 1, np.arange(N_COORDS - 3, N_OUTPUTS - 3))
        return pose, cam

    def evaluate(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Non-recording evaluation; returns numpy pose and camera arrays."""
        pose, cam = self.forward(t)
        return pose.value, cam.value


def init_for_trial(defn: SkeletonDefinition, config: NetConfig,
                   duration: float, orientation_quats: np.ndarray | None,
                   seed: int = 0,
                   pelvis_distance: float = 1.5) -> TrajectoryNet:
    """Build a trial network with a data-informed final-layer bias.

    The final layer has zero weights, so at initialization the output is its
    bias for every t: the camera-orientation channels reproduce the median
    of the observed orientation stream (identity when the stream is empty),
    the pelvis sits ``pelvis_distance`` meters along the camera's forward
    axis, and the joint channels start at the anatomical neutral pose
    (zero angles), which is far closer to human motion than the midpoint of
    asymmetric ranges.
    """
    if duration <= 0:
        raise ValueError("trial duration must be positive")
    omega = 2.0 * np.pi / (config.encoding_period_scale * duration)
    enc = PositionalEncoding(config.bands_for(duration), omega,
                             config.encoding_spacing)
    net = TrajectoryNet(config, enc, defn.limits_lo, defn.limits_hi, seed=seed)

    if orientation_quats is not None and len(orientation_quats) > 0:
        r_nc = Rotation.from_quat(quat_median(orientation_quats))
    else:
        r_nc = Rotation.identity()
    cam_rv = r_nc.as_rotvec()
    pelvis_world = r_nc.apply(np.array([0.0, 0.0, pelvis_distance]))

    bias = net.final_bias.value
    bias[:3] = pelvis_world / config.translation_scale
    # invert the tanh range map so rotational channels start at zero angle
    # and the camera channels at the observed median rotation vector
    targets = np.zeros(N_OUTPUTS - 3)
    targets[-3:] = cam_rv
    ratio = np.clip((targets - net.rot_mid) / net.rot_half, -0.999999, 0.999999)
    bias[3:] = np.arctanh(ratio)
    return net


# --- checkpoint serialization -------------------------------------------------
#
# Layout: magic, u32 little-endian header length, UTF-8 JSON header holding
# the config, limits, omega, seed and parameter shapes, then the raw row-major
# float64 little-endian parameter data in order.

def save_checkpoint(net: TrajectoryNet, path: str) -> None:
    header = {
        "config": asdict(net.config),
        "omega": net.encoding.omega,
        "seed": net.seed,
        "rot_mid": net.rot_mid.tolist(),
        "rot_half": net.rot_half.tolist(),
        "shapes": [list(p.shape) for p in net.params],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in net.params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> TrajectoryNet:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a trajectory checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = NetConfig(**header["config"])
        enc = PositionalEncoding(config.frequency_bands, header["omega"])
        net = TrajectoryNet.__new__(TrajectoryNet)
        net.config = config
        net.encoding = enc
        net.seed = header["seed"]
        net.rot_mid = np.array(header["rot_mid"])
        net.rot_half = np.array(header["rot_half"])
        net.params = []
        for i, shape in enumerate(header["shapes"]):
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            name = f"W{i // 2}" if i % 2 == 0 else f"b{i // 2}"
            net.params.append(ad.parameter(data.copy(), name=name))
    return net


def camera_rotvec_to_rotation(rv: np.ndarray) -> Rotation:
    return Rotation.from_rotvec(rv)
