"""Rotation representations and a pinhole camera model.

Conventions
-----------
- Quaternions are ``(w, x, y, z)`` with unit norm; ``q`` and ``-q`` encode
  the same rotation.
- Rotation vectors are axis * angle in radians.
- ``R_ab`` denotes the orientation of frame ``{b}`` expressed in frame
  ``{a}``; a world-from-camera rotation maps camera-frame vectors into the
  world frame.
- Camera axes: +z forward (optical axis), +x right, +y down, so pixel
  coordinates grow rightward and downward.  Points with non-positive depth
  cannot be projected.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Rotation",
    "CameraIntrinsics",
    "PointBehindCameraError",
    "quat_normalize",
    "quat_multiply",
    "quat_conjugate",
    "quat_angle_deg",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_to_rotvec",
    "rotvec_to_quat",
    "rotvec_to_matrix",
    "matrix_to_rotvec",
    "quat_median",
    "project",
    "project_batch",
    "rotate_world_from_cam",
    "look_at_world_from_cam",
]


class PointBehindCameraError(ValueError):
    """Projection requested for a point with depth <= 0."""


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a * b, both (..., 4) wxyz."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_angle_deg(q) -> float | np.ndarray:
    """Rotation angle of a quaternion in degrees, in [0, 180].

    Computed as (180/pi) * 2 * arctan(|vec| / |w|), which is invariant to
    the q -> -q sign ambiguity.  Raises on a zero-norm input.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm == 0.0):
        raise ValueError("zero-norm quaternion has no angle")
    vec = np.linalg.norm(q[..., 1:], axis=-1)
    angle = np.degrees(2.0 * np.arctan2(vec, np.abs(q[..., 0])))
    return float(angle) if angle.ndim == 0 else angle


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        r = np.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array([0.5 * r,
                      (m[2, 1] - m[1, 2]) * s,
                      (m[0, 2] - m[2, 0]) * s,
                      (m[1, 0] - m[0, 1]) * s])
    else:
        i = int(np.argmax(np.diagonal(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) * s
        q[1 + i] = 0.5 * r
        q[1 + j] = (m[j, i] + m[i, j]) * s
        q[1 + k] = (m[k, i] + m[i, k]) * s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_to_rotvec(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    if w < 0:
        w, x, y, z = -w, -x, -y, -z
    vec = np.array([x, y, z])
    n = np.linalg.norm(vec)
    angle = 2.0 * np.arctan2(n, w)
    if n < 1e-12:
        # small angle: sin(a/2) ~ a/2, so vec ~ axis * a/2
        return 2.0 * vec
    return vec * (angle / n)


def rotvec_to_quat(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return quat_normalize(np.array([1.0, *(0.5 * v)]))
    axis = v / angle
    half = 0.5 * angle
    return np.array([np.cos(half), *(np.sin(half) * axis)])


def rotvec_to_matrix(v) -> np.ndarray:
    """Rodrigues formula, series-guarded near zero."""
    v = np.asarray(v, dtype=np.float64)
    s = float(v @ v)
    k = np.array([[0.0, -v[2], v[1]],
                  [v[2], 0.0, -v[0]],
                  [-v[1], v[0], 0.0]])
    if s < 1e-12:
        return np.eye(3) + k + 0.5 * (k @ k)
    theta = np.sqrt(s)
    f1 = np.sin(theta) / theta
    f2 = (1.0 - np.cos(theta)) / s
    return np.eye(3) + f1 * k + f2 * (k @ k)


def matrix_to_rotvec(m) -> np.ndarray:
    return quat_to_rotvec(matrix_to_quat(m))


def quat_median(quats, iterations: int = 32) -> np.ndarray:
    """Geometric median rotation under chordal distance (Weiszfeld).

    Sign-aligns all samples to the first one, starts from the normalized
    mean, and runs a fixed number of reweighting steps; deterministic.
    """
    q = np.array([quat_normalize(x) for x in np.asarray(quats, dtype=np.float64)])
    if q.ndim != 2 or q.shape[1] != 4 or q.shape[0] == 0:
        raise ValueError("expected a non-empty (n, 4) quaternion array")
    flip = np.sign(q @ q[0])
    flip[flip == 0] = 1.0
    q = q * flip[:, None]
    m = quat_normalize(q.mean(axis=0))
    for _ in range(iterations):
        d = np.linalg.norm(q - m, axis=1)
        w = 1.0 / np.maximum(d, 1e-12)
        m_new = (w[:, None] * q).sum(axis=0) / w.sum()
        n = np.linalg.norm(m_new)
        if n < 1e-12:
            break
        m = m_new / n
    if m[0] < 0:
        m = -m
    return m


@dataclass(frozen=True)
class Rotation:
    """A 3D rotation stored as a unit quaternion (w, x, y, z)."""

    quat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quat", quat_normalize(self.quat))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_quat(cls, q) -> "Rotation":
        return cls(np.asarray(q, dtype=np.float64))

    @classmethod
    def from_rotvec(cls, v) -> "Rotation":
        return cls(rotvec_to_quat(v))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        return cls(matrix_to_quat(m))

    def as_quat(self) -> np.ndarray:
        return self.quat.copy()

    def as_rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.quat)

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def inverse(self) -> "Rotation":
        return Rotation(quat_conjugate(self.quat))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.quat, other.quat))

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return v @ self.as_matrix().T

    def angle_deg(self) -> float:
        return float(quat_angle_deg(self.quat))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def project(x_cam, k: CameraIntrinsics) -> np.ndarray:
    """Project one camera-frame point (meters) to pixels.

    Raises :class:`PointBehindCameraError` for depth <= 0; callers inside
    the loss exclude such points instead of aborting.
    """
    x_cam = np.asarray(x_cam, dtype=np.float64)
    if x_cam[2] <= 0.0:
        raise PointBehindCameraError(f"point depth {x_cam[2]:.6g} <= 0")
    return np.array([k.fx * x_cam[0] / x_cam[2] + k.cx,
                     k.fy * x_cam[1] / x_cam[2] + k.cy])


def project_batch(x_cam: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (..., 3) points.

    Returns pixel coordinates and a validity mask (depth > 0); entries with
    invalid depth are projected against a unit depth placeholder.
    """
    x_cam = np.asarray(x_cam, dtype=np.float64)
    z = x_cam[..., 2]
    valid = z > 0.0
    z_safe = np.where(valid, z, 1.0)
    u = k.fx * x_cam[..., 0] / z_safe + k.cx
    v = k.fy * x_cam[..., 1] / z_safe + k.cy
    return np.stack([u, v], axis=-1), valid


def rotate_world_from_cam(r_nc: Rotation, x_c) -> np.ndarray:
    """Map camera-frame keypoints into the world frame."""
    return r_nc.apply(x_c)


def look_at_world_from_cam(target_world: np.ndarray) -> np.ndarray:
    """World-from-camera matrix for a camera at the origin facing a target.

    The camera forward (+z) points at the target and image-down (+y) is
    aligned as closely as possible with world -z (world z is up).
    """
    f = np.asarray(target_world, dtype=np.float64)
    n = np.linalg.norm(f)
    if n < 1e-9:
        raise ValueError("target coincides with the camera origin")
    f = f / n
    up = np.array([0.0, 0.0, 1.0])
    r = np.cross(f, up)
    rn = np.linalg.norm(r)
    if rn < 1e-9:
        # looking straight up/down: pick x as world x
        r = np.array([1.0, 0.0, 0.0])
        rn = 1.0
    r = r / rn
    d = np.cross(f, r)
    m = np.stack([r, d, f], axis=1)
    return m
