"""Test-only forward kinematics oracle built from 4x4 homogeneous transforms.

Deliberately independent of the library's batched tape implementation: every
joint contributes one explicit homogeneous matrix and the chain is composed
body by body with plain numpy.
"""

import numpy as np


def _axis_angle_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    one_c = 1.0 - c
    return np.array([
        [c + x * x * one_c, x * y * one_c - z * s, x * z * one_c + y * s],
        [y * x * one_c + z * s, c + y * y * one_c, y * z * one_c - x * s],
        [z * x * one_c - y * s, z * y * one_c + x * s, c + z * z * one_c],
    ])


def _homogeneous(rot, trans):
    t = np.eye(4)
    t[:3, :3] = rot
    t[:3, 3] = trans
    return t


def reference_fk(defn, pose, scales, site_offsets):
    """Site positions (87, 3) for a single pose via 4x4 transform chains."""
    pose = np.asarray(pose, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    site_offsets = np.asarray(site_offsets, dtype=np.float64)

    def eff(group):
        return scales[0] if group == 0 else scales[0] * scales[group]

    # root: rotation vector via axis-angle, translation from coords 0:3
    rv = pose[3:6]
    angle = np.linalg.norm(rv)
    rot_root = np.eye(3) if angle < 1e-14 else _axis_angle_matrix(rv / angle, angle)
    transforms = {}
    root = next(b for b in defn.bodies if b.parent is None)
    transforms[root.name] = _homogeneous(rot_root, pose[0:3])

    joints_by_body = {}
    for i, c in enumerate(defn.coords[6:], start=6):
        joints_by_body.setdefault(c.body, []).append((i, c.axis))

    for body in defn.bodies:
        if body.parent is None:
            continue
        parent = defn.bodies[defn.body_index[body.parent]]
        local = _homogeneous(np.eye(3), body.offset * eff(parent.group))
        for ci, axis in joints_by_body.get(body.name, ()):
            local = local @ _homogeneous(_axis_angle_matrix(axis, pose[ci]), np.zeros(3))
        transforms[body.name] = transforms[body.parent] @ local

    out = np.zeros((len(defn.sites), 3))
    for i, site in enumerate(defn.sites):
        body = defn.bodies[defn.body_index[site.body]]
        local = site.offset * eff(body.group) + site_offsets[i]
        out[i] = (transforms[site.body] @ np.array([*local, 1.0]))[:3]
    return out
