"""Articulated body model: kinematic tree, body scaling, and forward kinematics.

The model is configuration, not code: a structured text file lists scale
groups, bodies, coordinates, and marker sites (schema below).  The default
file ships with the package and defines 40 generalized coordinates, 8 scale
groups, and 87 sites.

Model file schema (``schema skeleton/1``)::

    schema skeleton/1
    group <name>                            # first group scales everything
    body <name> parent=<name|-> offset=x,y,z group=<group>
    coord <name> body=<body> type=translational|rotvec|revolute \
        axis=x,y,z range=lo,hi
    site <name> body=<body> offset=x,y,z

Offsets are meters in the parent frame.  Ranges are meters for translational
coordinates and degrees for rotational ones (converted to radians on load).
The first six coordinates form the free-flyer root: three translational plus
three ``rotvec`` components interpreted together as one rotation vector.

Scaling: a body's effective scale is ``scales[0] * scales[group]`` (just
``scales[0]`` for bodies in the first group).  A child body's offset from its
parent is scaled by the *parent's* effective scale (the offset spans the
parent segment); site offsets are scaled by their own body's scale, then the
per-site correction from :class:`BodyScale` is added unscaled.

Definitions are immutable after load; the FK pass is pure and reentrant.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "Body",
    "Coordinate",
    "Site",
    "SkeletonDefinition",
    "Pose",
    "BodyScale",
    "ModelFileError",
    "load_model",
    "load_default_model",
    "forward_kinematics",
    "forward_kinematics_arrays",
    "rotvec_matrices",
    "clamp_report",
    "REPORT_GROUPS",
    "MODEL_PATH_ENV",
]

MODEL_PATH_ENV = "KINEFIT_MODEL"

N_COORDS = 40
N_SCALES = 8
N_SITES = 87

SCALE_LO = 0.5
SCALE_HI = 2.0
SITE_OFFSET_BOUND = 0.10

# Reported joint groups for error aggregation (left/right pooled).
REPORT_GROUPS: dict[str, tuple[str, ...]] = {
    "hip_flexion": ("hip_flexion_l", "hip_flexion_r"),
    "hip_adduction": ("hip_adduction_l", "hip_adduction_r"),
    "hip_rotation": ("hip_rotation_l", "hip_rotation_r"),
    "knee_flexion": ("knee_flexion_l", "knee_flexion_r"),
    "ankle_angle": ("ankle_flexion_l", "ankle_flexion_r"),
    "lumbar_extension": ("lumbar_extension",),
    "lumbar_bending": ("lumbar_bending",),
    "lumbar_rotation": ("lumbar_rotation",),
    "neck_extension": ("neck_extension",),
    "neck_bending": ("neck_bending",),
    "neck_rotation": ("neck_rotation",),
    "arm_flexion": ("arm_flexion_l", "arm_flexion_r"),
    "arm_adduction": ("arm_adduction_l", "arm_adduction_r"),
    "elbow_flexion": ("elbow_flexion_l", "elbow_flexion_r"),
}


class ModelFileError(ValueError):
    """Malformed model-definition file."""


@dataclass(frozen=True)
class Body:
    name: str
    parent: str | None
    offset: np.ndarray
    group: int


@dataclass(frozen=True)
class Coordinate:
    name: str
    body: str
    kind: str  # translational | rotvec | revolute
    axis: np.ndarray
    lo: float
    hi: float


@dataclass(frozen=True)
class Site:
    name: str
    body: str
    offset: np.ndarray


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


@dataclass
class SkeletonDefinition:
    """Immutable kinematic tree with precomputed FK plan."""

    groups: list[str]
    bodies: list[Body]
    coords: list[Coordinate]
    sites: list[Site]

    body_index: dict[str, int] = field(init=False)
    coord_index: dict[str, int] = field(init=False)
    site_index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self._validate()
        self.body_index = {b.name: i for i, b in enumerate(self.bodies)}
        self.coord_index = {c.name: i for i, c in enumerate(self.coords)}
        self.site_index = {s.name: i for i, s in enumerate(self.sites)}
        self._build_plan()

    # -- validation ------------------------------------------------------

    def _validate(self) -> None:
        if len(self.groups) != N_SCALES:
            raise ModelFileError(f"expected {N_SCALES} scale groups, got {len(self.groups)}")
        if len(self.coords) != N_COORDS:
            raise ModelFileError(f"expected {N_COORDS} coordinates, got {len(self.coords)}")
        if len(self.sites) != N_SITES:
            raise ModelFileError(f"expected {N_SITES} sites, got {len(self.sites)}")
        names = [b.name for b in self.bodies]
        if len(set(names)) != len(names):
            raise ModelFileError("duplicate body names")
        roots = [b for b in self.bodies if b.parent is None]
        if len(roots) != 1:
            raise ModelFileError(f"expected exactly one root body, got {len(roots)}")
        known = set()
        for b in self.bodies:
            if b.parent is not None and b.parent not in known:
                raise ModelFileError(
                    f"body {b.name!r}: parent {b.parent!r} not defined earlier (tree must be topological)")
            known.add(b.name)
            if not 0 <= b.group < N_SCALES:
                raise ModelFileError(f"body {b.name!r}: scale group out of range")
        for c in self.coords:
            if c.lo >= c.hi:
                raise ModelFileError(f"coordinate {c.name!r}: lo must be < hi")
            if c.body not in known:
                raise ModelFileError(f"coordinate {c.name!r}: unknown body {c.body!r}")
        root = roots[0].name
        head = self.coords[:6]
        if [c.kind for c in head] != ["translational"] * 3 + ["rotvec"] * 3:
            raise ModelFileError("first six coordinates must be 3 translational + 3 rotvec on the root")
        for c in head:
            if c.body != root:
                raise ModelFileError("free-flyer coordinates must attach to the root body")
        for c in self.coords[6:]:
            if c.kind != "revolute":
                raise ModelFileError(f"coordinate {c.name!r}: only the root may be non-revolute")
        for s in self.sites:
            if s.body not in known:
                raise ModelFileError(f"site {s.name!r}: unknown body {s.body!r}")

    # -- FK plan ----------------------------------------------------------

    def _build_plan(self) -> None:
        self._joints_by_body: dict[str, list[tuple[int, np.ndarray, np.ndarray]]] = {}
        for i, c in enumerate(self.coords[6:], start=6):
            axis = c.axis / np.linalg.norm(c.axis)
            k = _skew(axis)
            self._joints_by_body.setdefault(c.body, []).append((i, k, k @ k))
        self._sites_by_body: dict[str, tuple[list[int], np.ndarray]] = {}
        for b in self.bodies:
            idxs = [i for i, s in enumerate(self.sites) if s.body == b.name]
            if idxs:
                rest = np.stack([self.sites[i].offset for i in idxs])
                self._sites_by_body[b.name] = (idxs, rest)
        order: list[int] = []
        for b in self.bodies:
            order.extend(self._sites_by_body.get(b.name, ([], None))[0])
        # gather index mapping canonical site row -> concatenated row
        self._site_gather = np.argsort(np.asarray(order, dtype=np.intp), kind="stable")
        self._gather_is_identity = bool(np.all(self._site_gather == np.arange(N_SITES)))

    # -- convenience ------------------------------------------------------

    @property
    def coord_names(self) -> list[str]:
        return [c.name for c in self.coords]

    @property
    def limits_lo(self) -> np.ndarray:
        return np.array([c.lo for c in self.coords])

    @property
    def limits_hi(self) -> np.ndarray:
        return np.array([c.hi for c in self.coords])

    @property
    def rotational_mask(self) -> np.ndarray:
        return np.array([c.kind != "translational" for c in self.coords])

    @property
    def site_names(self) -> list[str]:
        return [s.name for s in self.sites]


@dataclass
class Pose:
    """40 generalized coordinates: pelvis translation (m), pelvis rotation
    vector (rad), then named joint angles (rad)."""

    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape != (N_COORDS,):
            raise ValueError(f"pose must have {N_COORDS} coordinates")

    @classmethod
    def zero(cls) -> "Pose":
        return cls(np.zeros(N_COORDS))

    def get(self, defn: SkeletonDefinition, name: str) -> float:
        return float(self.coords[defn.coord_index[name]])

    def set(self, defn: SkeletonDefinition, name: str, value: float) -> None:
        self.coords[defn.coord_index[name]] = value


@dataclass
class BodyScale:
    """8 scale factors plus per-site offset corrections (meters)."""

    scales: np.ndarray
    site_offsets: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.site_offsets = np.asarray(self.site_offsets, dtype=np.float64)
        if self.scales.shape != (N_SCALES,):
            raise ValueError(f"expected {N_SCALES} scale factors")
        if self.site_offsets.shape != (N_SITES, 3):
            raise ValueError(f"expected ({N_SITES}, 3) site offsets")
        if np.any(self.scales < SCALE_LO) or np.any(self.scales > SCALE_HI):
            raise ValueError(f"scale factors must lie in [{SCALE_LO}, {SCALE_HI}]")
        if np.any(np.abs(self.site_offsets) > SITE_OFFSET_BOUND):
            raise ValueError(f"site offsets bounded by +/-{SITE_OFFSET_BOUND} m")

    @classmethod
    def neutral(cls) -> "BodyScale":
        return cls(np.ones(N_SCALES), np.zeros((N_SITES, 3)))


# --- model file parsing -----------------------------------------------------

def _parse_vec(text: str, n: int, where: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != n:
        raise ModelFileError(f"{where}: expected {n} comma-separated values, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ModelFileError(f"{where}: non-numeric value in {text!r}") from exc


def _parse_kv(tokens: list[str], where: str) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ModelFileError(f"{where}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def parse_model(text: str, source: str = "<string>") -> SkeletonDefinition:
    groups: list[str] = []
    bodies: list[Body] = []
    coords: list[Coordinate] = []
    sites: list[Site] = []
    saw_schema = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        tokens = line.split()
        kind, rest = tokens[0], tokens[1:]
        if kind == "schema":
            if rest != ["skeleton/1"]:
                raise ModelFileError(f"{where}: unsupported schema {rest!r}")
            saw_schema = True
        elif kind == "group":
            if len(rest) != 1:
                raise ModelFileError(f"{where}: group takes one name")
            groups.append(rest[0])
        elif kind == "body":
            kv = _parse_kv(rest[1:], where)
            parent = kv.get("parent")
            if parent is None or "offset" not in kv or "group" not in kv:
                raise ModelFileError(f"{where}: body needs parent=, offset=, group=")
            if kv["group"] not in groups:
                raise ModelFileError(f"{where}: unknown scale group {kv['group']!r}")
            bodies.append(Body(
                name=rest[0],
                parent=None if parent == "-" else parent,
                offset=_parse_vec(kv["offset"], 3, where),
                group=groups.index(kv["group"]),
            ))
        elif kind == "coord":
            kv = _parse_kv(rest[1:], where)
            for need in ("body", "type", "axis", "range"):
                if need not in kv:
                    raise ModelFileError(f"{where}: coord needs {need}=")
            ctype = kv["type"]
            if ctype not in ("translational", "rotvec", "revolute"):
                raise ModelFileError(f"{where}: unknown coord type {ctype!r}")
            lo, hi = _parse_vec(kv["range"], 2, where)
            if ctype != "translational":
                lo, hi = math.radians(lo), math.radians(hi)
            coords.append(Coordinate(
                name=rest[0], body=kv["body"], kind=ctype,
                axis=_parse_vec(kv["axis"], 3, where), lo=float(lo), hi=float(hi)))
        elif kind == "site":
            kv = _parse_kv(rest[1:], where)
            if "body" not in kv or "offset" not in kv:
                raise ModelFileError(f"{where}: site needs body=, offset=")
            sites.append(Site(name=rest[0], body=kv["body"],
                              offset=_parse_vec(kv["offset"], 3, where)))
        else:
            raise ModelFileError(f"{where}: unknown directive {kind!r}")
    if not saw_schema:
        raise ModelFileError(f"{source}: missing 'schema skeleton/1' line")
    return SkeletonDefinition(groups=groups, bodies=bodies, coords=coords, sites=sites)


def load_model(path: str) -> SkeletonDefinition:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model(fh.read(), source=path)


def load_default_model() -> SkeletonDefinition:
    """The packaged model, or the file named by ``KINEFIT_MODEL`` if set."""
    override = os.environ.get(MODEL_PATH_ENV)
    if override:
        return load_model(override)
    text = resources.files("kinefit.data").joinpath("skeleton_default.txt").read_text()
    return parse_model(text, source="kinefit.data/skeleton_default.txt")


# --- forward kinematics ------------------------------------------------------

_EYE3 = Tensor(np.eye(3))
_ONE = Tensor(1.0)


def _revolute_rotation(q_col: Tensor, k: np.ndarray, k2: np.ndarray,
                       batch: int) -> Tensor:
    """Rotation matrices (B,3,3) about a fixed axis for angles (B,1)."""
    q = ad.reshape(q_col, (batch, 1, 1))
    term_sin = ad.mul(ad.sin(q), Tensor(k))
    term_cos = ad.mul(ad.sub(_ONE, ad.cos(q)), Tensor(k2))
    return ad.add(_EYE3, ad.add(term_sin, term_cos))


def rotvec_matrices(rv: Tensor) -> Tensor:
    """Differentiable Rodrigues rotation (B,3,3) from rotation vectors (B,3)."""
    return _rotvec_rotation(rv, rv.shape[0])


def _rotvec_rotation(rv: Tensor, batch: int) -> Tensor:
    """Rodrigues rotation (B,3,3) from rotation vectors (B,3)."""
    s = ad.reduce_sum(ad.mul(rv, rv), axis=1)
    f1 = ad.reshape(ad.sinc_sqrt(s), (batch, 1, 1))
    f2 = ad.reshape(ad.vercos_sqrt(s), (batch, 1, 1))
    ex = Tensor(_skew(np.array([1.0, 0.0, 0.0])))
    ey = Tensor(_skew(np.array([0.0, 1.0, 0.0])))
    ez = Tensor(_skew(np.array([0.0, 0.0, 1.0])))
    kx = ad.mul(ad.reshape(ad.index_select(rv, 1, [0]), (batch, 1, 1)), ex)
    ky = ad.mul(ad.reshape(ad.index_select(rv, 1, [1]), (batch, 1, 1)), ey)
    kz = ad.mul(ad.reshape(ad.index_select(rv, 1, [2]), (batch, 1, 1)), ez)
    k = ad.add(kx, ad.add(ky, kz))
    k2 = ad.matmul(k, k)
    return ad.add(_EYE3, ad.add(ad.mul(f1, k), ad.mul(f2, k2)))


def forward_kinematics(defn: SkeletonDefinition, pose: Tensor,
                       scales: Tensor, site_offsets: Tensor) -> Tensor:
    """Differentiable site positions.

    Args:
        pose: (B, 40) generalized coordinates.
        scales: (8,) scale factors.
        site_offsets: (87, 3) per-site corrections in meters.

    Returns:
        (B, 87, 3) world-frame site positions in canonical site order.
    """
    if pose.ndim != 2 or pose.shape[1] != N_COORDS:
        raise ad.ShapeError(f"pose must be (B, {N_COORDS}), got {pose.shape}")
    if not np.all(np.isfinite(pose.value)):
        raise ValueError("non-finite pose")
    if not (np.all(np.isfinite(scales.value)) and np.all(np.isfinite(site_offsets.value))):
        raise ValueError("non-finite body-scale inputs")
    batch = pose.shape[0]

    s0 = ad.index_select(scales, 0, [0])
    eff_by_group: dict[int, Tensor] = {0: s0}

    def eff(group: int) -> Tensor:
        if group not in eff_by_group:
            eff_by_group[group] = ad.mul(s0, ad.index_select(scales, 0, [group]))
        return eff_by_group[group]

    rot_w: dict[str, Tensor] = {}
    pos_w: dict[str, Tensor] = {}
    parts: list[Tensor] = []

    for body in defn.bodies:
        if body.parent is None:
            rot_local = _rotvec_rotation(ad.index_select(pose, 1, [3, 4, 5]), batch)
            rot_w[body.name] = rot_local
            pos_w[body.name] = ad.reshape(ad.index_select(pose, 1, [0, 1, 2]),
                                          (batch, 3, 1))
        else:
            parent = defn.bodies[defn.body_index[body.parent]]
            off = ad.mul(Tensor(body.offset), eff(parent.group))
            pos_w[body.name] = ad.add(
                pos_w[body.parent],
                ad.matmul(rot_w[body.parent], ad.reshape(off, (3, 1))))
            rot = rot_w[body.parent]
            for ci, k, k2 in defn._joints_by_body.get(body.name, ()):
                rot = ad.matmul(rot, _revolute_rotation(
                    ad.index_select(pose, 1, [ci]), k, k2, batch))
            rot_w[body.name] = rot

        site_plan = defn._sites_by_body.get(body.name)
        if site_plan is None:
            continue
        idxs, rest = site_plan
        local = ad.add(ad.mul(Tensor(rest), eff(body.group)),
                       ad.index_select(site_offsets, 0, idxs))
        positions = ad.add(ad.matmul(rot_w[body.name], ad.swap_last_axes(local)),
                           pos_w[body.name])
        parts.append(positions)

    stacked = ad.swap_last_axes(ad.concat(parts, axis=2))
    if defn._gather_is_identity:
        return stacked
    return ad.index_select(stacked, 1, defn._site_gather)


def forward_kinematics_arrays(defn: SkeletonDefinition, pose: np.ndarray,
                              body_scale: BodyScale) -> np.ndarray:
    """Plain-numpy FK for one pose or a batch; no tape is recorded."""
    pose = np.asarray(pose, dtype=np.float64)
    single = pose.ndim == 1
    if single:
        pose = pose[None, :]
    out = forward_kinematics(defn, Tensor(pose), Tensor(body_scale.scales),
                             Tensor(body_scale.site_offsets))
    return out.value[0] if single else out.value


def clamp_report(defn: SkeletonDefinition, pose: Pose | np.ndarray,
                 threshold: float = 0.999) -> list[str]:
    """Names of rotational coordinates saturating their limits.

    A coordinate is flagged when its position normalized to [-1, 1] over
    [lo, hi] has magnitude >= ``threshold``; root translations are skipped.
    """
    coords = pose.coords if isinstance(pose, Pose) else np.asarray(pose, dtype=np.float64)
    flagged = []
    for i, c in enumerate(defn.coords):
        if c.kind == "translational":
            continue
        normalized = (2.0 * coords[i] - (c.hi + c.lo)) / (c.hi - c.lo)
        if abs(normalized) >= threshold:
            flagged.append(c.name)
    return flagged
