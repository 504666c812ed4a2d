"""A compact parametric skinned hand with the MANO interface dimensions.

The surface is generated procedurally: a palm tube open at the wrist, a cap
strip on top, four finger tubes rising from the cap and a thumb tube leaving
the radial side of the palm.  The default resolution has 778 vertices and
1538 faces.  Shape variation comes from 10 linear blendshapes obtained by
linearising the generator around its default proportions.

Coordinates are metres.  In the model frame the fingers point along +y, the
palm faces +z and the thumb sits on the +x side (right hand).

Pose vector layout: 10 articulated joints x axis-angle, in kinematic order
thumb (base, mid), index (MCP, PIP), middle, ring, little.  The distal joint
of every finger follows its middle joint with a fixed coupling factor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

N_JOINTS = 21
N_ARTICULATED = 10
N_POSE = 3 * N_ARTICULATED
N_SHAPE = 10
N_LIGHT = 11
GEOM_DIM = N_POSE + N_SHAPE + 1 + 3 + 3

# slices into the packed geometry vector (theta, beta, s, R, T)
SL_THETA = slice(0, 30)
SL_BETA = slice(30, 40)
SL_SCALE = slice(40, 41)
SL_ROT = slice(41, 44)
SL_TRANS = slice(44, 47)

MODEL_SCHEMA = "handfit.model/1"
DIP_COUPLING = 2.0 / 3.0

FINGER_NAMES = ("thumb", "index", "middle", "ring", "little")
# wrist 0, then 4 joints per finger from base to tip
PARENTS = np.array([-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19])
# bones are the non-tip joints; tips only carry a position
BONES = np.array([0, 1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19])
# the 20 skeleton edges (parent, child)
BONE_PAIRS = np.array([(int(PARENTS[j]), j) for j in range(1, N_JOINTS)])
# joint index -> articulated slot; distal joints are coupled to the slot of their parent
ARTICULATED_JOINTS = np.array([1, 2, 5, 6, 9, 10, 13, 14, 17, 18])
COUPLED_JOINTS = np.array([3, 7, 11, 15, 19])

_DATA = Path(__file__).with_name("data")


class ModelError(ValueError):
    pass


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(v) -> np.ndarray:
    """Rotation matrix of an axis-angle vector."""
    v = np.asarray(v, dtype=float)
    a = np.linalg.norm(v)
    if a < 1e-12:
        return np.eye(3) + skew(v)
    k = skew(v / a)
    return np.eye(3) + np.sin(a) * k + (1.0 - np.cos(a)) * (k @ k)


def rodrigues_jac(v):
    """Rotation matrix and its partials ``dR[i] = dR/dv_i`` (shape 3x3x3)."""
    v = np.asarray(v, dtype=float)
    a2 = float(v @ v)
    r = rodrigues(v)
    eye = np.eye(3)
    if a2 < 1e-16:
        return r, np.stack([skew(eye[i]) for i in range(3)])
    vx = skew(v)
    d = np.empty((3, 3, 3))
    i_minus_r = eye - r
    for i in range(3):
        d[i] = (v[i] * vx + skew(np.cross(v, i_minus_r[:, i]))) @ r / a2
    return r, d


# --------------------------------------------------------------------------
# procedural geometry


@dataclass(frozen=True)
class _Layout:
    """Vertex-index bookkeeping shared by every shape variant."""

    palm_rings: np.ndarray          # (P, 16)
    cap_center: int
    finger_rings: tuple             # per finger: (n+1, 4) incl. base ring
    apex: tuple                     # per finger apex vertex index
    joint_rings: tuple              # per finger: ring index (into finger_rings) at mid, distal joints
    finger_s: tuple                 # per finger: arclength of each ring along the axis
    finger_len: tuple               # per finger: (l1, l2, l3)
    faces: np.ndarray
    n_verts: int


_THUMB_RING = 3  # palm band hosting the thumb hole (between rings 3 and 4)

_DEFAULT_FINGER_RINGS = (22, 25, 27, 25, 22)  # thumb, index, middle, ring, little
_DEFAULT_PALM_RINGS = 18


def _split_rings(n: int, lengths) -> tuple[int, int, int]:
    total = sum(lengths)
    n1 = max(2, int(round(n * lengths[0] / total)))
    n2 = max(2, int(round(n * lengths[1] / total)))
    n3 = n - n1 - n2
    return n1, n2, n3


def _shape_proportions(p: np.ndarray) -> dict:
    """Geometric proportions for the 10 generator controls ``p``."""
    size = 1.0 + 0.06 * p[0]
    flen = 1.0 + 0.07 * p[1]
    pw = 1.0 + 0.06 * p[2]
    pl = 1.0 + 0.05 * p[3]
    thick = 1.0 + 0.10 * p[4]
    tlen = 1.0 + 0.08 * p[5]
    diff = 0.05 * p[6]
    distal = 1.0 + 0.10 * p[7]
    taper = 1.0 + 0.15 * p[8]
    wrist = 1.0 + 0.08 * p[9]
    base = {
        "thumb": (0.040, 0.031, 0.026),
        "index": (0.040, 0.024, 0.020),
        "middle": (0.044, 0.028, 0.021),
        "ring": (0.041, 0.026, 0.020),
        "little": (0.032, 0.019, 0.018),
    }
    lens = {}
    for name, (a, b, c) in base.items():
        k = size * (tlen if name == "thumb" else flen)
        if name in ("index", "middle"):
            k *= 1.0 + diff
        elif name in ("ring", "little"):
            k *= 1.0 - diff
        lens[name] = (a * k, b * k, c * k * distal)
    return {
        "size": size,
        "palm_length": 0.090 * size * pl,
        "palm_width_top": 0.0745 * size * pw,
        "palm_width_wrist": 0.058 * size * pw * wrist,
        "thick_top": 0.024 * size * thick,
        "thick_wrist": 0.030 * size * thick,
        "finger_radius": 0.0112 * size * thick,
        "tip_taper": 0.82 * taper,
        "lengths": lens,
    }


_QUAD_WIDTHS = np.array([0.014, 0.0035, 0.016, 0.0035, 0.017, 0.0035, 0.017])  # little..index
_FINGER_QUAD = {"little": 0, "ring": 2, "middle": 4, "index": 6}
_THUMB_DIR = np.array([0.50, 0.80, 0.33]) / np.linalg.norm([0.50, 0.80, 0.33])


def _palm_ys(prop: dict, n_rings: int) -> np.ndarray:
    L = prop["palm_length"]
    lower = np.linspace(0.0, 0.18 * L, _THUMB_RING + 1)
    upper = np.linspace(0.43 * L, L, n_rings - _THUMB_RING - 1)
    return np.concatenate([lower, upper])


def _palm_ring(y: float, prop: dict) -> np.ndarray:
    L = prop["palm_length"]
    u = y / L
    width = (1 - u) * prop["palm_width_wrist"] + u * prop["palm_width_top"]
    thick = (1 - u) * prop["thick_wrist"] + u * prop["thick_top"]
    edges = np.concatenate([[0.0], np.cumsum(_QUAD_WIDTHS)])
    xs = (edges / edges[-1] - 0.5) * width
    h = 0.5 * thick * (1.0 - 0.3 * (xs / (0.5 * width)) ** 2)
    palmar = np.stack([xs, np.full(8, y), h], axis=1)
    dorsal = np.stack([xs[::-1], np.full(8, y), -h[::-1]], axis=1)
    return np.concatenate([palmar, dorsal], axis=0)


def _tube(base: np.ndarray, center0: np.ndarray, direction: np.ndarray, s: np.ndarray,
          radius: np.ndarray, ramp: float) -> np.ndarray:
    """Rings of 4 vertices morphing from ``base`` to a rounded square of ``radius``."""
    off = base - center0
    proj = off - np.outer(off @ direction, direction)
    unit = proj / np.linalg.norm(proj, axis=1, keepdims=True)
    rings = []
    for si, ri in zip(s, radius):
        lam = min(1.0, si / ramp)
        c = center0 + si * direction
        rings.append(c + (1.0 - lam) * proj + lam * ri * unit)
    return np.asarray(rings)


def _build(p: np.ndarray, palm_rings: int = _DEFAULT_PALM_RINGS,
           finger_rings=_DEFAULT_FINGER_RINGS):
    prop = _shape_proportions(p)
    ys = _palm_ys(prop, palm_rings)
    palm = np.stack([_palm_ring(y, prop) for y in ys])  # (P, 16, 3)
    verts = [palm.reshape(-1, 3)]
    n = palm_rings * 16
    palm_idx = np.arange(n).reshape(palm_rings, 16)
    top = palm_idx[-1]

    faces = []

    def quad(a, b, c, d):
        faces.append((a, b, c))
        faces.append((a, c, d))

    for r in range(palm_rings - 1):
        for i in range(16):
            if r == _THUMB_RING and i == 7:
                continue
            quad(palm_idx[r, i], palm_idx[r, (i + 1) % 16],
                 palm_idx[r + 1, (i + 1) % 16], palm_idx[r + 1, i])

    def cap_quad(k):
        return top[k], top[k + 1], top[14 - k], top[15 - k]

    # gap quads on the cap; the middle one is fanned around an extra vertex
    quad(*cap_quad(1))
    quad(*cap_quad(5))
    q = cap_quad(3)
    center = palm.reshape(-1, 3)[list(q)].mean(axis=0) + np.array([0.0, 0.002 * prop["size"], 0.0])
    verts.append(center[None])
    cap_center = n
    n += 1
    for i in range(4):
        faces.append((q[i], q[(i + 1) % 4], cap_center))

    finger_ring_idx, apexes, joint_rings, finger_s, finger_len = [], [], [], [], []
    radius0 = prop["finger_radius"]
    for f, name in enumerate(FINGER_NAMES):
        lens = prop["lengths"][name]
        nr = finger_rings[f]
        n1, n2, n3 = _split_rings(nr, lens)
        l1, l2, l3 = lens
        tip_cap = 0.22 * l3
        s = np.concatenate([
            l1 * np.arange(1, n1 + 1) / n1,
            l1 + l2 * np.arange(1, n2 + 1) / n2,
            l1 + l2 + (l3 - tip_cap) * np.arange(1, n3 + 1) / n3,
        ])
        total = l1 + l2 + l3
        if name == "thumb":
            base_ids = np.array([palm_idx[_THUMB_RING, 7], palm_idx[_THUMB_RING, 8],
                                 palm_idx[_THUMB_RING + 1, 8], palm_idx[_THUMB_RING + 1, 7]])
            direction = _THUMB_DIR
            rad = 1.15 * radius0
            ramp = 0.5 * l1
        else:
            k = _FINGER_QUAD[name]
            base_ids = np.array(cap_quad(k))
            direction = np.array([0.0, 1.0, 0.0])
            rad = radius0 * (1.05 if name in ("index", "middle") else 0.95 if name == "ring" else 0.85)
            ramp = 0.35 * l1
        allv = np.concatenate(verts)
        base = allv[base_ids]
        c0 = base.mean(axis=0)
        radius = rad * (1.0 - (1.0 - prop["tip_taper"]) * s / total)
        rings = _tube(base, c0, direction, s, radius, ramp)
        ids = n + np.arange(4 * nr).reshape(nr, 4)
        verts.append(rings.reshape(-1, 3))
        n += 4 * nr
        apex = c0 + total * direction
        verts.append(apex[None])
        apex_id = n
        n += 1
        all_rings = np.vstack([base_ids[None], ids])
        for j in range(nr):
            for i in range(4):
                quad(all_rings[j, i], all_rings[j, (i + 1) % 4],
                     all_rings[j + 1, (i + 1) % 4], all_rings[j + 1, i])
        for i in range(4):
            faces.append((all_rings[-1, i], all_rings[-1, (i + 1) % 4], apex_id))
        finger_ring_idx.append(all_rings)
        apexes.append(apex_id)
        joint_rings.append((n1, n1 + n2))
        finger_s.append(np.concatenate([[0.0], s]))
        finger_len.append(lens)

    layout = _Layout(
        palm_rings=palm_idx,
        cap_center=cap_center,
        finger_rings=tuple(finger_ring_idx),
        apex=tuple(apexes),
        joint_rings=tuple(joint_rings),
        finger_s=tuple(finger_s),
        finger_len=tuple(finger_len),
        faces=np.asarray(faces, dtype=np.int64),
        n_verts=n,
    )
    return np.concatenate(verts), layout


def _regressor(layout: _Layout, n_verts: int) -> np.ndarray:
    reg = np.zeros((N_JOINTS, n_verts))
    reg[0, layout.palm_rings[0]] = 1.0 / 16
    for f in range(5):
        rings = layout.finger_rings[f]
        mid, dist = layout.joint_rings[f]
        base = 1 + 4 * f
        reg[base, rings[0]] = 0.25
        reg[base + 1, rings[mid]] = 0.25
        reg[base + 2, rings[dist]] = 0.25
        reg[base + 3, layout.apex[f]] = 1.0
    return reg


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _skin_weights(layout: _Layout, n_verts: int, blend: float = 0.006):
    """At most 4 (here <= 2) bone influences per vertex; bone ids index ``BONES``."""
    idx = np.zeros((n_verts, 4), dtype=np.int64)
    w = np.zeros((n_verts, 4))
    w[:, 0] = 1.0  # palm bone by default
    bone_pos = {int(j): b for b, j in enumerate(BONES)}
    for f in range(5):
        rings = layout.finger_rings[f]
        s = layout.finger_s[f]
        l1, l2, _ = layout.finger_len[f]
        chain = [bone_pos[1 + 4 * f], bone_pos[2 + 4 * f], bone_pos[3 + 4 * f]]
        joints_s = [0.0, l1, l1 + l2]
        parents = [0] + chain[:2]
        ids = list(zip(rings, s)) + [(np.array([layout.apex[f]]), s[-1] + 1.0)]
        for verts, si in ids:
            seg = 2 if si >= joints_s[2] else 1 if si >= joints_s[1] else 0
            # blend with the parent across the joint at the start of this segment
            # and with the child across the joint at its end
            t = _smoothstep((si - joints_s[seg] + blend) / (2 * blend))
            a, b = parents[seg], chain[seg]
            wa, wb = 1.0 - t, t
            if seg < 2 and si > joints_s[seg + 1] - blend:
                t2 = _smoothstep((si - joints_s[seg + 1] + blend) / (2 * blend))
                a, b = chain[seg], chain[seg + 1]
                wa, wb = 1.0 - t2, t2
            idx[verts, 0], idx[verts, 1] = a, b
            w[verts, 0], w[verts, 1] = wa, wb
    return idx, w


def _bone_frames(rest_joints: np.ndarray) -> np.ndarray:
    """Per articulated joint rest frame (columns: flexion axis, bone axis, normal)."""
    frames = np.tile(np.eye(3), (N_ARTICULATED, 1, 1))
    for a in (0, 1):
        j = ARTICULATED_JOINTS[a]
        y = rest_joints[j + 1] - rest_joints[j]
        y = y / np.linalg.norm(y)
        z = np.array([-0.6, 0.0, 0.8])
        z = z - (z @ y) * y
        z = z / np.linalg.norm(z)
        frames[a] = np.stack([np.cross(y, z), y, z], axis=1)
    return frames


def face_normals(vertices: np.ndarray, faces: np.ndarray):
    """Unit normals from counter-clockwise winding, plus a degenerate-face flag."""
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces)
    if f.size == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    length = np.linalg.norm(n, axis=1)
    degenerate = length < 1e-14
    out = np.where(degenerate[:, None], np.array([0.0, 0.0, 1.0]),
                   n / np.where(degenerate, 1.0, length)[:, None])
    return out, degenerate


def canonical_normals(mesh) -> np.ndarray:
    """Per-face unit normals of a zero-pose mesh (degenerate faces get +z)."""
    normals, _ = face_normals(mesh.vertices, mesh.faces)
    return normals


# --------------------------------------------------------------------------
# data types


@dataclass
class JointAngleLimits:
    """Feasible (azimuth, pitch, roll) ranges per articulated joint, radians."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).reshape(N_ARTICULATED, 3)
        self.upper = np.asarray(self.upper, dtype=float).reshape(N_ARTICULATED, 3)
        if np.any(self.lower > self.upper):
            raise ModelError("joint limits need min <= max for every entry")

    @classmethod
    def from_dict(cls, data: dict) -> "JointAngleLimits":
        lower, upper = [], []
        for entry in data["joints"]:
            lower.append([entry["azimuth"][0], entry["pitch"][0], entry["roll"][0]])
            upper.append([entry["azimuth"][1], entry["pitch"][1], entry["roll"][1]])
        return cls(np.array(lower), np.array(upper))

    @classmethod
    def load(cls, path=None) -> "JointAngleLimits":
        path = Path(path) if path else _DATA / "joint_limits.json"
        return cls.from_dict(json.loads(path.read_text()))

    def to_dict(self) -> dict:
        joints = []
        for a in range(N_ARTICULATED):
            joints.append({
                "joint": int(ARTICULATED_JOINTS[a]),
                "azimuth": [float(self.lower[a, 0]), float(self.upper[a, 0])],
                "pitch": [float(self.lower[a, 1]), float(self.upper[a, 1])],
                "roll": [float(self.lower[a, 2]), float(self.upper[a, 2])],
            })
        return {"joints": joints}


def _check_len(name, arr, n):
    arr = np.asarray(arr, dtype=float).ravel()
    if arr.size != n:
        raise ModelError(f"{name} must have {n} entries, got {arr.size}")
    return arr


@dataclass
class HandParams:
    """Geometry code (theta, beta, s, R, T) and appearance code (C, L) of one frame."""

    theta: np.ndarray
    beta: np.ndarray
    scale: float
    rot: np.ndarray
    trans: np.ndarray
    texture: np.ndarray
    light: np.ndarray

    def __post_init__(self):
        self.theta = _check_len("theta", self.theta, N_POSE)
        self.beta = _check_len("beta", self.beta, N_SHAPE)
        self.rot = _check_len("rot", self.rot, 3)
        self.trans = _check_len("trans", self.trans, 3)
        self.light = _check_len("light", self.light, N_LIGHT)
        self.texture = np.asarray(self.texture, dtype=float).reshape(-1, 3)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise ModelError(f"scale must be positive, got {self.scale}")
        if not np.all(np.isfinite(self.texture)):
            raise ModelError("texture has non-finite entries")

    @property
    def geometry(self) -> np.ndarray:
        return np.concatenate([self.theta, self.beta, [self.scale], self.rot, self.trans])

    def with_geometry(self, x: np.ndarray) -> "HandParams":
        x = np.asarray(x, dtype=float)
        return HandParams(x[SL_THETA], x[SL_BETA], float(x[40]), x[SL_ROT], x[SL_TRANS],
                          self.texture.copy(), self.light.copy())

    def copy(self) -> "HandParams":
        return HandParams(self.theta.copy(), self.beta.copy(), self.scale, self.rot.copy(),
                          self.trans.copy(), self.texture.copy(), self.light.copy())

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "beta": self.beta.tolist(),
            "scale": self.scale,
            "rot": self.rot.tolist(),
            "trans": self.trans.tolist(),
            "texture": self.texture.tolist(),
            "light": self.light.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HandParams":
        return cls(d["theta"], d["beta"], d["scale"], d["rot"], d["trans"], d["texture"], d["light"])


def default_light() -> np.ndarray:
    """Half ambient, half frontal directional white light."""
    return np.array([0.5, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0])


@dataclass
class HandMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray


@dataclass
class Decoded:
    """Decoder output with optional Jacobians w.r.t. (theta, beta)."""

    vertices: np.ndarray
    joints: np.ndarray
    d_vertices: np.ndarray | None = None   # (n_v, 3, 40)
    d_joints: np.ndarray | None = None     # (21, 3, 40)


# --------------------------------------------------------------------------


@dataclass
class HandModel:
    template: np.ndarray           # (n_v, 3)
    faces: np.ndarray              # (F, 3)
    blendshapes: np.ndarray        # (10, n_v, 3)
    skin_index: np.ndarray         # (n_v, 4) bone slots into BONES
    skin_weight: np.ndarray        # (n_v, 4)
    regressor: np.ndarray          # (21, n_v)
    bone_frames: np.ndarray        # (10, 3, 3)
    limits: JointAngleLimits = field(default_factory=JointAngleLimits.load)

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.blendshapes = np.asarray(self.blendshapes, dtype=float)
        self.skin_index = np.asarray(self.skin_index, dtype=np.int64)
        self.skin_weight = np.asarray(self.skin_weight, dtype=float)
        self.regressor = np.asarray(self.regressor, dtype=float)
        self.bone_frames = np.asarray(self.bone_frames, dtype=float)
        nv = self.template.shape[0]
        if self.faces.size and self.faces.max() >= nv:
            raise ModelError("face index out of range")
        if self.blendshapes.shape != (N_SHAPE, nv, 3):
            raise ModelError(f"blendshapes must be (10, {nv}, 3)")
        if self.regressor.shape != (N_JOINTS, nv):
            raise ModelError(f"regressor must be (21, {nv})")
        self._support = np.flatnonzero(np.any(self.regressor != 0.0, axis=0))
        self._reg_support = self.regressor[:, self._support]
        self.rest_joints = self.regressor @ self.template
        self.canonical_normals, _ = face_normals(self.template, self.faces)
        # pivot offsets for the shape Jacobian: d pivots / d beta, (10, 21, 3)
        self._pivot_dirs = np.einsum("jv,lvc->ljc", self.regressor, self.blendshapes)
        for arr in (self.template, self.faces, self.blendshapes, self.skin_index,
                    self.skin_weight, self.regressor, self.bone_frames, self.canonical_normals):
            arr.setflags(write=False)

    @property
    def n_verts(self) -> int:
        return self.template.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    # ---------------------------------------------------------------- decode

    def _local_rotations(self, theta, jac: bool):
        """Local rotations per joint (21) and per-theta-column derivative terms."""
        theta = theta.reshape(N_ARTICULATED, 3)
        rot = np.tile(np.eye(3), (N_JOINTS, 1, 1))
        drot = {}
        for a, j in enumerate(ARTICULATED_JOINTS):
            if jac:
                rot[j], drot[j] = rodrigues_jac(theta[a])
            else:
                rot[j] = rodrigues(theta[a])
        for j in COUPLED_JOINTS:
            a = int(np.flatnonzero(ARTICULATED_JOINTS == j - 1)[0])
            v = DIP_COUPLING * theta[a]
            if jac:
                rot[j], d = rodrigues_jac(v)
                drot[j] = DIP_COUPLING * d
            else:
                rot[j] = rodrigues(v)
        return rot, drot

    def _chain(self, rot, pivots):
        """Global joint rotations and joint displacements from the rest pivots.

        Displacements are accumulated directly so the rest pose is exact.
        """
        glob = np.empty((N_JOINTS, 3, 3))
        shift = np.empty((N_JOINTS, 3))
        eye = np.eye(3)
        for j in range(N_JOINTS):
            p = PARENTS[j]
            if p < 0:
                glob[j] = rot[j]
                shift[j] = 0.0
            else:
                glob[j] = glob[p] @ rot[j]
                shift[j] = shift[p] + (glob[p] - eye) @ (pivots[j] - pivots[p])
        return glob, shift

    def _descendants(self):
        desc = np.zeros((N_JOINTS, N_JOINTS), dtype=bool)
        for j in range(N_JOINTS):
            k = j
            while k >= 0:
                desc[k, j] = True
                k = PARENTS[k]
        return desc

    def _skin(self, theta, beta, vidx, jac: bool):
        shaped = self.template[vidx] + np.einsum("l,lvc->vc", beta, self.blendshapes[:, vidx])
        pivots = self.rest_joints + np.einsum("l,ljc->jc", beta, self._pivot_dirs)
        rot, drot = self._local_rotations(theta, jac)
        glob, shift = self._chain(rot, pivots)
        posed = pivots + shift
        bones = BONES[self.skin_index[vidx]]               # (n, 4) joint ids
        w = self.skin_weight[vidx]                         # (n, 4)
        local = shaped[:, None, :] - pivots[bones]         # (n, 4, 3)
        # per-bone displacement (G - I)(v - p) + shift, so zero pose adds exact zeros
        moved = np.einsum("nkab,nkb->nka", glob[bones] - np.eye(3), local) + shift[bones]
        verts = shaped + np.einsum("nk,nka->na", w, moved)
        per_bone = shaped[:, None, :] + moved
        if not jac:
            return verts, None
        n = len(vidx)
        d = np.zeros((n, 3, N_POSE + N_SHAPE))
        desc = self._descendants()
        for j, dr in drot.items():
            a = j if j in ARTICULATED_JOINTS else j - 1
            col = 3 * int(np.flatnonzero(ARTICULATED_JOINTS == a)[0])
            gp = glob[PARENTS[j]]
            mask = desc[j][bones] * w                      # (n, 4)
            if not np.any(mask):
                continue
            rel = per_bone - posed[j]                      # (n, 4, 3)
            for i in range(3):
                wmat = gp @ dr[i] @ rot[j].T @ gp.T
                d[:, :, col + i] += np.einsum("nk,ab,nkb->na", mask, wmat, rel)
        # shape: d per_bone / d beta_l = G_b (B_l[v] - P_l[b]) + d posed_b
        dpiv = self._pivot_dirs                            # (10, 21, 3)
        dposed = np.empty_like(dpiv)
        for j in range(N_JOINTS):
            p = PARENTS[j]
            if p < 0:
                dposed[:, j] = dpiv[:, j]
            else:
                dposed[:, j] = dposed[:, p] + (dpiv[:, j] - dpiv[:, p]) @ glob[p].T
        bl = self.blendshapes[:, vidx]                     # (10, n, 3)
        dlocal = bl[:, :, None, :] - dpiv[:, bones]        # (10, n, 4, 3)
        dper = np.einsum("nkab,lnkb->lnka", glob[bones], dlocal) + dposed[:, bones]
        d[:, :, N_POSE:] = np.einsum("nk,lnka->nal", w, dper)
        return verts, d

    def decode(self, theta, beta, jacobian: bool = False, vertices: bool = True) -> Decoded:
        """Posed model-space mesh and joints for pose ``theta`` and shape ``beta``.

        With ``vertices=False`` only the regressor support is skinned, which is
        all the joints need.
        """
        theta = _check_len("theta", theta, N_POSE)
        beta = _check_len("beta", beta, N_SHAPE)
        if vertices:
            verts, dv = self._skin(theta, beta, np.arange(self.n_verts), jacobian)
            joints = self.regressor @ verts
            dj = np.einsum("jv,vcp->jcp", self.regressor, dv) if jacobian else None
            return Decoded(verts, joints, dv, dj)
        sv, dsv = self._skin(theta, beta, self._support, jacobian)
        joints = self._reg_support @ sv
        dj = np.einsum("jv,vcp->jcp", self._reg_support, dsv) if jacobian else None
        return Decoded(None, joints, None, dj)

    def mesh(self, vertices) -> HandMesh:
        normals, _ = face_normals(vertices, self.faces)
        return HandMesh(np.asarray(vertices, dtype=float), self.faces, normals)

    # ------------------------------------------------------------ joint angles

    def joint_angles(self, theta, jacobian: bool = False):
        """(azimuth, pitch, roll) per articulated joint, intrinsic Z-Y-X in the bone frame.

        Returns ``(10, 3)`` angles and, if requested, their ``(10, 3, 30)`` Jacobian.
        """
        theta = _check_len("theta", theta, N_POSE).reshape(N_ARTICULATED, 3)
        angles = np.zeros((N_ARTICULATED, 3))
        jac = np.zeros((N_ARTICULATED, 3, N_POSE)) if jacobian else None
        for a in range(N_ARTICULATED):
            b = self.bone_frames[a]
            if jacobian:
                r, dr = rodrigues_jac(theta[a])
                dm = np.einsum("ab,ibc,cd->iad", b.T, dr, b)
            else:
                r = rodrigues(theta[a])
            m = np.eye(3) + b.T @ (r - np.eye(3)) @ b   # exact identity at zero pose
            angles[a], grad = _zyx_angles(m, dm if jacobian else None)
            if jacobian:
                jac[a, :, 3 * a:3 * a + 3] = grad
        return (angles, jac) if jacobian else angles

    # ----------------------------------------------------------------- I/O

    def to_dict(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "template": self.template.tolist(),
            "faces": self.faces.tolist(),
            "blendshapes": self.blendshapes.tolist(),
            "skin_index": self.skin_index.tolist(),
            "skin_weight": self.skin_weight.tolist(),
            "regressor": {
                "rows": [[[int(v), float(self.regressor[j, v])] for v in np.flatnonzero(self.regressor[j])]
                         for j in range(N_JOINTS)],
                "n_verts": self.n_verts,
            },
            "bone_frames": self.bone_frames.tolist(),
            "limits": self.limits.to_dict(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, d: dict) -> "HandModel":
        if d.get("schema") != MODEL_SCHEMA:
            raise ModelError(f"unsupported model schema {d.get('schema')!r}")
        nv = d["regressor"]["n_verts"]
        reg = np.zeros((N_JOINTS, nv))
        for j, row in enumerate(d["regressor"]["rows"]):
            for v, val in row:
                reg[j, v] = val
        return cls(
            template=np.array(d["template"]),
            faces=np.array(d["faces"]),
            blendshapes=np.array(d["blendshapes"]),
            skin_index=np.array(d["skin_index"]),
            skin_weight=np.array(d["skin_weight"]),
            regressor=reg,
            bone_frames=np.array(d["bone_frames"]),
            limits=JointAngleLimits.from_dict(d["limits"]),
        )

    @classmethod
    def load(cls, path) -> "HandModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _zyx_angles(m, dm=None):
    """Intrinsic Z-Y-X angles of rotation ``m`` and optional gradient via ``dm`` (k, 3, 3)."""
    c = np.hypot(m[0, 0], m[1, 0])
    if c < 1e-12:
        # gimbal lock: roll folded into azimuth
        pitch = np.pi / 2 if -m[2, 0] > 0 else -np.pi / 2
        az = np.arctan2(-m[0, 1], m[1, 1])
        out = np.array([az, pitch, 0.0])
        return out, (np.zeros((3, dm.shape[0])) if dm is not None else None)
    az = np.arctan2(m[1, 0], m[0, 0])
    pitch = np.arctan2(-m[2, 0], c)
    roll = np.arctan2(m[2, 1], m[2, 2])
    out = np.array([az, pitch, roll])
    if dm is None:
        return out, None

    def datan2(y, x, dy, dx):
        return (x * dy - y * dx) / (x * x + y * y)

    dc = (m[0, 0] * dm[:, 0, 0] + m[1, 0] * dm[:, 1, 0]) / c
    grad = np.stack([
        datan2(m[1, 0], m[0, 0], dm[:, 1, 0], dm[:, 0, 0]),
        datan2(-m[2, 0], c, -dm[:, 2, 0], dc),
        datan2(m[2, 1], m[2, 2], dm[:, 2, 1], dm[:, 2, 2]),
    ])
    return out, grad


def compose_zyx(angles) -> np.ndarray:
    az, pitch, roll = angles
    return rodrigues([0, 0, az]) @ rodrigues([0, pitch, 0]) @ rodrigues([roll, 0, 0])


def build_model(palm_rings: int = _DEFAULT_PALM_RINGS, finger_rings=_DEFAULT_FINGER_RINGS,
                limits: JointAngleLimits | None = None) -> HandModel:
    """Generate the procedural hand; the defaults give 778 vertices / 1538 faces."""
    p0 = np.zeros(N_SHAPE)
    template, layout = _build(p0, palm_rings, finger_rings)
    delta = 1e-3
    shapes = []
    for k in range(N_SHAPE):
        e = np.zeros(N_SHAPE)
        e[k] = delta
        plus, _ = _build(p0 + e, palm_rings, finger_rings)
        minus, _ = _build(p0 - e, palm_rings, finger_rings)
        shapes.append((plus - minus) / (2 * delta))
    reg = _regressor(layout, layout.n_verts)
    idx, w = _skin_weights(layout, layout.n_verts)
    frames = _bone_frames(reg @ template)
    return HandModel(template, layout.faces, np.asarray(shapes), idx, w, reg, frames,
                     limits if limits is not None else JointAngleLimits.load())


@lru_cache(maxsize=1)
def default_model() -> HandModel:
    return build_model()


def apply_global_transform(mesh: HandMesh | None, joints, scale: float, rot, trans):
    """Map model-space geometry into camera space: ``p -> s * Rot(R) p + T``."""
    if not scale > 0:
        raise ModelError(f"scale must be positive, got {scale}")
    r = rodrigues(rot)
    trans = np.asarray(trans, dtype=float)
    out_joints = scale * np.asarray(joints, dtype=float) @ r.T + trans
    if mesh is None:
        return None, out_joints
    out_mesh = HandMesh(scale * mesh.vertices @ r.T + trans, mesh.faces, mesh.normals @ r.T)
    return out_mesh, out_joints


def camera_points(model_points, geometry, d_model=None):
    """Camera-space points and, given ``d_model`` (n, 3, 40), the Jacobian w.r.t. all 47 geometry entries."""
    geometry = np.asarray(geometry, dtype=float)
    s = geometry[40]
    r, dr = rodrigues_jac(geometry[SL_ROT])
    pts = s * model_points @ r.T + geometry[SL_TRANS]
    if d_model is None:
        return pts, None
    n = model_points.shape[0]
    jac = np.zeros((n, 3, GEOM_DIM))
    jac[:, :, :40] = s * np.einsum("ab,nbp->nap", r, d_model)
    jac[:, :, 40] = model_points @ r.T
    jac[:, :, 41:44] = s * np.einsum("iab,nb->nai", dr, model_points)
    jac[:, :, 44:47] = np.eye(3)
    return pts, jac
