"""Articulated capsule body with linear blend skinning.

Stands in for a statistical body model: 21 body joints plus a root, a
tessellated capsule around every bone, per-vertex skinning weights, shape
coefficients that stretch bones and capsule radii, and a triangle topology
that gives vertex normals and 1-ring neighbourhoods.

Axes: x points to the body's left, y forward, z up. The root (pelvis) sits
at the origin of the rest pose.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .core import LabelSet, MarkerLayout

BODY_FORMAT = "surrogate-body/1"
LAYOUT_FORMAT = "marker-layout/1"

N_SHAPE = 10
SHAPE_STEP = 0.04  # relative stretch per unit of a shape coefficient
DEFAULT_MARKER_OFFSET = 0.0095

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

_REST_JOINTS = np.array([
    [0.00, 0.00, 0.00],
    [0.09, 0.00, -0.08], [-0.09, 0.00, -0.08],
    [0.00, -0.01, 0.11],
    [0.10, 0.00, -0.48], [-0.10, 0.00, -0.48],
    [0.00, -0.01, 0.24],
    [0.10, -0.03, -0.88], [-0.10, -0.03, -0.88],
    [0.00, -0.01, 0.34],
    [0.11, 0.10, -0.94], [-0.11, 0.10, -0.94],
    [0.00, -0.02, 0.52],
    [0.07, 0.00, 0.44], [-0.07, 0.00, 0.44],
    [0.00, 0.00, 0.62],
    [0.18, -0.01, 0.44], [-0.18, -0.01, 0.44],
    [0.36, -0.02, 0.24], [-0.36, -0.02, 0.24],
    [0.52, 0.00, 0.05], [-0.52, 0.00, 0.05],
])

# extra end points so that leaf joints (head, wrists, feet) also carry geometry
_LEAF_ENDS = {
    15: np.array([0.00, 0.01, 0.80]),
    20: np.array([0.60, 0.02, -0.05]),
    21: np.array([-0.60, 0.02, -0.05]),
    10: np.array([0.11, 0.19, -0.95]),
    11: np.array([-0.11, 0.19, -0.95]),
}

# capsule radius keyed by (start joint, end joint); -1 marks a leaf extension
_RADIUS = {
    (0, 1): 0.09, (0, 2): 0.09, (0, 3): 0.13, (1, 4): 0.075, (2, 5): 0.075,
    (3, 6): 0.13, (4, 7): 0.05, (5, 8): 0.05, (6, 9): 0.14, (7, 10): 0.04,
    (8, 11): 0.04, (9, 12): 0.11, (9, 13): 0.06, (9, 14): 0.06, (12, 15): 0.05,
    (13, 16): 0.055, (14, 17): 0.055, (16, 18): 0.045, (17, 19): 0.045,
    (18, 20): 0.035, (19, 21): 0.035,
    (15, -1): 0.09, (20, -1): 0.035, (21, -1): 0.035, (10, -1): 0.035, (11, -1): 0.035,
}

# shape coefficient index -> capsule (start, end) pairs it stretches / thickens;
# coefficient 0 scales everything, 1 thickens everything
_SHAPE_GROUPS = {
    2: ({"left_hip:left_knee", "right_hip:right_knee", "left_knee:left_ankle", "right_knee:right_ankle"}, set()),
    3: ({"left_shoulder:left_elbow", "right_shoulder:right_elbow", "left_elbow:left_wrist",
         "right_elbow:right_wrist"}, set()),
    4: ({"pelvis:spine1", "spine1:spine2", "spine2:spine3", "spine3:neck"}, set()),
    5: ({"spine3:left_collar", "spine3:right_collar", "left_collar:left_shoulder",
         "right_collar:right_shoulder"}, set()),
    6: ({"pelvis:left_hip", "pelvis:right_hip"}, set()),
    7: (set(), {"left_shoulder:left_elbow", "right_shoulder:right_elbow", "left_elbow:left_wrist",
                "right_elbow:right_wrist"}),
    8: (set(), {"left_hip:left_knee", "right_hip:right_knee", "left_knee:left_ankle", "right_knee:right_ankle"}),
    9: ({"neck:head", "head:end"}, {"neck:head", "head:end"}),
}


# Axis-angle component boxes (radians) per joint, x/y/z. Shipped as config.
DEFAULT_JOINT_LIMITS = {
    "pelvis": [[-0.25, 0.25], [-0.2, 0.2], [-np.pi, np.pi]],
    "left_hip": [[-0.5, 1.2], [-0.5, 0.2], [-0.3, 0.3]],
    "right_hip": [[-0.5, 1.2], [-0.2, 0.5], [-0.3, 0.3]],
    "spine1": [[-0.3, 0.3], [-0.2, 0.2], [-0.3, 0.3]],
    "left_knee": [[-1.8, 0.0], [-0.05, 0.05], [-0.1, 0.1]],
    "right_knee": [[-1.8, 0.0], [-0.05, 0.05], [-0.1, 0.1]],
    "spine2": [[-0.2, 0.3], [-0.15, 0.15], [-0.25, 0.25]],
    "left_ankle": [[-0.4, 0.4], [-0.2, 0.2], [-0.2, 0.2]],
    "right_ankle": [[-0.4, 0.4], [-0.2, 0.2], [-0.2, 0.2]],
    "spine3": [[-0.2, 0.3], [-0.15, 0.15], [-0.25, 0.25]],
    "left_foot": [[-0.2, 0.3], [-0.1, 0.1], [-0.1, 0.1]],
    "right_foot": [[-0.2, 0.3], [-0.1, 0.1], [-0.1, 0.1]],
    "neck": [[-0.3, 0.4], [-0.2, 0.2], [-0.4, 0.4]],
    "left_collar": [[-0.15, 0.15], [-0.15, 0.15], [-0.15, 0.15]],
    "right_collar": [[-0.15, 0.15], [-0.15, 0.15], [-0.15, 0.15]],
    "head": [[-0.4, 0.4], [-0.3, 0.3], [-0.6, 0.6]],
    "left_shoulder": [[-1.0, 1.0], [-0.8, 0.6], [-0.6, 0.6]],
    "right_shoulder": [[-1.0, 1.0], [-0.6, 0.8], [-0.6, 0.6]],
    "left_elbow": [[0.0, 2.0], [-0.2, 0.2], [-0.3, 0.3]],
    "right_elbow": [[0.0, 2.0], [-0.2, 0.2], [-0.3, 0.3]],
    "left_wrist": [[-0.5, 0.5], [-0.4, 0.4], [-0.5, 0.5]],
    "right_wrist": [[-0.5, 0.5], [-0.4, 0.4], [-0.5, 0.5]],
}


@dataclass(frozen=True)
class Pose:
    theta: np.ndarray  # (J+1, 3) axis-angle
    gamma: np.ndarray  # (3,)
    beta: np.ndarray   # (10,)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        gamma = np.asarray(self.gamma, dtype=np.float64).reshape(3)
        beta = np.asarray(self.beta, dtype=np.float64).reshape(N_SHAPE)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.gamma))
                    and np.all(np.isfinite(self.beta)))

    @classmethod
    def identity(cls, n_joints: int = len(JOINT_NAMES)) -> "Pose":
        return cls(np.zeros((n_joints, 3)), np.zeros(3), np.zeros(N_SHAPE))


@dataclass(frozen=True)
class MeshSurface:
    vertices: np.ndarray
    normals: np.ndarray


@dataclass(frozen=True, eq=False)
class SurrogateBody:
    joint_names: tuple
    parents: np.ndarray        # (J+1,)
    rest_joints: np.ndarray    # (J+1, 3)
    seg_start: np.ndarray      # (S,) joint a capsule starts at (and is rigidly bound to)
    seg_end: np.ndarray        # (S, 3) rest position of the capsule end
    seg_end_joint: np.ndarray  # (S,) child joint at the end, or -1 for leaf extensions
    shape_length: np.ndarray   # (S, 10) 0/1 membership
    shape_radius: np.ndarray   # (S, 10)
    vert_seg: np.ndarray       # (V,)
    vert_t: np.ndarray         # (V,) position along the bone
    vert_radial: np.ndarray    # (V, 3) offset from the bone axis at rest
    weight_joints: np.ndarray  # (V, 2)
    weight_values: np.ndarray  # (V, 2)
    faces: np.ndarray          # (F, 3)

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def n_vertices(self) -> int:
        return len(self.vert_seg)

    def joint_index(self, name: str) -> int:
        return self.joint_names.index(name)

    def template(self) -> np.ndarray:
        return shaped_rest(self, np.zeros(N_SHAPE))[0]

    def one_ring(self) -> list:
        if not hasattr(self, "_ring_cache"):
            nbrs = [set() for _ in range(self.n_vertices)]
            for a, b, c in self.faces:
                nbrs[a].update((b, c))
                nbrs[b].update((a, c))
                nbrs[c].update((a, b))
            object.__setattr__(self, "_ring_cache", [np.array(sorted(s), dtype=np.int64) for s in nbrs])
        return self._ring_cache


def _capsule(n_around: int, n_axial: int, radius: float, axis: np.ndarray):
    """Unit-bone capsule: returns (t, radial (N,3), faces) with outward winding."""
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    phi = 2 * np.pi * np.arange(n_around) / n_around
    around = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2

    ts, radials = [0.0], [-radius * axis]  # start pole
    rings = []
    for polar in (np.pi / 3, np.pi / 6):  # start cap
        rings.append((0.0, radius * np.cos(polar) * around - radius * np.sin(polar) * axis))
    for t in np.linspace(0.0, 1.0, n_axial):
        rings.append((t, radius * around))
    for polar in (np.pi / 6, np.pi / 3):  # end cap
        rings.append((1.0, radius * np.cos(polar) * around + radius * np.sin(polar) * axis))
    for t, rad in rings:
        ts.extend([t] * n_around)
        radials.extend(rad)
    ts.append(1.0)
    radials.append(radius * axis)

    n_rings = len(rings)
    faces = []
    ring0 = 1
    for k in range(n_around):
        faces.append((0, ring0 + (k + 1) % n_around, ring0 + k))
    for r in range(n_rings - 1):
        a0 = 1 + r * n_around
        b0 = a0 + n_around
        for k in range(n_around):
            k1 = (k + 1) % n_around
            faces.append((a0 + k, a0 + k1, b0 + k))
            faces.append((a0 + k1, b0 + k1, b0 + k))
    last = 1 + (n_rings - 1) * n_around
    end_pole = last + n_around
    for k in range(n_around):
        faces.append((end_pole, last + k, last + (k + 1) % n_around))
    return np.array(ts), np.array(radials), np.array(faces, dtype=np.int64)


def _segment_groups(start: str, end: Optional[str]):
    """Shape coefficients acting on one capsule: (length set, radius set)."""
    key = f"{start}:{end if end is not None else 'end'}"
    length, radius = {0}, {0, 1}
    for k, (lg, rg) in _SHAPE_GROUPS.items():
        if key in lg:
            length.add(k)
        if key in rg:
            radius.add(k)
    return length, radius


def build_body(n_around: int = 10, ring_spacing: float = 0.06) -> SurrogateBody:
    """Tessellate the default capsule body (about 2000 vertices)."""
    segs = []
    for c, p in enumerate(PARENTS):
        if p >= 0:
            segs.append((p, c, _REST_JOINTS[c]))
    for j, end in _LEAF_ENDS.items():
        segs.append((j, -1, end))
    segs.sort(key=lambda s: (s[0], s[1] if s[1] >= 0 else 99))

    vert_seg, vert_t, vert_rad, faces = [], [], [], []
    shape_len = np.zeros((len(segs), N_SHAPE))
    shape_rad = np.zeros((len(segs), N_SHAPE))
    offset = 0
    for s, (p, c, end) in enumerate(segs):
        bone = end - _REST_JOINTS[p]
        length = np.linalg.norm(bone)
        n_axial = max(2, int(round(length / ring_spacing)) + 1)
        t, rad, f = _capsule(n_around, n_axial, _RADIUS[(p, c)], bone)
        vert_seg.append(np.full(len(t), s))
        vert_t.append(t)
        vert_rad.append(rad)
        faces.append(f + offset)
        offset += len(t)
        lg, rg = _segment_groups(JOINT_NAMES[p], JOINT_NAMES[c] if c >= 0 else None)
        shape_len[s, sorted(lg)] = 1
        shape_rad[s, sorted(rg)] = 1

    seg_start = np.array([s[0] for s in segs])
    seg_end_joint = np.array([s[1] for s in segs])
    vert_seg = np.concatenate(vert_seg)
    vert_t = np.concatenate(vert_t)

    # bound to the segment's start joint, blended with its parent near the start
    own = seg_start[vert_seg]
    par = np.asarray(PARENTS)[own]
    blend = np.where(par >= 0, 0.5 * np.clip(1.0 - vert_t / 0.25, 0.0, 1.0), 0.0)
    weight_joints = np.stack([own, np.where(par >= 0, par, own)], axis=1)
    weight_values = np.stack([1.0 - blend, blend], axis=1)

    return SurrogateBody(
        joint_names=JOINT_NAMES,
        parents=np.asarray(PARENTS),
        rest_joints=_REST_JOINTS.copy(),
        seg_start=seg_start,
        seg_end=np.array([s[2] for s in segs]),
        seg_end_joint=seg_end_joint,
        shape_length=shape_len,
        shape_radius=shape_rad,
        vert_seg=vert_seg,
        vert_t=vert_t,
        vert_radial=np.concatenate(vert_rad),
        weight_joints=weight_joints,
        weight_values=weight_values,
        faces=np.concatenate(faces),
    )


def shaped_rest(body: SurrogateBody, beta: np.ndarray):
    """Rest vertices and joint positions for shape coefficients ``beta``."""
    beta = np.asarray(beta, dtype=np.float64)
    factor = np.clip(1.0 + SHAPE_STEP * beta, 0.5, 1.5)
    len_scale = np.prod(np.where(body.shape_length > 0, factor, 1.0), axis=1)
    rad_scale = np.prod(np.where(body.shape_radius > 0, factor, 1.0), axis=1)

    seg_of_child = {int(c): s for s, c in enumerate(body.seg_end_joint) if c >= 0}
    joints = np.zeros_like(body.rest_joints)
    joints[0] = body.rest_joints[0]
    for j in range(1, body.n_joints):
        p = body.parents[j]
        s = seg_of_child[j]
        joints[j] = joints[p] + len_scale[s] * (body.rest_joints[j] - body.rest_joints[p])

    start = joints[body.seg_start]
    bone = len_scale[:, None] * (body.seg_end - body.rest_joints[body.seg_start])
    vs = body.vert_seg
    verts = start[vs] + body.vert_t[:, None] * bone[vs] + rad_scale[vs, None] * body.vert_radial
    return verts, joints


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # area weighted
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def joint_transforms(body: SurrogateBody, theta: np.ndarray, joints: np.ndarray):
    """World rotations (J,3,3) and joint positions (J,3) for a pose."""
    rot_local = Rotation.from_rotvec(np.asarray(theta).reshape(-1, 3)).as_matrix()
    rots = np.zeros((body.n_joints, 3, 3))
    pos = np.zeros((body.n_joints, 3))
    for j in range(body.n_joints):
        p = body.parents[j]
        if p < 0:
            rots[j] = rot_local[j]
            pos[j] = joints[j]
        else:
            rots[j] = rots[p] @ rot_local[j]
            pos[j] = pos[p] + rots[p] @ (joints[j] - joints[p])
    return rots, pos


def skin(body: SurrogateBody, pose: Pose) -> MeshSurface:
    """Linear blend skinning of the shaped rest mesh, then global translation."""
    if not pose.is_finite():
        raise ValueError("pose contains non-finite values")
    if pose.theta.shape[0] != body.n_joints:
        raise ValueError(f"pose has {pose.theta.shape[0]} joints, body has {body.n_joints}")
    rest, joints = shaped_rest(body, pose.beta)
    rots, pos = joint_transforms(body, pose.theta, joints)
    verts = np.zeros_like(rest)
    for k in range(body.weight_joints.shape[1]):
        j = body.weight_joints[:, k]
        local = rest - joints[j]
        moved = np.einsum("vab,vb->va", rots[j], local) + pos[j]
        verts += body.weight_values[:, k, None] * moved
    verts += pose.gamma
    return MeshSurface(verts, vertex_normals(verts, body.faces))


def place_virtual_markers(surface: MeshSurface, layout: MarkerLayout,
                          vertex_ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Markers sit at their anchor vertex pushed out along the normal by the offset."""
    v = layout.vertex_ids if vertex_ids is None else np.asarray(vertex_ids)
    if np.any(v < 0) or np.any(v >= len(surface.vertices)):
        raise IndexError("marker vertex index out of range")
    return surface.vertices[v] + surface.normals[v] * layout.offsets[:, None]


# --- motion and shape sampling -------------------------------------------

def limits_array(body: SurrogateBody, limits: Optional[dict] = None) -> np.ndarray:
    limits = DEFAULT_JOINT_LIMITS if limits is None else limits
    return np.array([limits[name] for name in body.joint_names], dtype=np.float64)


def _motion_params(rng: np.random.Generator, lim: np.ndarray, n_waves: int):
    lo, hi = lim[..., 0], lim[..., 1]
    span = hi - lo
    center = rng.uniform(lo, hi) * 0.5
    amps = rng.uniform(0.0, 1.0, size=lim.shape[:2] + (n_waves,)) * (span / (2 * n_waves))[..., None]
    freqs = rng.uniform(0.15, 1.2, size=amps.shape)
    phases = rng.uniform(0.0, 2 * np.pi, size=amps.shape)
    drift = rng.uniform(-0.3, 0.3, size=(3, n_waves)), rng.uniform(0.05, 0.3, size=(3, n_waves)), \
        rng.uniform(0.0, 2 * np.pi, size=(3, n_waves))
    return center, amps, freqs, phases, drift


def _eval_motion(params, times: np.ndarray, lim: np.ndarray, amplitude: float):
    center, amps, freqs, phases, (d_amp, d_freq, d_phase) = params
    t = times[:, None, None, None]
    theta = center + np.sum(amps * np.sin(2 * np.pi * freqs * t + phases), axis=-1)
    theta = np.clip(amplitude * theta, lim[..., 0], lim[..., 1])
    gamma = np.sum(d_amp * np.sin(2 * np.pi * d_freq * times[:, None, None] + d_phase), axis=-1)
    gamma[:, 2] = 0.0
    return theta, amplitude * gamma


def sample_motion(body: SurrogateBody, duration_s: float, rate_hz: float = 30.0,
                  rng_seed=0, amplitude: float = 1.0, n_waves: int = 3,
                  beta: Optional[np.ndarray] = None, limits: Optional[dict] = None) -> list:
    """Smooth joint trajectories: a few random low-frequency sinusoids per
    joint axis, clamped to the joint limit boxes."""
    if not duration_s > 0 or not rate_hz > 0:
        raise ValueError("duration and rate must be positive")
    rng = np.random.default_rng(rng_seed)
    lim = limits_array(body, limits)
    params = _motion_params(rng, lim, n_waves)
    n = int(round(duration_s * rate_hz))
    times = np.arange(n) / rate_hz
    theta, gamma = _eval_motion(params, times, lim, amplitude)
    beta = np.zeros(N_SHAPE) if beta is None else beta
    return [Pose(theta[i], gamma[i], beta) for i in range(n)]


def sample_pose(body: SurrogateBody, rng: np.random.Generator, amplitude: float = 1.0,
                beta: Optional[np.ndarray] = None, limits: Optional[dict] = None,
                n_waves: int = 3) -> Pose:
    """A single pose drawn from the same prior as :func:`sample_motion`."""
    lim = limits_array(body, limits)
    params = _motion_params(rng, lim, n_waves)
    t = np.array([rng.uniform(0.0, 20.0)])
    theta, gamma = _eval_motion(params, t, lim, amplitude)
    beta = np.zeros(N_SHAPE) if beta is None else beta
    return Pose(theta[0], gamma[0], beta)


def sample_shape(rng_seed, sigma=1.0) -> np.ndarray:
    """beta ~ N(0, diag(sigma^2)) clamped to +-3 sigma."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (N_SHAPE,))
    beta = rng.standard_normal(N_SHAPE) * sigma
    return np.clip(beta, -3 * sigma, 3 * sigma)


# --- marker layouts ------------------------------------------------------

# name -> (start joint, end joint or None for a leaf extension, t along bone, outward direction)
MARKER_CATALOG = {
    "C7": ("spine3", "neck", 1.0, (0, -1, 0.3)),
    "CLAV": ("spine3", "neck", 0.6, (0, 1, 0)),
    "STRN": ("spine2", "spine3", 0.4, (0, 1, 0)),
    "T10": ("spine1", "spine2", 0.5, (0, -1, 0)),
    "LFHD": ("head", None, 0.6, (0.6, 1, 0)),
    "RFHD": ("head", None, 0.6, (-0.6, 1, 0)),
    "LSHO": ("left_collar", "left_shoulder", 1.0, (0, 0, 1)),
    "RSHO": ("right_collar", "right_shoulder", 1.0, (0, 0, 1)),
    "LELB": ("left_shoulder", "left_elbow", 1.0, (0.3, -1, 0)),
    "RELB": ("right_shoulder", "right_elbow", 1.0, (-0.3, -1, 0)),
    "LWRA": ("left_elbow", "left_wrist", 1.0, (0, 1, 0)),
    "RWRA": ("right_elbow", "right_wrist", 1.0, (0, 1, 0)),
    "LASI": ("pelvis", "left_hip", 0.9, (0.3, 1, 0)),
    "RASI": ("pelvis", "right_hip", 0.9, (-0.3, 1, 0)),
    "LKNE": ("left_hip", "left_knee", 1.0, (1, 0, 0)),
    "RKNE": ("right_hip", "right_knee", 1.0, (-1, 0, 0)),
    "LANK": ("left_knee", "left_ankle", 1.0, (1, 0, 0)),
    "RANK": ("right_knee", "right_ankle", 1.0, (-1, 0, 0)),
    "LTOE": ("left_foot", None, 0.7, (0, 0, 1)),
    "RTOE": ("right_foot", None, 0.7, (0, 0, 1)),
}

DESK12 = ("C7", "STRN", "LSHO", "RSHO", "LELB", "RELB", "LWRA", "RWRA",
          "LKNE", "RKNE", "LANK", "RANK")
SUPERSET20 = tuple(MARKER_CATALOG)
LAYOUTS = {"desk12": DESK12, "superset20": SUPERSET20}


def find_vertex(body: SurrogateBody, start: str, end: Optional[str], t: float, direction) -> int:
    j0 = body.joint_index(start)
    j1 = body.joint_index(end) if end is not None else -1
    segs = np.where((body.seg_start == j0) & (body.seg_end_joint == j1))[0]
    if len(segs) != 1:
        raise KeyError(f"no capsule from {start} to {end}")
    cand = np.where(body.vert_seg == segs[0])[0]
    radial = body.vert_radial[cand]
    rnorm = radial / np.linalg.norm(radial, axis=1, keepdims=True)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    score = rnorm @ d - 4.0 * np.abs(body.vert_t[cand] - t)
    return int(cand[np.argmax(score)])


def make_layout(body: SurrogateBody, names=DESK12, offset: float = DEFAULT_MARKER_OFFSET) -> MarkerLayout:
    if isinstance(names, str):
        names = LAYOUTS[names]
    vids = [find_vertex(body, *MARKER_CATALOG[n]) for n in names]
    return MarkerLayout(LabelSet(tuple(names)), np.array(vids), np.full(len(names), offset))


# --- JSON persistence ----------------------------------------------------

def body_to_json(body: SurrogateBody) -> dict:
    return {
        "format": BODY_FORMAT,
        "joint_names": list(body.joint_names),
        "parents": body.parents.tolist(),
        "rest_joints": body.rest_joints.tolist(),
        "segments": {
            "start_joint": body.seg_start.tolist(),
            "end_point": body.seg_end.tolist(),
            "end_joint": body.seg_end_joint.tolist(),
            "shape_length": body.shape_length.astype(int).tolist(),
            "shape_radius": body.shape_radius.astype(int).tolist(),
        },
        "template_vertices": body.template().tolist(),
        "vertex_segment": body.vert_seg.tolist(),
        "vertex_t": body.vert_t.tolist(),
        "vertex_radial": body.vert_radial.tolist(),
        "weights": {"joints": body.weight_joints.tolist(), "values": body.weight_values.tolist()},
        "faces": body.faces.tolist(),
    }


def body_from_json(data: dict) -> SurrogateBody:
    if data.get("format") != BODY_FORMAT:
        raise ValueError(f"unsupported body format {data.get('format')!r}")
    seg = data["segments"]
    body = SurrogateBody(
        joint_names=tuple(data["joint_names"]),
        parents=np.array(data["parents"]),
        rest_joints=np.array(data["rest_joints"], dtype=np.float64),
        seg_start=np.array(seg["start_joint"]),
        seg_end=np.array(seg["end_point"], dtype=np.float64),
        seg_end_joint=np.array(seg["end_joint"]),
        shape_length=np.array(seg["shape_length"], dtype=np.float64),
        shape_radius=np.array(seg["shape_radius"], dtype=np.float64),
        vert_seg=np.array(data["vertex_segment"]),
        vert_t=np.array(data["vertex_t"], dtype=np.float64),
        vert_radial=np.array(data["vertex_radial"], dtype=np.float64),
        weight_joints=np.array(data["weights"]["joints"]),
        weight_values=np.array(data["weights"]["values"], dtype=np.float64),
        faces=np.array(data["faces"]),
    )
    validate_body(body)
    return body


def validate_body(body: SurrogateBody) -> None:
    parents = body.parents
    if parents[0] != -1 or np.any(parents[1:] < 0) or np.any(parents[1:] >= np.arange(1, len(parents))):
        raise ValueError("kinematic tree must be rooted at joint 0 with parents preceding children")
    w = body.weight_values
    if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0) or np.any(w.max(axis=1) <= 0):
        raise ValueError("skinning weights must be non-negative and sum to one")
    if body.faces.max() >= body.n_vertices:
        raise ValueError("face index out of range")


def layout_to_json(layout: MarkerLayout) -> dict:
    return {
        "format": LAYOUT_FORMAT,
        "labels": list(layout.label_set.names),
        "vertex_ids": layout.vertex_ids.tolist(),
        "offsets": layout.offsets.tolist(),
    }


def layout_from_json(data: dict, body: Optional[SurrogateBody] = None) -> MarkerLayout:
    if data.get("format") != LAYOUT_FORMAT:
        raise ValueError(f"unsupported layout format {data.get('format')!r}")
    layout = MarkerLayout(LabelSet(tuple(data["labels"])), np.array(data["vertex_ids"]),
                          np.array(data["offsets"], dtype=np.float64))
    if body is not None and np.any(layout.vertex_ids >= body.n_vertices):
        raise ValueError("layout vertex ids out of range for this body")
    return layout


def load_body(path=None) -> SurrogateBody:
    if path is None:
        return build_body()
    return body_from_json(json.loads(Path(path).read_text()))


def load_layout(spec, body: SurrogateBody) -> MarkerLayout:
    """``spec`` is a preset name, a list of catalog marker names, or a path to layout.json."""
    if isinstance(spec, (list, tuple)):
        return make_layout(body, tuple(spec))
    if spec in LAYOUTS:
        return make_layout(body, LAYOUTS[spec])
    return layout_from_json(json.loads(Path(spec).read_text()), body)
