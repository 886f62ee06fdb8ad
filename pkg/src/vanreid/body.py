"""Procedural articulated human body: template, blendshapes, skinning.

A 24-joint skeleton drives a capsule-assembled humanoid of a few hundred to a
few thousand vertices. Shape is a 10-coefficient linear basis of global
deformations; posing is linear blend skinning over axis-angle joint rotations.

Conventions: meters; y points down (head at negative y), the body faces -z,
the pelvis (joint 0) sits at the origin. Left body side is +x.

VANMESH 1 grammar (plain text, one record per line, '#' comments ignored):

    VANMESH 1
    counts K F J S            vertex, face, joint, shape-basis counts
    v X Y Z                   K lines, template vertex positions
    t U V                     K lines, texture coordinates in [0,1]^2
    f A B C                   F lines, zero-based vertex indices
    w J0 W0 [J1 W1 ...]       K lines, up to 4 joint/weight pairs per vertex
    j PARENT X Y Z            J lines, parent index (-1 for the root)
    b S K DX DY DZ            S*K lines, vertex shape-basis offsets
    q S J DX DY DZ            S*J lines, joint shape-basis offsets

Floats are written with round-trip precision, so save/load is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "NUM_JOINTS",
    "NUM_SHAPE_COEFFS",
    "JOINT_NAMES",
    "JOINT_PARENTS",
    "CANONICAL_POSE",
    "UV_REGIONS",
    "BodyTemplate",
    "Mesh",
    "build_template",
    "skin",
    "canonicalize_pose",
    "wrap_pose",
    "rodrigues",
    "save_template",
    "load_template",
]

NUM_JOINTS = 24
NUM_SHAPE_COEFFS = 10

JOINT_NAMES = (
    "pelvis", "hip_l", "hip_r", "spine1", "knee_l", "knee_r", "spine2",
    "ankle_l", "ankle_r", "spine3", "foot_l", "foot_r", "neck", "collar_l",
    "collar_r", "head", "shoulder_l", "shoulder_r", "elbow_l", "elbow_r",
    "wrist_l", "wrist_r", "hand_l", "hand_r",
)

JOINT_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

_REST_JOINTS = np.array([
    [0.00, 0.00, 0.00],    # pelvis
    [+0.09, 0.06, 0.00],   # hip_l
    [-0.09, 0.06, 0.00],   # hip_r
    [0.00, -0.11, 0.00],   # spine1
    [+0.10, 0.50, 0.00],   # knee_l
    [-0.10, 0.50, 0.00],   # knee_r
    [0.00, -0.22, 0.00],   # spine2
    [+0.10, 0.88, 0.00],   # ankle_l
    [-0.10, 0.88, 0.00],   # ankle_r
    [0.00, -0.32, 0.00],   # spine3
    [+0.10, 0.95, -0.13],  # foot_l
    [-0.10, 0.95, -0.13],  # foot_r
    [0.00, -0.48, 0.00],   # neck
    [+0.07, -0.42, 0.00],  # collar_l
    [-0.07, -0.42, 0.00],  # collar_r
    [0.00, -0.58, 0.00],   # head
    [+0.19, -0.42, 0.00],  # shoulder_l
    [-0.19, -0.42, 0.00],  # shoulder_r
    [+0.21, -0.16, 0.00],  # elbow_l
    [-0.21, -0.16, 0.00],  # elbow_r
    [+0.22, 0.08, 0.00],   # wrist_l
    [-0.22, 0.08, 0.00],   # wrist_r
    [+0.22, 0.16, 0.00],   # hand_l
    [-0.22, 0.16, 0.00],   # hand_r
])

# Virtual bone endpoints for joints whose rotation drags a body extremity.
_BONE_TIPS = {
    15: np.array([0.0, -0.74, 0.0]),    # head -> crown
    10: np.array([+0.10, 0.97, -0.20]),  # foot_l -> toes
    11: np.array([-0.10, 0.97, -0.20]),
    22: np.array([+0.22, 0.21, 0.0]),   # hand_l -> fingertips
    23: np.array([-0.22, 0.21, 0.0]),
}

_MIRROR_JOINT = np.array([0, 2, 1, 3, 5, 4, 6, 8, 7, 9, 11, 10, 12, 14, 13, 15, 17, 16, 19, 18, 21, 20, 23, 22])

# Texture-space rectangles (u0, u1, v0, v1) the body parts unwrap into.
UV_REGIONS = {
    "torso_front": (0.00, 0.25, 0.00, 0.50),
    "torso_back": (0.25, 0.50, 0.00, 0.50),
    "head": (0.50, 0.75, 0.00, 0.25),
    "arms": (0.75, 1.00, 0.00, 0.50),
    "legs": (0.00, 0.50, 0.50, 1.00),
}


def _canonical_pose() -> np.ndarray:
    pose = np.zeros((NUM_JOINTS, 3))
    walk = np.deg2rad(20.0)
    lift = np.deg2rad(30.0)
    pose[1] = (-walk, 0.0, 0.0)   # left leg swings forward (toward -z)
    pose[2] = (+walk, 0.0, 0.0)   # right leg swings back
    pose[16] = (0.0, 0.0, -lift)  # arms swing away from the torso
    pose[17] = (0.0, 0.0, +lift)
    return pose


CANONICAL_POSE = _canonical_pose()
CANONICAL_POSE.setflags(write=False)


@dataclass(frozen=True)
class BodyTemplate:
    vertices: np.ndarray      # (K, 3)
    faces: np.ndarray         # (F, 3) int
    uv: np.ndarray            # (K, 2)
    joint_tree: np.ndarray    # (J,) parent indices, -1 at the root
    rest_joints: np.ndarray   # (J, 3)
    skin_weights: np.ndarray  # (K, J)
    shape_basis: np.ndarray   # (S, K, 3)
    joint_basis: np.ndarray   # (S, J, 3)
    canonical_bounds: np.ndarray  # (3,) per-axis |coord| bound over clamped shapes

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray


# ------------------------------------------------------------- mesh assembly


class _Builder:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.uvs: list[tuple[float, float]] = []
        self.faces: list[tuple[int, int, int]] = []

    def add(self, pos, uv) -> int:
        self.verts.append(np.asarray(pos, dtype=np.float64))
        self.uvs.append((float(uv[0]), float(uv[1])))
        return len(self.verts) - 1

    def bridge(self, ring_a: list[int], ring_b: list[int]) -> None:
        n = len(ring_a)
        for j in range(n):
            a, b = ring_a[j], ring_a[(j + 1) % n]
            c, d = ring_b[(j + 1) % n], ring_b[j]
            self.faces.append((a, b, c))
            self.faces.append((a, c, d))

    def fan(self, ring: list[int], pole: int) -> None:
        n = len(ring)
        for j in range(n):
            self.faces.append((ring[j], ring[(j + 1) % n], pole))


def _sym_circle(nseg: int) -> tuple[np.ndarray, np.ndarray]:
    # Unit circle with exact x-mirror pairs: build the x>=0 arc, reflect the
    # interior points, so (x, z) and (-x, z) are bitwise negations.
    half = nseg // 2
    phi = -np.pi / 2 + np.pi * np.arange(half + 1) / half
    x = np.cos(phi)
    z = np.sin(phi)
    xs = np.concatenate([x, -x[1:half][::-1]])
    zs = np.concatenate([z, z[1:half][::-1]])
    return xs, zs


def _ring_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = axis / np.linalg.norm(axis)
    up = np.array([0.0, 1.0, 0.0])
    c = np.cross(a, up)
    if np.linalg.norm(c) < 1e-9:
        u = np.array([1.0, 0.0, 0.0])
    else:
        u = c / np.linalg.norm(c)
    v = np.cross(a, u)
    return u, v


def _capsule(bld: _Builder, p0, p1, r0: float, r1: float, nrings: int, nseg: int,
             depth_scale: float, uv_rect: tuple[float, float, float, float],
             v_range: tuple[float, float], cap0: bool, cap1: bool,
             split_front_back: bool = False) -> None:
    """Rings from p0 to p1 with linearly blended radius, optional end caps.

    For midline parts the ring frame is the exact (x, z) plane so mirror
    symmetry holds bitwise; limbs are mirrored wholesale by the caller.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    if abs(axis[0]) < 1e-12 and abs(axis[2]) < 1e-12:
        u = np.array([1.0, 0.0, 0.0])
        v = np.array([0.0, 0.0, 1.0 if axis[1] > 0 else -1.0])
    else:
        u, v = _ring_frame(axis)
    xs, zs = _sym_circle(nseg)
    u0r, u1r, v0r, v1r = uv_rect
    va, vb = v_range

    def ring_uv(j: int, t: float, pos: np.ndarray) -> tuple[float, float]:
        vv = v0r + (v1r - v0r) * (va + (vb - va) * t)
        if split_front_back:
            # Front half of the torso rectangle pair, back half otherwise;
            # the body faces -z, so front vertices sit at negative z.
            front = pos[2] <= 1e-12
            lo, hi = (u0r, u1r) if front else (u1r, u1r + (u1r - u0r))
            uu = lo + (hi - lo) * (0.5 + 0.48 * xs[j] * (1 if front else -1)) * 0.98
        else:
            uu = u0r + (u1r - u0r) * (0.5 + 0.48 * xs[j])
        return uu, vv

    def ring_vertex(j: int, t: float, center: np.ndarray, r: float) -> int:
        pos = center + r * xs[j] * u + r * depth_scale * zs[j] * v
        return bld.add(pos, ring_uv(j, t, pos))

    rings: list[list[int]] = []
    for i in range(nrings):
        t = i / (nrings - 1) if nrings > 1 else 0.0
        center = p0 + t * axis
        r = r0 + (r1 - r0) * t
        rings.append([ring_vertex(j, t, center, r) for j in range(nseg)])
    for a, b in zip(rings, rings[1:]):
        bld.bridge(a, b)

    ah = axis / np.linalg.norm(axis)
    if cap0:
        mid = [ring_vertex(j, 0.0, p0 - 0.6 * r0 * ah, 0.55 * r0) for j in range(nseg)]
        tip = p0 - r0 * 0.95 * ah
        pole = bld.add(tip, ring_uv(0, 0.0, tip))
        bld.bridge(mid, rings[0])
        bld.fan(mid[::-1], pole)
    if cap1:
        mid = [ring_vertex(j, 1.0, p1 + 0.6 * r1 * ah, 0.55 * r1) for j in range(nseg)]
        tip = p1 + r1 * 0.95 * ah
        pole = bld.add(tip, ring_uv(0, 1.0, tip))
        bld.bridge(rings[-1], mid)
        bld.fan(mid, pole)


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def _skin_weights(verts: np.ndarray, joints: np.ndarray) -> np.ndarray:
    # One bone per joint: joint -> first child, or a virtual tip for leaves.
    children: dict[int, int] = {}
    for j, p in enumerate(JOINT_PARENTS):
        if p >= 0 and p not in children:
            children[p] = j
    sigma = 0.05
    dists = np.empty((verts.shape[0], NUM_JOINTS))
    for j in range(NUM_JOINTS):
        if j in children:
            tip = joints[children[j]]
        else:
            tip = _BONE_TIPS[j]
        dists[:, j] = _point_segment_distance(verts, joints[j], tip)
    weights = np.zeros_like(dists)
    nearest4 = np.argpartition(dists, 3, axis=1)[:, :4]
    rows = np.arange(verts.shape[0])[:, None]
    d4 = dists[rows, nearest4]
    dmin = d4.min(axis=1, keepdims=True)
    w4 = np.exp(-(((d4 - dmin) / sigma) ** 2))
    w4 /= w4.sum(axis=1, keepdims=True)
    weights[rows, nearest4] = w4
    return weights


def _shape_fields(points: np.ndarray) -> np.ndarray:
    """Evaluate the 10 deformation fields at given points: (10, N, 3)."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    zero = np.zeros_like(x)
    out = np.empty((NUM_SHAPE_COEFFS, points.shape[0], 3))

    def bump(value, center, width):
        return np.exp(-(((value - center) / width) ** 2))

    out[0] = np.stack([zero, y * 0.05, zero], axis=1)                    # height
    out[1] = np.stack([x * 0.05, zero, z * 0.10], axis=1)                # girth
    out[2] = np.stack([zero, np.maximum(0.0, y - 0.06) * 0.07, zero], axis=1)  # leg length
    out[3] = np.stack([x * 0.06 * bump(y, -0.42, 0.15), zero, zero], axis=1)   # shoulder width
    out[4] = np.stack([zero, -0.05 * np.clip((0.06 - y) / 0.52, 0.0, 1.0), zero], axis=1)  # torso length
    head = np.stack([x, y + 0.64, z], axis=1)
    g = 0.08 * np.exp(-((np.linalg.norm(head, axis=1) / 0.12) ** 2))
    out[5] = head * g[:, None]                                           # head size
    arm = bump(np.abs(x), 0.21, 0.10)
    out[6] = np.stack([x * 0.04 * arm, zero, z * 0.04 * arm], axis=1)    # arm thickness
    leg = bump(y, 0.50, 0.35)
    out[7] = np.stack([x * 0.035 * leg, zero, z * 0.06 * leg], axis=1)   # leg thickness
    belly = bump(y, -0.07, 0.15) * np.clip(-z, 0.0, 0.13) / 0.13
    out[8] = np.stack([zero, zero, -0.05 * belly], axis=1)               # belly
    out[9] = np.stack([x * 0.06 * bump(y, 0.06, 0.12), zero, zero], axis=1)    # hip width
    return out


def build_template(seed: int = 0, resolution: int = 1) -> BodyTemplate:
    """Assemble the humanoid. Geometry depends on resolution only; the seed
    is part of the call signature for interface stability and is not used
    to perturb the body."""
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    r = int(resolution)
    bld = _Builder()
    J = _REST_JOINTS

    # Midline: torso (front/back split in uv), neck, head.
    _capsule(bld, (0, 0.10, 0), (0, -0.46, 0), 0.125, 0.135, 5 * r + 2, 6 * r + 6,
             0.62, UV_REGIONS["torso_front"], (1.0, 0.0), cap0=True, cap1=True,
             split_front_back=True)
    _capsule(bld, (0, -0.66, 0), (0, -0.52, 0), 0.085, 0.05, 3 * r + 1, 4 * r + 6,
             0.92, UV_REGIONS["head"], (0.15, 0.98), cap0=True, cap1=False)

    # Left limbs; the whole block is mirrored afterwards.
    left_start = len(bld.verts)
    midline_faces = len(bld.faces)
    arms = UV_REGIONS["arms"]
    _capsule(bld, J[16], J[18], 0.050, 0.040, 2 * r + 1, 4 * r + 4, 1.0, arms, (0.02, 0.40), True, False)
    _capsule(bld, J[18], J[20], 0.038, 0.030, 2 * r + 1, 4 * r + 4, 1.0, arms, (0.42, 0.75), False, False)
    _capsule(bld, J[20], _BONE_TIPS[22], 0.032, 0.028, r + 1, 4 * r + 4, 0.8, arms, (0.77, 0.98), False, True)
    legs = UV_REGIONS["legs"]
    _capsule(bld, J[1], J[4], 0.075, 0.055, 3 * r + 1, 4 * r + 4, 1.0, legs, (0.02, 0.40), True, False)
    _capsule(bld, J[4], J[7], 0.052, 0.038, 3 * r + 1, 4 * r + 4, 1.0, legs, (0.42, 0.78), False, False)
    _capsule(bld, J[7], _BONE_TIPS[10], 0.040, 0.034, r + 1, 4 * r + 4, 0.9, legs, (0.80, 0.98), False, True)
    left_end = len(bld.verts)

    verts = np.array(bld.verts)
    uvs = np.array(bld.uvs)
    faces = np.array(bld.faces, dtype=np.int64)

    # Mirror the limb block exactly: x -> -x, faces reuse the same uv panel.
    lv = verts[left_start:left_end]
    rv = lv * np.array([-1.0, 1.0, 1.0])
    rf = faces[midline_faces:] + (left_end - left_start)
    rf = rf[:, [0, 2, 1]]
    verts = np.concatenate([verts, rv])
    uvs = np.concatenate([uvs, uvs[left_start:left_end]])
    faces = np.concatenate([faces, rf])

    weights = _skin_weights(verts, J)
    basis = _shape_fields(verts)
    joint_basis = _shape_fields(J)

    # Conservative per-axis extents: canonical-posed rest body plus the worst
    # clamped shape offset, used to pick focal lengths that keep the body in
    # frame for any valid shape.
    slack = 3.0 * np.abs(basis).sum(axis=0).max(axis=0)
    template_tmp = BodyTemplate(verts, faces, uvs, np.array(JOINT_PARENTS), J.copy(),
                                weights, basis, joint_basis, np.zeros(3))
    posed = skin(template_tmp, np.zeros(NUM_SHAPE_COEFFS), CANONICAL_POSE)
    bounds = np.abs(posed.vertices).max(axis=0) + slack

    uvs = np.clip(uvs, 0.0, 1.0)
    return BodyTemplate(verts, faces, uvs, np.array(JOINT_PARENTS), J.copy(),
                        weights, basis, joint_basis, bounds)


# ------------------------------------------------------------------ skinning


def rodrigues(vectors: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    v = np.asarray(vectors, dtype=np.float64)
    angles = np.linalg.norm(v, axis=-1)
    shape = v.shape[:-1]
    kx, ky, kz = v[..., 0], v[..., 1], v[..., 2]
    zeros = np.zeros_like(kx)
    skew_raw = np.stack([
        zeros, -kz, ky,
        kz, zeros, -kx,
        -ky, kx, zeros,
    ], axis=-1).reshape(shape + (3, 3))
    eye = np.broadcast_to(np.eye(3), shape + (3, 3))

    small = angles < 1e-8
    safe = np.where(small, 1.0, angles)
    khat = skew_raw / safe[..., None, None]
    sin_term = np.sin(angles)[..., None, None] * khat
    cos_term = (1.0 - np.cos(angles))[..., None, None] * (khat @ khat)
    full = eye + sin_term + cos_term
    first_order = eye + skew_raw
    return np.where(small[..., None, None], first_order, full)


def _check_shape(shape) -> np.ndarray:
    beta = np.asarray(shape, dtype=np.float64)
    if beta.shape != (NUM_SHAPE_COEFFS,):
        raise ValueError(f"shape params must be ({NUM_SHAPE_COEFFS},), got {beta.shape}")
    if not np.isfinite(beta).all():
        raise ValueError("shape params must be finite")
    if (np.abs(beta) > 3.0 + 1e-9).any():
        raise ValueError("shape params must lie in [-3, 3]")
    return beta


def _check_pose(pose) -> np.ndarray:
    theta = np.asarray(pose, dtype=np.float64)
    if theta.shape != (NUM_JOINTS, 3):
        raise ValueError(f"pose must be ({NUM_JOINTS}, 3), got {theta.shape}")
    if not np.isfinite(theta).all():
        raise ValueError("pose must be finite")
    return theta


def wrap_pose(pose) -> np.ndarray:
    """Map each rotation vector to the equivalent one with norm <= pi."""
    theta = _check_pose(pose).copy()
    norms = np.linalg.norm(theta, axis=1)
    for i in np.nonzero(norms > np.pi)[0]:
        n = norms[i]
        k = np.floor((n + np.pi) / (2.0 * np.pi))
        theta[i] *= (n - 2.0 * np.pi * k) / n
    return theta


def canonicalize_pose(pose) -> np.ndarray:
    """The fixed walking posture; input joint angles are discarded."""
    _check_pose(pose)
    return CANONICAL_POSE.copy()


def skin(template: BodyTemplate, shape, pose) -> Mesh:
    """Linear blend skinning of the shaped template under the given pose."""
    beta = _check_shape(shape)
    theta = _check_pose(pose)

    verts = template.vertices + np.einsum("s,skc->kc", beta, template.shape_basis)
    joints = template.rest_joints + np.einsum("s,sjc->jc", beta, template.joint_basis)

    locals_ = rodrigues(theta)
    eye = np.eye(3)
    world = np.empty((NUM_JOINTS, 3, 3))
    drift = np.zeros((NUM_JOINTS, 3))
    world[0] = locals_[0]
    for j in range(1, NUM_JOINTS):
        p = template.joint_tree[j]
        world[j] = world[p] @ locals_[j]
        drift[j] = drift[p] + (world[p] - eye) @ (joints[j] - joints[p])

    # Blend per-joint displacements; at rest every term is exactly zero, so
    # the rest pose reproduces the template bit for bit.
    rot_minus_i = world - eye
    rel = verts[None, :, :] - joints[:, None, :]
    moved = np.einsum("jab,jkb->jka", rot_minus_i, rel) + drift[:, None, :]
    disp = np.einsum("kj,jka->ka", template.skin_weights, moved)
    return Mesh(vertices=verts + disp, faces=template.faces, uv=template.uv)


# ----------------------------------------------------------------- interchange


def _fmt(x) -> str:
    return repr(float(x))


def save_template(path, template: BodyTemplate) -> None:
    K = template.num_vertices
    F = template.faces.shape[0]
    S = template.shape_basis.shape[0]
    lines = ["VANMESH 1", f"counts {K} {F} {NUM_JOINTS} {S}"]
    for p in template.vertices:
        lines.append(f"v {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}")
    for t in template.uv:
        lines.append(f"t {_fmt(t[0])} {_fmt(t[1])}")
    for f in template.faces:
        lines.append(f"f {f[0]} {f[1]} {f[2]}")
    for row in template.skin_weights:
        nz = np.nonzero(row)[0]
        pairs = " ".join(f"{j} {_fmt(row[j])}" for j in nz)
        lines.append(f"w {pairs}")
    for j in range(NUM_JOINTS):
        p = template.rest_joints[j]
        lines.append(f"j {template.joint_tree[j]} {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}")
    for s in range(S):
        for k in range(K):
            d = template.shape_basis[s, k]
            lines.append(f"b {s} {k} {_fmt(d[0])} {_fmt(d[1])} {_fmt(d[2])}")
    for s in range(S):
        for j in range(NUM_JOINTS):
            d = template.joint_basis[s, j]
            lines.append(f"q {s} {j} {_fmt(d[0])} {_fmt(d[1])} {_fmt(d[2])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_template(path) -> BodyTemplate:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    rows = [ln.split() for ln in text if ln.strip() and not ln.startswith("#")]
    if rows[0] != ["VANMESH", "1"]:
        raise ValueError(f"{path}: not a VANMESH 1 file")
    if rows[1][0] != "counts":
        raise ValueError(f"{path}: missing counts line")
    K, F, J, S = (int(x) for x in rows[1][1:5])
    if J != NUM_JOINTS or S != NUM_SHAPE_COEFFS:
        raise ValueError(f"{path}: expected {NUM_JOINTS} joints / {NUM_SHAPE_COEFFS} bases, got {J}/{S}")

    verts = np.zeros((K, 3))
    uv = np.zeros((K, 2))
    faces = np.zeros((F, 3), dtype=np.int64)
    weights = np.zeros((K, J))
    parents = np.zeros(J, dtype=np.int64)
    joints = np.zeros((J, 3))
    basis = np.zeros((S, K, 3))
    joint_basis = np.zeros((S, J, 3))
    counters = {"v": 0, "t": 0, "f": 0, "w": 0, "j": 0}
    for row in rows[2:]:
        tag = row[0]
        if tag == "v":
            verts[counters["v"]] = [float(x) for x in row[1:4]]
            counters["v"] += 1
        elif tag == "t":
            uv[counters["t"]] = [float(x) for x in row[1:3]]
            counters["t"] += 1
        elif tag == "f":
            idx = [int(x) for x in row[1:4]]
            if max(idx) >= K or min(idx) < 0:
                raise ValueError(f"{path}: face index out of range: {row}")
            faces[counters["f"]] = idx
            counters["f"] += 1
        elif tag == "w":
            k = counters["w"]
            pairs = row[1:]
            if len(pairs) % 2 or len(pairs) > 8:
                raise ValueError(f"{path}: bad weight line for vertex {k}")
            for jj, ww in zip(pairs[::2], pairs[1::2]):
                weights[k, int(jj)] = float(ww)
            counters["w"] += 1
        elif tag == "j":
            j = counters["j"]
            parents[j] = int(row[1])
            joints[j] = [float(x) for x in row[2:5]]
            counters["j"] += 1
        elif tag == "b":
            s, k = int(row[1]), int(row[2])
            basis[s, k] = [float(x) for x in row[3:6]]
        elif tag == "q":
            s, j = int(row[1]), int(row[2])
            joint_basis[s, j] = [float(x) for x in row[3:6]]
        else:
            raise ValueError(f"{path}: unknown record {tag!r}")
    if counters["v"] != K or counters["f"] != F or counters["w"] != K or counters["j"] != J:
        raise ValueError(f"{path}: section counts do not match the header")
    sums = weights.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-9:
        raise ValueError(f"{path}: skin weight rows must sum to 1")

    slack = 3.0 * np.abs(basis).sum(axis=0).max(axis=0)
    tmp = BodyTemplate(verts, faces, uv, parents, joints, weights, basis, joint_basis, np.zeros(3))
    posed = skin(tmp, np.zeros(NUM_SHAPE_COEFFS), CANONICAL_POSE)
    bounds = np.abs(posed.vertices).max(axis=0) + slack
    return BodyTemplate(verts, faces, uv, parents, joints, weights, basis, joint_basis, bounds)
