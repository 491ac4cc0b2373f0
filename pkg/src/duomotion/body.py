"""Parametric two-person body: kinematic tree, FK, capsule surface, camera.

The tree, shape basis, capsule radii, and prompt vocabulary ship as a
versioned fixture (``fixtures/body_model.json``).  The skeleton has 24 joints
in topological order with the pelvis as root; local pose covers the 21
non-root, non-hand joints and the two hand joints inherit their wrist frame
with identity local rotation.

Per-frame parameters are (phi, theta, beta, tau): root orientation and joint
rotations in axis-angle radians, 10 shape coefficients, and root translation
in camera-frame meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from .rotations import axis_angle_to_matrix
from .tensor import Tensor, concat, stack

NUM_JOINTS = 24
NUM_POSE_JOINTS = 21          # theta covers joints 1..21 (pelvis and hands excluded)
HAND_JOINTS = (22, 23)


class BodyModelError(ValueError):
    pass


@dataclass(frozen=True)
class KinematicTree:
    joint_names: tuple
    parents: np.ndarray          # (24,), parents[0] == -1
    template_offsets: np.ndarray  # (24, 3) meters
    shape_basis: np.ndarray      # (10, 24) per-joint scale coefficients
    bone_radii: np.ndarray       # (24,) radius of the capsule ending at joint j
    prompt_vocabulary: tuple     # the 19 annotation joint names
    segments: int = 8
    rings: int = 6

    def joint_index(self, name: str) -> int:
        return self.joint_names.index(name)


@lru_cache(maxsize=1)
def load_default_tree() -> KinematicTree:
    raw = resources.files("duomotion.fixtures").joinpath("body_model.json").read_text()
    doc = json.loads(raw)
    if doc.get("schema_version") != 1:
        raise BodyModelError("unsupported body model schema version")
    parents = np.asarray(doc["parents"], dtype=np.int64)
    if parents[0] != -1 or np.any(parents[1:] >= np.arange(1, NUM_JOINTS)):
        raise BodyModelError("parents must be topologically ordered with one root")
    return KinematicTree(
        joint_names=tuple(doc["joint_names"]),
        parents=parents,
        template_offsets=np.asarray(doc["template_offsets"], dtype=np.float64),
        shape_basis=np.asarray(doc["shape_basis"], dtype=np.float64),
        bone_radii=np.asarray(doc["bone_radii"], dtype=np.float64),
        prompt_vocabulary=tuple(doc["prompt_vocabulary"]),
        segments=int(doc["tessellation"]["segments"]),
        rings=int(doc["tessellation"]["rings"]),
    )


@dataclass
class PersonFrameParams:
    phi: np.ndarray    # (3,)
    theta: np.ndarray  # (21, 3)
    beta: np.ndarray   # (10,)
    tau: np.ndarray    # (3,)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(3)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(NUM_POSE_JOINTS, 3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(10)
        self.tau = np.asarray(self.tau, dtype=np.float64).reshape(3)
        for arr in (self.phi, self.theta, self.beta, self.tau):
            if not np.all(np.isfinite(arr)):
                raise BodyModelError("person parameters must be finite")


@dataclass
class PersonMotion:
    """Per-frame parameters for one person over L frames."""

    phi: np.ndarray    # (L, 3)
    theta: np.ndarray  # (L, 21, 3)
    beta: np.ndarray   # (L, 10)
    tau: np.ndarray    # (L, 3)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.tau = np.asarray(self.tau, dtype=np.float64)
        L = self.phi.shape[0]
        if (self.theta.shape != (L, NUM_POSE_JOINTS, 3) or self.beta.shape != (L, 10)
                or self.tau.shape != (L, 3)):
            raise BodyModelError("inconsistent per-frame parameter shapes")

    @property
    def frames(self) -> int:
        return self.phi.shape[0]

    def frame(self, i: int) -> PersonFrameParams:
        return PersonFrameParams(self.phi[i], self.theta[i], self.beta[i], self.tau[i])

    def copy(self) -> "PersonMotion":
        return PersonMotion(self.phi.copy(), self.theta.copy(),
                            self.beta.copy(), self.tau.copy())


@dataclass
class MotionSequence:
    """The unit of all I/O: two persons over a shared clip length."""

    persons: tuple

    def __post_init__(self):
        if len(self.persons) != 2:
            raise BodyModelError("a motion sequence holds exactly two persons")
        if self.persons[0].frames != self.persons[1].frames:
            raise BodyModelError("persons must share the clip length")

    @property
    def frames(self) -> int:
        return self.persons[0].frames

    def copy(self) -> "MotionSequence":
        return MotionSequence((self.persons[0].copy(), self.persons[1].copy()))


# -- shape ---------------------------------------------------------------------


def shaped_offsets(tree: KinematicTree, beta: np.ndarray) -> np.ndarray:
    """Template offsets scaled by the shape basis: off_j * (1 + beta . B[:, j]).

    beta: (..., 10) -> offsets (..., 24, 3).  Raises when any non-root bone
    collapses to non-positive length.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(np.abs(beta) > 3.0):
        raise BodyModelError("shape coefficients must satisfy |beta_i| <= 3")
    scale = 1.0 + beta @ tree.shape_basis          # (..., 24)
    if np.any(scale[..., 1:] <= 0.0):
        raise BodyModelError("shape produces a non-positive bone length")
    return tree.template_offsets * scale[..., None]


def bone_lengths(tree: KinematicTree, beta: np.ndarray) -> np.ndarray:
    off = shaped_offsets(tree, beta)
    return np.linalg.norm(off, axis=-1)


# -- forward kinematics --------------------------------------------------------


def rotmats_from_params(phi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Local rotation matrices for all 24 joints; hands are identity.

    phi: (..., 3), theta: (..., 21, 3) -> (..., 24, 3, 3)
    """
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    batch = phi.shape[:-1]
    mats = np.empty(batch + (NUM_JOINTS, 3, 3))
    mats[..., 0, :, :] = axis_angle_to_matrix(phi)
    mats[..., 1:NUM_POSE_JOINTS + 1, :, :] = axis_angle_to_matrix(theta)
    mats[..., NUM_POSE_JOINTS + 1:, :, :] = np.eye(3)
    return mats


def fk(tree: KinematicTree, rotmats: np.ndarray, offsets: np.ndarray,
       tau: np.ndarray) -> np.ndarray:
    """Compose transforms down the tree.

    rotmats: (..., 24, 3, 3) local rotations, offsets: (..., 24, 3),
    tau: (..., 3) -> joints (..., 24, 3) in camera frame.
    """
    batch = rotmats.shape[:-3]
    R_glob = np.empty(batch + (NUM_JOINTS, 3, 3))
    joints = np.empty(batch + (NUM_JOINTS, 3))
    R_glob[..., 0, :, :] = rotmats[..., 0, :, :]
    joints[..., 0, :] = tau
    for j in range(1, NUM_JOINTS):
        p = tree.parents[j]
        R_glob[..., j, :, :] = R_glob[..., p, :, :] @ rotmats[..., j, :, :]
        joints[..., j, :] = joints[..., p, :] + np.einsum(
            "...ij,...j->...i", R_glob[..., p, :, :], offsets[..., j, :])
    return joints


def forward_kinematics(tree: KinematicTree, params: PersonFrameParams) -> np.ndarray:
    """Joint positions (24, 3) for a single frame of one person."""
    offsets = shaped_offsets(tree, params.beta)
    rotmats = rotmats_from_params(params.phi, params.theta)
    return fk(tree, rotmats, offsets, params.tau)


def motion_joints(tree: KinematicTree, motion: PersonMotion) -> np.ndarray:
    """Joint positions (L, 24, 3) for all frames of one person."""
    offsets = shaped_offsets(tree, motion.beta)
    rotmats = rotmats_from_params(motion.phi, motion.theta)
    return fk(tree, rotmats, offsets, motion.tau)


def fk_t(tree: KinematicTree, rotmats: Tensor, offsets: Tensor, tau: Tensor) -> Tensor:
    """Differentiable FK. rotmats: (B, 24, 3, 3), offsets: (B, 24, 3),
    tau: (B, 3) -> joints (B, 24, 3)."""
    R_glob = [None] * NUM_JOINTS
    pos = [None] * NUM_JOINTS
    R_glob[0] = rotmats[:, 0]
    pos[0] = tau
    for j in range(1, NUM_JOINTS):
        p = int(tree.parents[j])
        R_glob[j] = R_glob[p] @ rotmats[:, j]
        step = (R_glob[p] @ offsets[:, j].reshape(-1, 3, 1)).reshape(-1, 3)
        pos[j] = pos[p] + step
    return stack(pos, axis=1)


def shaped_offsets_t(tree: KinematicTree, beta: Tensor) -> Tensor:
    """Differentiable shaped offsets. beta: (B, 10) -> (B, 24, 3)."""
    scale = beta @ Tensor(tree.shape_basis) + 1.0        # (B, 24)
    return Tensor(tree.template_offsets) * scale.reshape(-1, NUM_JOINTS, 1)


# -- capsule surface --------------------------------------------------------------


@dataclass
class SurfaceMesh:
    vertices: np.ndarray    # (V, 3) meters
    triangles: np.ndarray   # (F, 3) vertex indices
    normals: np.ndarray     # (V, 3) unit per-vertex normals


@lru_cache(maxsize=8)
def _capsule_coeffs(segments: int, rings: int):
    """Pose-independent vertex/triangle tables for one capsule.

    Vertex k is reconstructed as
        start + at_end_k * length * u + radius * (cu_k u + cv_k v + cw_k w)
    for the bone frame (u, v, w).  Returns (at_end, cu, cv, cw, triangles).
    """
    if rings % 2 != 0 or rings < 2 or segments < 3:
        raise BodyModelError("capsule tessellation needs even rings >= 2, segments >= 3")
    half = rings // 2
    at_end, cu, cv, cw = [0.0], [-1.0], [0.0], [0.0]      # bottom pole
    ring_rows = []
    for i in range(1, half + 1):                          # bottom cap toward equator
        phi = (np.pi / 2.0) * i / half
        ring_rows.append((0.0, -np.cos(phi), np.sin(phi)))
    for i in range(half, 0, -1):                          # equator toward top pole
        phi = (np.pi / 2.0) * i / half
        ring_rows.append((1.0, np.cos(phi), np.sin(phi)))
    for end_flag, axial, radial in ring_rows:
        for s in range(segments):
            th = 2.0 * np.pi * s / segments
            at_end.append(end_flag)
            cu.append(axial)
            cv.append(radial * np.cos(th))
            cw.append(radial * np.sin(th))
    at_end.append(1.0)                                    # top pole
    cu.append(1.0)
    cv.append(0.0)
    cw.append(0.0)

    tris = []
    top_pole = len(at_end) - 1

    def ring_vert(i, s):
        return 1 + i * segments + s % segments

    for s in range(segments):                             # bottom fan
        tris.append((0, ring_vert(0, s + 1), ring_vert(0, s)))
    for i in range(rings - 1):                            # bands
        for s in range(segments):
            a, b = ring_vert(i, s), ring_vert(i, s + 1)
            c, d = ring_vert(i + 1, s), ring_vert(i + 1, s + 1)
            tris.append((a, b, d))
            tris.append((a, d, c))
    for s in range(segments):                             # top fan
        tris.append((top_pole, ring_vert(rings - 1, s), ring_vert(rings - 1, s + 1)))

    return (np.array(at_end), np.array(cu), np.array(cv), np.array(cw),
            np.array(tris, dtype=np.int64))


def _bone_frames(directions: np.ndarray):
    """Deterministic orthonormal frame (u, v, w) per unit direction u."""
    u = directions
    ref = np.where(np.abs(u[..., 1:2]) < 0.9,
                   np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    v = np.cross(ref, u)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    w = np.cross(u, v)
    return u, v, w


def capsule_mesh(tree: KinematicTree, joints: np.ndarray,
                 radii: np.ndarray | None = None, segments: int | None = None,
                 rings: int | None = None) -> SurfaceMesh:
    """One capsule per bone, triangulated deterministically.

    Vertex order is (bone 1..23) x (capsule-local order), so V and F are
    constants of the tessellation config and vertices move rigidly with
    their bone.
    """
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape != (NUM_JOINTS, 3):
        raise BodyModelError("joints must have shape (24, 3)")
    radii = tree.bone_radii if radii is None else np.asarray(radii, dtype=np.float64)
    segments = tree.segments if segments is None else segments
    rings = tree.rings if rings is None else rings
    at_end, cu, cv, cw, tris = _capsule_coeffs(segments, rings)

    starts = joints[tree.parents[1:]]                 # (23, 3)
    ends = joints[1:]                                 # (23, 3)
    d = ends - starts
    lengths = np.linalg.norm(d, axis=-1)
    if np.any(lengths < 1e-9):
        raise BodyModelError("zero-length bone")
    u, v, w = _bone_frames(d / lengths[:, None])
    r = radii[1:][:, None, None]

    verts = (starts[:, None, :]
             + (at_end[None, :, None] * lengths[:, None, None]) * u[:, None, :]
             + r * (cu[None, :, None] * u[:, None, :]
                    + cv[None, :, None] * v[:, None, :]
                    + cw[None, :, None] * w[:, None, :]))
    normals = (cu[None, :, None] * u[:, None, :]
               + cv[None, :, None] * v[:, None, :]
               + cw[None, :, None] * w[:, None, :])

    nv = at_end.size
    all_tris = np.concatenate([tris + b * nv for b in range(23)], axis=0)
    return SurfaceMesh(vertices=verts.reshape(-1, 3),
                       triangles=all_tris,
                       normals=normals.reshape(-1, 3))


def capsule_vertices_t(tree: KinematicTree, joints: Tensor,
                       radii: np.ndarray | None = None, segments: int | None = None,
                       rings: int | None = None) -> Tensor:
    """Differentiable capsule surface vertices. joints: (B, 24, 3) -> (B, V, 3).

    Matches ``capsule_mesh`` vertex order exactly; the frame branch is chosen
    from detached values, so gradients follow the selected formula.
    """
    radii = tree.bone_radii if radii is None else np.asarray(radii, dtype=np.float64)
    segments = tree.segments if segments is None else segments
    rings = tree.rings if rings is None else rings
    at_end, cu, cv, cw, _ = _capsule_coeffs(segments, rings)

    per_bone = []
    for j in range(1, NUM_JOINTS):
        p = int(tree.parents[j])
        start = joints[:, p]                       # (B, 3)
        d = joints[:, j] - start
        length = (d * d).sum(axis=-1, keepdims=True).sqrt()
        u = d / length
        ref = np.where(np.abs(u.data[:, 1:2]) < 0.9,
                       np.array([[0.0, 1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
        v = _tensor_cross(Tensor(ref), u)
        v = v / (v * v).sum(axis=-1, keepdims=True).sqrt()
        w = _tensor_cross(u, v)
        rad = radii[j]
        axial = u.reshape(-1, 1, 3) * (length.reshape(-1, 1, 1) * at_end[None, :, None])
        radial = (u.reshape(-1, 1, 3) * (rad * cu)[None, :, None]
                  + v.reshape(-1, 1, 3) * (rad * cv)[None, :, None]
                  + w.reshape(-1, 1, 3) * (rad * cw)[None, :, None])
        per_bone.append(start.reshape(-1, 1, 3) + axial + radial)
    return concat(per_bone, axis=1)


def _tensor_cross(a: Tensor, b: Tensor) -> Tensor:
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def capsule_segments(tree: KinematicTree, joints: np.ndarray):
    """(starts, ends, radii) arrays of the 23 bone capsules for SDF queries."""
    joints = np.asarray(joints, dtype=np.float64)
    return joints[tree.parents[1:]], joints[1:], tree.bone_radii[1:]


# -- camera --------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    focal: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0

    def __post_init__(self):
        if self.focal <= 0:
            raise BodyModelError("focal length must be positive")


def project(cam: Camera, points: np.ndarray) -> np.ndarray:
    """Pinhole projection, (..., 3) meters -> (..., 2) pixels. Z must exceed 0.1 m."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    if np.any(z <= 0.1):
        raise BodyModelError("point at or behind the near plane (Z <= 0.1 m)")
    u = cam.focal * points[..., 0] / z + cam.cx
    v = cam.focal * points[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def project_t(cam: Camera, points: Tensor) -> Tensor:
    """Differentiable projection for (..., 3) Tensors."""
    z = points[..., 2]
    u = points[..., 0] / z * cam.focal + cam.cx
    v = points[..., 1] / z * cam.focal + cam.cy
    return stack([u, v], axis=-1)
