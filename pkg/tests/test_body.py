"""Kinematic tree, FK, shaped offsets, capsule surface, and projection."""

import numpy as np
import pytest

from duomotion.body import (BodyModelError, Camera, PersonFrameParams,
                            bone_lengths, capsule_mesh, capsule_segments,
                            capsule_vertices_t, fk, fk_t, forward_kinematics,
                            load_default_tree, project, rotmats_from_params,
                            shaped_offsets, shaped_offsets_t)
from duomotion.rotations import axis_angle_to_matrix, matrix_to_axis_angle
from duomotion.tensor import Tensor

TREE = load_default_tree()


def _identity_params(beta=None, tau=None):
    return PersonFrameParams(
        phi=np.zeros(3),
        theta=np.zeros((21, 3)),
        beta=np.zeros(10) if beta is None else beta,
        tau=np.zeros(3) if tau is None else tau,
    )


def _template_positions():
    pos = np.zeros((24, 3))
    for j in range(1, 24):
        pos[j] = pos[TREE.parents[j]] + TREE.template_offsets[j]
    return pos


def test_tree_fixture_sanity():
    assert len(TREE.joint_names) == 24
    assert TREE.parents[0] == -1
    assert np.all(TREE.parents[1:] < np.arange(1, 24))
    assert set(TREE.prompt_vocabulary) <= set(TREE.joint_names)
    assert len(TREE.prompt_vocabulary) == 19


def test_identity_pose_gives_template_positions():
    joints = forward_kinematics(TREE, _identity_params())
    assert np.allclose(joints, _template_positions(), atol=1e-12)


def test_root_rotation_spins_joints_about_pelvis():
    rng = np.random.default_rng(1)
    theta = 0.2 * rng.normal(size=(21, 3))
    tau = np.array([0.3, -0.1, 2.5])
    base = forward_kinematics(TREE, PersonFrameParams(np.zeros(3), theta, np.zeros(10), tau))
    phi = np.array([0.4, -0.7, 0.2])
    R = axis_angle_to_matrix(phi)
    rotated = forward_kinematics(TREE, PersonFrameParams(phi, theta, np.zeros(10), tau))
    pelvis = base[0]
    expected = (base - pelvis) @ R.T + pelvis
    assert np.allclose(rotated, expected, atol=1e-12)


def test_elbow_rotation_affects_only_descendants():
    # Oracle: compose the two affected transforms by hand.
    rng = np.random.default_rng(2)
    theta = np.zeros((21, 3))
    base = forward_kinematics(TREE, _identity_params())

    elbow = TREE.joint_index("left_elbow")      # joint 18, theta row 17
    aa = rng.normal(size=3) * 0.6
    theta[elbow - 1] = aa
    posed = forward_kinematics(TREE, PersonFrameParams(np.zeros(3), theta, np.zeros(10), np.zeros(3)))

    wrist, hand = TREE.joint_index("left_wrist"), TREE.joint_index("left_hand")
    moved = {wrist, hand}
    for j in range(24):
        if j in moved:
            continue
        assert np.array_equal(posed[j], base[j]), TREE.joint_names[j]

    R = axis_angle_to_matrix(aa)
    wrist_expected = base[elbow] + R @ TREE.template_offsets[wrist]
    hand_expected = wrist_expected + R @ TREE.template_offsets[hand]
    assert np.allclose(posed[wrist], wrist_expected, atol=1e-12)
    assert np.allclose(posed[hand], hand_expected, atol=1e-12)


def test_shaped_offsets_basics():
    assert np.allclose(shaped_offsets(TREE, np.zeros(10)), TREE.template_offsets)
    beta = np.zeros(10)
    beta[0] = 0.1
    assert np.allclose(shaped_offsets(TREE, beta), TREE.template_offsets * 1.1)
    # arm row leaves leg offsets unchanged
    beta = np.zeros(10)
    beta[1] = 0.2
    off = shaped_offsets(TREE, beta)
    legs = [TREE.joint_index(n) for n in ("left_knee", "right_ankle", "left_foot")]
    assert np.allclose(off[legs], TREE.template_offsets[legs])
    arm = TREE.joint_index("left_elbow")
    assert np.allclose(off[arm], TREE.template_offsets[arm] * 1.2)


def test_shaped_offsets_errors():
    bad = np.zeros(10)
    bad[0] = 3.5
    with pytest.raises(BodyModelError):
        shaped_offsets(TREE, bad)
    collapse = np.zeros(10)
    collapse[0] = -1.5       # scale 1 - 1.5 < 0 everywhere
    with pytest.raises(BodyModelError):
        shaped_offsets(TREE, np.clip(collapse, -3, 3))


def test_bone_lengths_pose_invariant():
    rng = np.random.default_rng(3)
    beta = rng.uniform(-0.3, 0.3, size=10)
    ref = bone_lengths(TREE, beta)[1:]
    for _ in range(5):
        params = PersonFrameParams(rng.normal(size=3), 0.5 * rng.normal(size=(21, 3)),
                                   beta, rng.normal(size=3))
        joints = forward_kinematics(TREE, params)
        measured = np.linalg.norm(joints[1:] - joints[TREE.parents[1:]], axis=-1)
        assert np.allclose(measured, ref, atol=1e-9)


def test_fk_rigid_equivariance():
    rng = np.random.default_rng(4)
    params = _identity_params()
    params.theta = 0.4 * rng.normal(size=(21, 3))
    params.phi = rng.normal(size=3)
    params.tau = rng.normal(size=3)
    base = forward_kinematics(TREE, params)

    R = axis_angle_to_matrix(rng.normal(size=3))
    t = rng.normal(size=3)
    moved = PersonFrameParams(
        phi=matrix_to_axis_angle(R @ axis_angle_to_matrix(params.phi)),
        theta=params.theta, beta=params.beta, tau=R @ params.tau + t)
    joints = forward_kinematics(TREE, moved)
    assert np.allclose(joints, base @ R.T + t, atol=1e-9)


def test_fk_tensor_matches_numpy():
    rng = np.random.default_rng(5)
    B = 4
    phi = rng.normal(size=(B, 3))
    theta = 0.4 * rng.normal(size=(B, 21, 3))
    beta = rng.uniform(-0.2, 0.2, size=(B, 10))
    tau = rng.normal(size=(B, 3))
    rotmats = rotmats_from_params(phi, theta)
    offsets = shaped_offsets(TREE, beta)
    ref = fk(TREE, rotmats, offsets, tau)
    out = fk_t(TREE, Tensor(rotmats), shaped_offsets_t(TREE, Tensor(beta)), Tensor(tau))
    assert np.allclose(out.data, ref, atol=1e-12)


# -- capsule mesh -------------------------------------------------------------


def test_capsule_mesh_counts_and_determinism():
    joints = _template_positions() + np.array([0, 0, 3.0])
    mesh = capsule_mesh(TREE, joints)
    per_vert = 2 + TREE.segments * TREE.rings
    per_face = 2 * TREE.segments * TREE.rings
    assert mesh.vertices.shape == (23 * per_vert, 3)
    assert mesh.triangles.shape == (23 * per_face, 3)
    again = capsule_mesh(TREE, joints)
    assert np.array_equal(mesh.vertices, again.vertices)
    assert np.array_equal(mesh.triangles, again.triangles)
    assert mesh.triangles.min() >= 0 and mesh.triangles.max() < len(mesh.vertices)


def test_capsule_mesh_rigid_per_bone():
    rng = np.random.default_rng(6)
    base_joints = forward_kinematics(TREE, _identity_params(tau=np.array([0, 0, 3.0])))
    params = _identity_params(tau=np.array([0, 0, 3.0]))
    params.theta = 0.5 * rng.normal(size=(21, 3))
    params.phi = rng.normal(size=3)
    posed_joints = forward_kinematics(TREE, params)

    m0 = capsule_mesh(TREE, base_joints)
    m1 = capsule_mesh(TREE, posed_joints)
    assert m0.vertices.shape == m1.vertices.shape
    nv = 2 + TREE.segments * TREE.rings
    for b in range(23):
        v0 = m0.vertices[b * nv:(b + 1) * nv]
        v1 = m1.vertices[b * nv:(b + 1) * nv]
        # same pairwise geometry => related by a rigid transform
        d0 = np.linalg.norm(v0[:-1] - v0[1:], axis=1)
        d1 = np.linalg.norm(v1[:-1] - v1[1:], axis=1)
        assert np.allclose(d0, d1, atol=1e-9)


def test_capsule_normals_unit_and_outward():
    joints = _template_positions() + np.array([0, 0, 3.0])
    mesh = capsule_mesh(TREE, joints)
    norms = np.linalg.norm(mesh.normals, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-9)

    # Oracle: recompute vertex normals from triangle geometry (area weighted).
    tri = mesh.vertices[mesh.triangles]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    acc = np.zeros_like(mesh.vertices)
    np.add.at(acc, mesh.triangles[:, 0], fn)
    np.add.at(acc, mesh.triangles[:, 1], fn)
    np.add.at(acc, mesh.triangles[:, 2], fn)
    acc /= np.maximum(np.linalg.norm(acc, axis=1, keepdims=True), 1e-30)
    cos = (acc * mesh.normals).sum(axis=1)
    assert cos.min() > 0.8


def test_capsule_vertices_never_exceed_bone_plus_radius():
    rng = np.random.default_rng(7)
    params = _identity_params(tau=np.array([0, 0, 3.0]))
    params.theta = 0.5 * rng.normal(size=(21, 3))
    joints = forward_kinematics(TREE, params)
    mesh = capsule_mesh(TREE, joints)
    starts, ends, radii = capsule_segments(TREE, joints)
    nv = 2 + TREE.segments * TREE.rings
    for b in range(23):
        v = mesh.vertices[b * nv:(b + 1) * nv]
        length = np.linalg.norm(ends[b] - starts[b])
        dist = np.linalg.norm(v - starts[b][None], axis=1)
        assert np.all(dist <= length + radii[b] + 1e-9)


def test_capsule_zero_length_bone_raises():
    joints = np.zeros((24, 3))
    with pytest.raises(BodyModelError):
        capsule_mesh(TREE, joints)


def test_capsule_vertices_tensor_matches_numpy():
    rng = np.random.default_rng(8)
    params = _identity_params(tau=np.array([0, 0, 3.0]))
    params.theta = 0.3 * rng.normal(size=(21, 3))
    joints = forward_kinematics(TREE, params)
    mesh = capsule_mesh(TREE, joints)
    out = capsule_vertices_t(TREE, Tensor(joints[None]))
    assert np.allclose(out.data[0], mesh.vertices, atol=1e-12)


# -- camera ---------------------------------------------------------------------


def test_project_on_axis():
    cam = Camera(focal=1000.0, cx=500.0, cy=500.0)
    assert np.allclose(project(cam, np.array([[0, 0, 2.0]])), [[500, 500]])


def test_project_off_axis():
    cam = Camera(focal=1000.0, cx=500.0, cy=500.0)
    assert np.allclose(project(cam, np.array([[1.0, 0, 2.0]])), [[1000, 500]])


def test_project_depth_halves_offset():
    cam = Camera(focal=1000.0, cx=500.0, cy=500.0)
    near = project(cam, np.array([[0.5, -0.25, 2.0]]))[0] - [500, 500]
    far = project(cam, np.array([[0.5, -0.25, 4.0]]))[0] - [500, 500]
    assert np.allclose(far, near / 2.0)


def test_project_near_plane_error():
    cam = Camera()
    with pytest.raises(BodyModelError):
        project(cam, np.array([[0.0, 0.0, 0.05]]))
