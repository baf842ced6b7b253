import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmperturb import autodiff as ad
from mmperturb.kinematics import (
    IDENTITY,
    Skeleton,
    SkeletonError,
    align_root,
    axis_angle,
    euler_to_quat,
    forward_kinematics,
    forward_kinematics_var,
    normalize,
    quat_multiply,
    quat_to_euler,
    rotate_vector,
    wrap_angle,
)


def random_unit(rng, shape=()):
    q = rng.standard_normal(shape + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def rotation_matrix(q):
    """Textbook unit-quaternion rotation matrix, used only as an oracle."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def same_rotation(a, b, tol=1e-12):
    return min(np.max(np.abs(a - b)), np.max(np.abs(a + b))) < tol


Z90 = axis_angle([0.0, 0.0, 1.0], math.pi / 2)


def test_identity_is_left_unit():
    q = random_unit(np.random.default_rng(0))
    np.testing.assert_allclose(quat_multiply(IDENTITY, q), q, atol=0)


def test_two_quarter_turns_make_half_turn():
    assert same_rotation(quat_multiply(Z90, Z90), np.array([0.0, 0.0, 0.0, 1.0]))


def test_product_of_unit_quaternions_is_unit():
    rng = np.random.default_rng(1)
    a, b = random_unit(rng, (1000,)), random_unit(rng, (1000,))
    assert np.max(np.abs(np.linalg.norm(quat_multiply(a, b), axis=-1) - 1.0)) < 1e-12


def test_rotate_vector_examples():
    np.testing.assert_allclose(rotate_vector(IDENTITY, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0], atol=1e-15)
    np.testing.assert_allclose(rotate_vector(Z90, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)


def test_rotate_vector_isometry_and_matrix_oracle():
    rng = np.random.default_rng(2)
    for _ in range(200):
        q, v = random_unit(rng), rng.standard_normal(3)
        out = rotate_vector(q, v)
        assert abs(np.linalg.norm(out) - np.linalg.norm(v)) < 1e-12
        np.testing.assert_allclose(out, rotation_matrix(q) @ v, atol=1e-12)


def test_rotate_vector_rejects_non_unit():
    with pytest.raises(ValueError):
        rotate_vector(np.array([2.0, 0.0, 0.0, 0.0]), [1.0, 0.0, 0.0])


def test_fk_identity_chain():
    skel = Skeleton.chain(3)
    pos = forward_kinematics(skel, np.tile(IDENTITY, (3, 1)))
    np.testing.assert_array_equal(pos, [[0, 0, 0], [0, 1, 0], [0, 2, 0]])


def test_fk_root_quarter_turn():
    skel = Skeleton.chain(3)
    pose = np.tile(IDENTITY, (3, 1))
    pose[0] = Z90
    np.testing.assert_allclose(forward_kinematics(skel, pose), [[0, 0, 0], [-1, 0, 0], [-2, 0, 0]], atol=1e-15)


def random_tree(rng, J):
    parent = np.array([-1] + [int(rng.integers(0, j)) for j in range(1, J)])
    return Skeleton(parent, rng.standard_normal((J, 3)))


def test_fk_conserves_bone_lengths():
    rng = np.random.default_rng(3)
    skel = random_tree(rng, 7)
    poses = random_unit(rng, (1000, 7))
    pos = forward_kinematics(skel, poses)
    bones = np.linalg.norm(pos[:, 1:] - pos[:, skel.parent[1:]], axis=-1)
    assert np.max(np.abs(bones - np.linalg.norm(skel.offset[1:], axis=-1))) < 1e-9
    assert np.all(pos[:, 0] == 0.0)


def test_fk_matches_matrix_chain():
    rng = np.random.default_rng(4)
    skel = random_tree(rng, 5)
    pose = random_unit(rng, (5,))
    G = [rotation_matrix(pose[0])]
    p = [np.zeros(3)]
    for j in range(1, 5):
        par = skel.parent[j]
        p.append(p[par] + G[par] @ skel.offset[j])
        G.append(G[par] @ rotation_matrix(pose[j]))
    np.testing.assert_allclose(forward_kinematics(skel, pose), np.array(p), atol=1e-12)


def test_fk_is_sign_agnostic():
    rng = np.random.default_rng(5)
    skel = random_tree(rng, 6)
    pose = random_unit(rng, (6,))
    flipped = pose * rng.choice([-1.0, 1.0], size=(6, 1))
    np.testing.assert_allclose(forward_kinematics(skel, pose), forward_kinematics(skel, flipped), atol=1e-12)


def test_skeleton_validation():
    with pytest.raises(SkeletonError):
        Skeleton(np.array([-1, 2, 0]), np.zeros((3, 3)))
    with pytest.raises(SkeletonError):
        Skeleton(np.array([0, 0]), np.zeros((2, 3)))
    with pytest.raises(SkeletonError):
        Skeleton(np.array([-1, 0]), np.zeros((3, 3)))


def test_skeleton_text_round_trip(tmp_path):
    skel = random_tree(np.random.default_rng(6), 5)
    skel.save(tmp_path / "s.txt")
    back = Skeleton.load(tmp_path / "s.txt")
    np.testing.assert_array_equal(back.parent, skel.parent)
    np.testing.assert_array_equal(back.offset, skel.offset)
    assert (tmp_path / "s.txt").read_text().splitlines()[0] == "5"


def test_align_root_contract():
    rng = np.random.default_rng(7)
    pose = random_unit(rng, (4,))
    pose[0] = Z90
    aligned = align_root(pose)
    np.testing.assert_array_equal(aligned[0], IDENTITY)
    np.testing.assert_array_equal(aligned[1:], pose[1:])
    np.testing.assert_array_equal(align_root(aligned), aligned)
    ident = pose.copy()
    ident[0] = IDENTITY
    np.testing.assert_array_equal(align_root(ident), ident)


def test_align_root_idempotent_batched():
    poses = random_unit(np.random.default_rng(8), (50, 3, 5))
    once = align_root(poses)
    np.testing.assert_array_equal(align_root(once), once)


def test_euler_examples():
    np.testing.assert_allclose(quat_to_euler(IDENTITY), [0.0, 0.0, 0.0], atol=0)
    np.testing.assert_allclose(quat_to_euler(Z90), [math.pi / 2, 0.0, 0.0], atol=1e-15)


def test_euler_round_trip_away_from_gimbal_lock():
    rng = np.random.default_rng(9)
    n = 500
    yaw = rng.uniform(-math.pi, math.pi, n)
    pitch = rng.uniform(-math.pi / 2 + 1e-3, math.pi / 2 - 1e-3, n)
    roll = rng.uniform(-math.pi, math.pi, n)
    back = quat_to_euler(euler_to_quat(yaw, pitch, roll))
    err = wrap_angle(back - np.stack([yaw, pitch, roll], axis=-1))
    assert np.max(np.abs(err)) < 1e-9


def test_euler_matches_matrix_decomposition():
    rng = np.random.default_rng(10)
    for q in random_unit(rng, (100,)):
        yaw, pitch, roll = quat_to_euler(q)
        Rz = rotation_matrix(axis_angle([0, 0, 1.0], yaw))
        Ry = rotation_matrix(axis_angle([0, 1.0, 0], pitch))
        Rx = rotation_matrix(axis_angle([1.0, 0, 0], roll))
        np.testing.assert_allclose(Rz @ Ry @ Rx, rotation_matrix(q), atol=1e-9)


def test_gimbal_lock_convention():
    q = euler_to_quat(0.4, math.pi / 2, 0.3)
    yaw, pitch, roll = quat_to_euler(q)
    assert pitch == pytest.approx(math.pi / 2)
    assert roll == 0.0
    # the remaining rotation about the vertical axis is carried by yaw
    assert same_rotation(euler_to_quat(yaw, pitch, roll), q, tol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50.0, 50.0, allow_nan=False))
def test_wrap_angle_range(a):
    w = float(wrap_angle(a))
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_wrap_angle_boundaries():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(2 * math.pi) == pytest.approx(0.0, abs=1e-15)


def test_differentiable_fk_matches_numpy():
    rng = np.random.default_rng(11)
    skel = random_tree(rng, 5)
    q = rng.standard_normal((3, 5, 4)) * 2.0
    t = ad.Tape()
    out = forward_kinematics_var(skel, t.constant(q), aligned=False).value
    np.testing.assert_allclose(out, forward_kinematics(skel, normalize(q)), atol=1e-12)
    aligned = forward_kinematics_var(skel, t.constant(q), aligned=True).value
    np.testing.assert_allclose(aligned, forward_kinematics(skel, align_root(normalize(q))), atol=1e-12)
