import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import autograd, central_diff, rel_error
from semretarget.errors import DegenerateRotation, NotARotation, ShapeMismatch
from semretarget.skeleton import (Motion, Skeleton, forward_kinematics, global_transforms,
                                  identity_rot6d, joint_distance_matrix, matrix_to_rot6d,
                                  motion_features, normalize_jdm, rot6d_to_matrix)


def chain(n, offset=(1.0, 0.0, 0.0)):
    offs = [[0.0, 0.0, 0.0]] + [list(offset)] * (n - 1)
    return Skeleton([f"j{i}" for i in range(n)], list(range(-1, n - 1)), offs, 1.0)


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


# ---------------------------------------------------------------- rotations

def test_rot6d_identity():
    assert torch.equal(rot6d_to_matrix(t64([1, 0, 0, 0, 1, 0])), torch.eye(3, dtype=torch.float64))


def test_rot6d_quarter_turn_about_z_matches_quaternion():
    ref = Rotation.from_quat([0, 0, np.sin(np.pi / 4), np.cos(np.pi / 4)]).as_matrix()
    got = rot6d_to_matrix(t64([0, 1, 0, -1, 0, 0])).numpy()
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_gram_schmidt_removes_projection():
    got = rot6d_to_matrix(t64([2, 0, 0, 1, 1, 0]))
    assert torch.allclose(got, torch.eye(3, dtype=torch.float64), atol=1e-12)


@pytest.mark.parametrize("r6", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 3, 0, 0], [1e-10, 0, 0, 0, 1, 0]])
def test_degenerate_rotation(r6):
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix(t64(r6))


def test_matrix_to_rot6d_reads_first_two_columns():
    assert matrix_to_rot6d(torch.eye(3, dtype=torch.float64)).tolist() == [1, 0, 0, 0, 1, 0]
    Rz = t64(Rotation.from_rotvec([0, 0, np.pi / 2]).as_matrix())
    np.testing.assert_allclose(matrix_to_rot6d(Rz).numpy(), [0, 1, 0, -1, 0, 0], atol=1e-12)


def test_not_a_rotation():
    with pytest.raises(NotARotation):
        matrix_to_rot6d(t64(np.diag([1.0, 1.0, -1.0])))
    with pytest.raises(NotARotation):
        matrix_to_rot6d(2 * torch.eye(3, dtype=torch.float64))


def test_round_trip_1000_random_rotations():
    R = t64(Rotation.random(1000, random_state=1).as_matrix())
    back = rot6d_to_matrix(matrix_to_rot6d(R))
    assert float((back - R).abs().max()) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=6, max_size=6))
def test_gram_schmidt_output_is_proper_rotation(v):
    r6 = t64(v)
    a, b = r6[:3], r6[3:]
    if a.norm() < 1e-3 or (b - (b @ a) / (a @ a) * a).norm() < 1e-3:
        return
    R = rot6d_to_matrix(r6)
    assert torch.allclose(R.T @ R, torch.eye(3, dtype=torch.float64), atol=1e-9)
    assert abs(float(torch.linalg.det(R)) - 1.0) < 1e-9


# ---------------------------------------------------------------- skeleton

def test_skeleton_validation():
    with pytest.raises(ValueError):
        Skeleton(["a", "b"], [-1, -1], [[0, 0, 0], [1, 0, 0]], 1.0)  # two roots
    with pytest.raises(ValueError):
        Skeleton(["a", "b", "c"], [-1, 2, 1], [[0, 0, 0]] * 3, 1.0)  # cycle
    with pytest.raises(ValueError):
        Skeleton(["a"], [-1], [[1, 0, 0]], 1.0)  # root offset
    with pytest.raises(ValueError):
        Skeleton(["a"], [-1], [[0, 0, 0]], 0.0)  # height


def test_motion_feature_shape_is_nine_channels():
    skel = chain(4)
    feats = motion_features(skel, identity_rot6d(5, 4), torch.zeros(5, 3, dtype=torch.float64))
    assert feats.shape == (5, 4, 9)


# ---------------------------------------------------------------- forward kinematics

def test_fk_rest_pose_is_cumulative_offsets():
    skel = Skeleton(["r", "a", "b", "c"], [-1, 0, 1, 1],
                    [[0, 0, 0], [0, 1, 0], [0.5, 0.2, 0], [-0.3, 0, 0.4]], 1.0)
    P = forward_kinematics(skel, Motion(identity_rot6d(1, 4), torch.zeros(1, 3, dtype=torch.float64)))
    expected = np.array([[0, 0, 0], [0, 1, 0], [0.5, 1.2, 0], [-0.3, 1.0, 0.4]])
    np.testing.assert_array_equal(P[0].numpy(), expected)


def test_fk_two_bone_chain_quarter_turn():
    skel = chain(3)
    r6 = identity_rot6d(1, 3)
    r6[0, 0] = t64([0, 1, 0, -1, 0, 0])
    P = forward_kinematics(skel, Motion(r6, torch.zeros(1, 3, dtype=torch.float64)))
    np.testing.assert_allclose(P[0].numpy(), [[0, 0, 0], [0, 1, 0], [0, 2, 0]], atol=1e-12)


def test_fk_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward_kinematics(chain(3), Motion(identity_rot6d(2, 4), torch.zeros(2, 3, dtype=torch.float64)))


def test_fk_global_rotation_rotates_everything():
    rng = np.random.default_rng(0)
    skel = Skeleton(["r", "a", "b", "c", "d"], [-1, 0, 1, 0, 3],
                    np.vstack([np.zeros(3), rng.normal(size=(4, 3))]), 1.0)
    r6 = matrix_to_rot6d(t64(Rotation.random(5, random_state=2).as_matrix())).unsqueeze(0)
    P = forward_kinematics(skel, Motion(r6, torch.zeros(1, 3, dtype=torch.float64)))
    G = t64(Rotation.random(random_state=3).as_matrix())
    r6g = r6.clone()
    r6g[0, 0] = matrix_to_rot6d(G @ rot6d_to_matrix(r6[0, 0]))
    Pg = forward_kinematics(skel, Motion(r6g, torch.zeros(1, 3, dtype=torch.float64)))
    assert float((Pg - P @ G.T).abs().max()) < 1e-6


def test_fk_gradient_matches_finite_differences():
    skel = chain(4, (0.3, 0.1, 0.0))
    rng = np.random.default_rng(4)
    r6 = t64(rng.normal(size=(2, 4, 6)))
    root = t64(rng.normal(size=(2, 3)))
    w = t64(rng.normal(size=(2, 4, 3)))

    def f_rot(x):
        return (global_transforms(skel, x, root)[1] * w).sum()

    def f_root(x):
        return (global_transforms(skel, r6, x)[1] * w).sum()

    assert rel_error(autograd(f_rot, r6), central_diff(f_rot, r6)) < 1e-4
    assert rel_error(autograd(f_root, root), central_diff(f_root, root)) < 1e-4


# ---------------------------------------------------------------- joint distance matrix

def test_jdm_pythagoras():
    D = joint_distance_matrix(t64([[0, 0, 0], [3, 4, 0]]))
    assert D.tolist() == [[0, 5], [5, 0]]


def test_jdm_coincident_joints_zero_with_zero_gradient():
    P = torch.ones(4, 3, dtype=torch.float64, requires_grad=True)
    D = joint_distance_matrix(P)
    assert torch.equal(D, torch.zeros(4, 4, dtype=torch.float64))
    D.sum().backward()
    assert torch.isfinite(P.grad).all() and float(P.grad.abs().max()) == 0.0


def test_normalized_jdm_collinear_rows():
    D = joint_distance_matrix(t64([[0, 0, 0], [1, 0, 0], [3, 0, 0]]))
    eta = normalize_jdm(D)
    np.testing.assert_allclose(eta[0].numpy(), [0, 0.25, 0.75], atol=1e-8)
    np.testing.assert_allclose(normalize_jdm(5 * D).numpy(), eta.numpy(), atol=1e-9)
    two = normalize_jdm(joint_distance_matrix(t64([[0, 0, 0], [0, 2, 0]])))
    np.testing.assert_allclose(two.numpy(), [[0, 1], [1, 0]], atol=1e-8)


def test_normalized_jdm_zero_row_stays_zero():
    assert torch.equal(normalize_jdm(torch.zeros(3, 3, dtype=torch.float64)),
                       torch.zeros(3, 3, dtype=torch.float64))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.floats(0.1, 10.0), st.integers(0, 2**16))
def test_jdm_properties(n, s, seed):
    P = t64(np.random.default_rng(seed).normal(size=(n, 3)))
    D = joint_distance_matrix(P)
    assert torch.allclose(D, D.T) and float(D.diagonal().abs().max()) == 0.0 and (D >= 0).all()
    assert torch.allclose(joint_distance_matrix(s * P), s * D, rtol=1e-12, atol=1e-12)
    eta = normalize_jdm(D)
    assert torch.allclose(eta.sum(-1), torch.ones(n, dtype=torch.float64), atol=1e-6)
    assert float((normalize_jdm(joint_distance_matrix(s * P)) - eta).abs().max()) < 1e-6


def test_jdm_gradient_matches_finite_differences():
    P = t64(np.random.default_rng(5).normal(size=(2, 5, 3)))
    w = t64(np.random.default_rng(6).normal(size=(2, 5, 5)))

    def f(x):
        return (normalize_jdm(joint_distance_matrix(x)) * w).sum()

    assert rel_error(autograd(f, P), central_diff(f, P)) < 1e-4
