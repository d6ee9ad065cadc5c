import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from viewgrasp.geometry import (
    Pose,
    axis_angle_quat,
    compose,
    inverse,
    quat_mul,
    quat_rotate,
    relative_link_pose,
    rotation_pose,
    translation,
)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = arrays(float, 3, elements=finite)
quat = arrays(float, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1)
poses = st.builds(Pose, vec3, quat)


def homogeneous(pose):
    # independent oracle: scipy rotation into a 4x4 matrix
    T = np.eye(4)
    T[:3, :3] = Rotation.from_quat(pose.q).as_matrix()
    T[:3, 3] = pose.p
    return T


def test_identity_compose():
    x = Pose([1, 2, 3], axis_angle_quat([0, 1, 0], 0.3))
    assert compose(Pose.identity(), x).isclose(x)
    assert compose(x, inverse(x)).isclose(Pose.identity())


def test_translation_then_rotation_matches_matrix_product():
    rz = rotation_pose([0, 0, 1], np.pi / 2)
    out = compose(translation(1, 0, 0), rz)
    T = homogeneous(translation(1, 0, 0)) @ homogeneous(rz)
    np.testing.assert_allclose(out.p, [1, 0, 0], atol=1e-12)
    assert abs(abs(out.q @ rz.q) - 1) < 1e-12
    np.testing.assert_allclose(homogeneous(out), T, atol=1e-12)


def test_inverse_cases():
    assert inverse(Pose.identity()).isclose(Pose.identity())
    inv = inverse(translation(0.1, -0.2, 0.3))
    np.testing.assert_allclose(inv.p, [-0.1, 0.2, -0.3])
    g = Pose([0.3, -1, 2], [0.1, 0.7, -0.2, 0.5])
    np.testing.assert_allclose(homogeneous(inverse(g)), np.linalg.inv(homogeneous(g)), atol=1e-12)


def test_relative_link_pose_cases():
    s = Pose([0.1, 0.2, 0.3], [0.3, 0.1, 0.2, 0.9])
    assert relative_link_pose(s, s).isclose(Pose.identity())
    assert relative_link_pose(Pose.identity(), s).isclose(s)


def test_scalar_last_matches_scipy():
    q = axis_angle_quat([1, 0, 0], 0.4)
    np.testing.assert_allclose(q, Rotation.from_rotvec([0.4, 0, 0]).as_quat(), atol=1e-15)
    a, b = Rotation.random(2, random_state=1).as_quat()
    ref = (Rotation.from_quat(a) * Rotation.from_quat(b)).as_quat()
    assert abs(abs(quat_mul(a, b) @ ref) - 1) < 1e-12


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        Pose([np.nan, 0, 0], [0, 0, 0, 1])
    with pytest.raises(ValueError):
        Pose([0, 0, 0], [0, 0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(poses, poses)
def test_compose_matches_homogeneous(a, b):
    np.testing.assert_allclose(homogeneous(compose(a, b)), homogeneous(a) @ homogeneous(b), atol=1e-9)
    assert abs(np.linalg.norm(compose(a, b).q) - 1) < 1e-9


@settings(max_examples=200, deadline=None)
@given(poses, poses, poses)
def test_associativity(a, b, c):
    assert compose(compose(a, b), c).isclose(compose(a, compose(b, c)), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(poses, poses)
def test_relative_round_trip(v, s):
    assert compose(v, relative_link_pose(v, s)).isclose(s, atol=1e-9)
    assert compose(v, inverse(v)).isclose(Pose.identity(), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(quat, vec3)
def test_double_cover(q, v):
    np.testing.assert_allclose(quat_rotate(q / np.linalg.norm(q), v), quat_rotate(-q / np.linalg.norm(q), v), atol=1e-9)
    assert Pose(v, q).isclose(Pose(v, -q))
