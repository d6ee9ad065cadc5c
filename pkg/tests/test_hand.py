import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from viewgrasp.geometry import Pose, random_quats
from viewgrasp.hand import (
    HandModel,
    build_config_model,
    default_hand,
    eval_config,
    mixture_mean,
    sample_config,
)

HAND = default_hand()


def T(p, q):
    M = np.eye(4)
    M[:3, :3] = Rotation.from_quat(q).as_matrix()
    M[:3, 3] = p
    return M


def fk_oracle(hand, h_w, h_c):
    """Homogeneous-matrix chain built straight from the joint table."""
    mats = [None] * hand.n_links
    mats[0] = T(h_w.p, h_w.q) @ T(hand.links[0].offset.p, hand.links[0].offset.q)
    for k, j in enumerate(hand.joints):
        R = np.eye(4)
        R[:3, :3] = Rotation.from_rotvec(np.asarray(j.axis) * h_c[k]).as_matrix()
        off = hand.links[j.child].offset
        mats[j.child] = mats[j.parent] @ T(j.origin.p, j.origin.q) @ R @ T(off.p, off.q)
    return mats


def test_default_hand_shape():
    assert HAND.n_links == 7 and HAND.dof == 6
    assert HAND.link_names[0] == "palm"


def test_zero_configuration_rest_poses():
    poses = HAND.forward_kinematics(Pose.identity(), np.zeros(6))
    np.testing.assert_allclose(poses[0].p, 0)
    # first proximal: base on the palm face, centre half a phalanx above
    np.testing.assert_allclose(poses[1].p, [0.025, 0.04, 0.01 + 0.025])
    np.testing.assert_allclose(poses[2].p, [0.025, 0.04, 0.01 + 0.05 + 0.02])


def test_wrist_translation_moves_all_links():
    h_c = np.array([0.3, 0.2, 0.1, 0.0, 0.5, 0.4])
    a = HAND.forward_kinematics(Pose.identity(), h_c)
    b = HAND.forward_kinematics(Pose([0.1, -0.2, 0.3], [0, 0, 0, 1]), h_c)
    for x, y in zip(a, b):
        np.testing.assert_allclose(y.p - x.p, [0.1, -0.2, 0.3], atol=1e-12)
        assert abs(abs(x.q @ y.q) - 1) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_fk_matches_matrix_chain(seed):
    r = np.random.default_rng(seed)
    h_w = Pose(r.normal(size=3), random_quats(r, 1)[0])
    h_c = r.uniform(HAND.lower, HAND.upper)
    got = HAND.forward_kinematics(h_w, h_c)
    for pose, M in zip(got, fk_oracle(HAND, h_w, h_c)):
        np.testing.assert_allclose(T(pose.p, pose.q), M, atol=1e-9)


def test_single_joint_rotation():
    h_c = np.zeros(6)
    h_c[0] = 0.4
    p0 = HAND.forward_kinematics(Pose.identity(), np.zeros(6))[1]
    p1 = HAND.forward_kinematics(Pose.identity(), h_c)[1]
    rel = Rotation.from_quat(p0.q).inv() * Rotation.from_quat(p1.q)
    np.testing.assert_allclose(rel.as_rotvec(), [0.4, 0, 0], atol=1e-12)


def test_fk_determinism_and_errors():
    h_w, h_c = Pose([0.1, 0, 0], [0.1, 0.2, 0.3, 0.9]), np.full(6, 0.2)
    a = HAND.forward_kinematics_arrays(h_w.p, h_w.q, h_c)
    b = HAND.forward_kinematics_arrays(h_w.p, h_w.q, h_c)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        HAND.forward_kinematics(h_w, np.zeros(5))


def test_wrist_for_link_places_link_exactly(rng):
    for link in range(HAND.n_links):
        s = Pose(rng.normal(size=3), random_quats(rng, 1)[0])
        h_c = rng.uniform(HAND.lower, HAND.upper)
        wp, wq = HAND.wrist_for_link(link, s.p, s.q, h_c)
        got = HAND.forward_kinematics(Pose(wp, wq), h_c)[link]
        assert got.isclose(s, atol=1e-9)


def test_hand_file_round_trip(tmp_path):
    HAND.save(tmp_path / "hand.json")
    back = HandModel.load(tmp_path / "hand.json")
    assert back.to_dict() == HAND.to_dict()
    d = HAND.to_dict()
    d["schema"] = "other/9"
    with pytest.raises(ValueError):
        HandModel.from_dict(d)


def test_config_model_grid():
    h_g = np.array([0.5, 0.2, 0.1, 0.0, 0.3, 0.4])
    h_t = h_g - 0.3
    C = build_config_model(h_g, h_t, alpha=100, beta=1, n_kernels=1000)
    assert len(C) <= 1000
    centres = [c for c in C.centers]
    assert any(np.array_equal(c, h_g) for c in centres)
    assert any(np.allclose(c, h_t, atol=1e-15) for c in centres)
    assert any(np.allclose(c, 1.5 * h_g - 0.5 * h_t, atol=1e-3) for c in centres)
    # unnormalised weights are exp(-alpha |h(γ) - h_g|^2), 1 at γ = 0
    raw = np.exp(-100 * np.sum((C.centers - h_g) ** 2, axis=1))
    np.testing.assert_allclose(C.weights, raw / raw.sum(), rtol=1e-12)
    assert raw.max() == 1.0
    assert eval_config(C, h_g) >= eval_config(C, h_t)
    np.testing.assert_allclose(C.weights.sum(), 1.0)


def test_gamma_minus_half_extrapolates():
    h_g, h_t = np.array([1.0, 2.0]), np.array([0.0, 0.0])
    C = build_config_model(h_g, h_t, beta=1, n_kernels=5)
    np.testing.assert_allclose(C.centers[1], 1.5 * h_g - 0.5 * h_t)


def test_config_sampling(rng):
    h_g = np.array([0.5, 0.2, 0.1, 0.0, 0.3, 0.4])
    h_t = h_g - 0.3
    C = build_config_model(h_g, h_t, alpha=100, sigma_hc=0.05)
    x = sample_config(C, rng, 10**5)
    mean = mixture_mean(C)
    se = x.std(axis=0) / np.sqrt(10**5)
    assert np.all(np.abs(x.mean(axis=0) - mean) < 3 * se)
    lo = np.minimum(h_g, h_t) - 1.0 * np.abs(h_t - h_g) - 6 * 0.05
    hi = np.maximum(h_g, h_t) + 1.0 * np.abs(h_t - h_g) + 6 * 0.05
    assert np.all((x >= lo) & (x <= hi))
    with pytest.raises(ValueError):
        build_config_model(h_g, h_t, beta=0)
