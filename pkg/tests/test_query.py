import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import iv

from viewgrasp.cluster import ClusterPrototype, SurfaceIndex
from viewgrasp.density import Bandwidth, DegenerateConditional, KernelSet
from viewgrasp.geometry import Pose, compose, quat_rotate, random_quats, relative_link_pose
from viewgrasp.pipeline import query_view_model
from viewgrasp.query import (
    WEIGHT_MARGINAL,
    QueryDensity,
    eval_query,
    eval_query_naive,
    form_query_density,
    query_weight,
    surface_divergence,
    transform_contact_model,
)
from viewgrasp.surface import ObjectViewModel

Z = np.array([0.0, 0.0, 1.0])


def own_view(pinch):
    demo, _, _, store = pinch
    return query_view_model(demo.clouds[0], store.params)


def single_prototypes(store):
    return store.prototypes(merge=False)


def test_transform_identity_and_round_trip(rng):
    bw = Bandwidth(0.005, 16.0, 10.0)
    ident = KernelSet([[0, 0, 0]], [[0, 0, 0, 1.0]], [[0.0, 0.0]], [1.0], bw)
    out = transform_contact_model(Pose.identity(), ident)
    np.testing.assert_allclose(out.p, 0, atol=1e-15)
    U = KernelSet(rng.normal(size=(20, 3)), random_quats(rng, 20), rng.normal(size=(20, 2)), np.full(20, 0.05), bw)
    s = Pose(rng.normal(size=3), random_quats(rng, 1)[0])
    W = transform_contact_model(s, U)
    for j in range(20):
        u = relative_link_pose(Pose(W.p[j], W.q[j]), s)
        assert u.isclose(Pose(U.p[j], U.q[j]), atol=1e-9)


def test_self_transfer_overlays_view(pinch):
    demo, _, hand, store = pinch
    V = own_view(pinch)
    for proto, k in zip(single_prototypes(store), store.retained):
        s = store.models[k].link_pose
        assert surface_divergence(s, proto, V) < 1e-3


def test_weight_rule_values():
    assert query_weight(0.0) == 1.0
    assert math.isclose(query_weight(0.5, 1.0), 0.606531, abs_tol=5e-7)


def test_query_density_shape_and_normalisation(pinch):
    _, _, _, store = pinch
    V = own_view(pinch)
    Q = form_query_density(V, store.prototypes()[0], 5000, 1.0, np.random.default_rng(0))
    assert len(Q) == 5000
    assert abs(Q.w.sum() - 1) < 1e-9
    assert np.all(Q.w > 0)


def test_self_transfer_recovery_top_kernels(pinch):
    _, _, _, store = pinch
    V = own_view(pinch)
    sp = store.params.sigma_p
    for proto, k in zip(single_prototypes(store), store.retained):
        s = store.models[k].link_pose
        Q = form_query_density(V, proto, 2000, 1.0, np.random.default_rng(k))
        top = np.argsort(-Q.w)[:20]
        dp = np.linalg.norm(Q.p[top] - s.p, axis=1)
        ang = np.degrees(np.arccos(np.clip(np.abs(quat_rotate(Q.q[top], Z) @ quat_rotate(s.q, Z)), 0, 1)))
        assert np.any((dp <= 2 * sp) & (ang <= 15)), f"link {store.models[k].link}"


def test_phi_penalty_monotone(pinch):
    _, _, _, store = pinch
    V = own_view(pinch)
    proto = store.prototypes()[0]
    weights = []
    for phi in (0.5, 1.0, 2.0, 5.0, 50.0):
        Q = form_query_density(V, proto, 500, phi, np.random.default_rng(3))
        weights.append(Q)
    # same draws at every phi; only the weights change
    for Q in weights[1:]:
        np.testing.assert_array_equal(Q.p, weights[0].p)
    worst = np.argmin(weights[0].w)
    w = [Q.w[worst] for Q in weights]
    assert all(a >= b for a, b in zip(w, w[1:]))


def test_marginal_rule_and_degenerate(pinch):
    _, _, _, store = pinch
    V = own_view(pinch)
    proto = store.prototypes()[0]
    Q = form_query_density(V, proto, 300, rng=np.random.default_rng(1), weight_rule=WEIGHT_MARGINAL)
    assert abs(Q.w.sum() - 1) < 1e-9
    far = ObjectViewModel(KernelSet(V.features.p, V.features.q, V.features.r + 1e4, V.features.w, V.features.bandwidth))
    with pytest.raises(DegenerateConditional):
        form_query_density(far, proto, 100, rng=np.random.default_rng(1), max_retries=2)
    with pytest.raises(ValueError):
        form_query_density(V, proto, 10, rng=np.random.default_rng(1), weight_rule="nope")


def test_query_determinism(pinch):
    _, _, _, store = pinch
    V = own_view(pinch)
    a = form_query_density(V, store.prototypes()[1], 500, rng=np.random.default_rng(9))
    b = form_query_density(V, store.prototypes()[1], 500, rng=np.random.default_rng(9))
    assert np.array_equal(a.p, b.p) and np.array_equal(a.w, b.w)


def test_eval_query_cases(rng):
    Q = QueryDensity(np.array([[0.1, 0.0, 0.0]]), np.array([[0, 0, 0, 1.0]]), np.array([1.0]), 0.005, 16.0)
    peak = eval_query(Q, Pose([0.1, 0, 0], [0, 0, 0, 1]))
    off = eval_query(Q, Pose([0.103, 0, 0], [0, 0.1, 0, 1]))
    assert peak > off
    expect = (2 * np.pi * 0.005**2) ** -1.5 * 16 / (4 * np.pi**2 * iv(1, 16)) * np.cosh(16)
    assert math.isclose(peak, expect, rel_tol=1e-9)
    q = random_quats(rng, 1)[0]
    assert math.isclose(eval_query(Q, Pose([0.1, 0, 0], q)), eval_query(Q, Pose([0.1, 0, 0], -q)), rel_tol=1e-12)
    with pytest.raises(ValueError):
        eval_query(QueryDensity(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), 0.005, 16.0), Pose.identity())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_eval_query_matches_naive(seed):
    r = np.random.default_rng(seed)
    n = 50
    w = r.random(n)
    Q = QueryDensity(r.normal(scale=0.01, size=(n, 3)), random_quats(r, n), w / w.sum(), 0.005, 16.0)
    s = Pose(r.normal(scale=0.01, size=3), random_quats(r, 1)[0])
    assert math.isclose(eval_query(Q, s), eval_query_naive(Q, s), rel_tol=1e-9, abs_tol=1e-300)
