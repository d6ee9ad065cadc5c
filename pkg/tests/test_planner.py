import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from viewgrasp.geometry import Pose, quat_angle
from viewgrasp.hand import build_config_model, default_hand, log_eval_config
from viewgrasp.planner import (
    AnnealSchedule,
    GraspSolution,
    PairModel,
    collision_expert,
    evaluate,
    generate_seeds,
    grasp_likelihood,
    log_normalized_score,
    normalized_score,
    optimize,
    read_jsonl,
    write_jsonl,
)
from viewgrasp.query import QueryDensity, eval_query_naive
from viewgrasp.store import Params

HAND = default_hand()
H_TARGET = np.array([0.4, 0.6, 0.4, 0.6, 0.5, 0.5])
W_TARGET = Pose([0.0, 0.0, 0.1], [0.0, 0.0, 0.0, 1.0])


def target_pair(links=(2, 6), sigma_p=0.01, sigma_q=0.5, grasp_id="g", view_id="v"):
    """One Gaussian-like kernel per link at the target grasp's link poses."""
    LP, LQ = HAND.forward_kinematics_arrays(W_TARGET.p[None], W_TARGET.q[None], H_TARGET[None])
    qs = [QueryDensity(LP[0, l][None], LQ[0, l][None], [1.0], sigma_p, sigma_q) for l in links]
    cfg = build_config_model(H_TARGET, H_TARGET + 0.1, n_kernels=21)
    return PairModel(grasp_id, view_id, list(links), qs, cfg)


# ---------------------------------------------------------------------------
# schedule and score


def test_schedule_defaults():
    s = AnnealSchedule()
    assert s.K == 500
    assert tuple(s.selection_steps) == (1, 50)
    assert s.survivor_fraction == 0.1
    assert s.temperature(1) == pytest.approx(s.T_start)
    assert s.temperature(s.K) == pytest.approx(s.T_end)
    temps = [s.temperature(k) for k in range(1, s.K + 1)]
    assert all(a > b for a, b in zip(temps, temps[1:]))


@pytest.mark.parametrize("kw", [{"K": 0}, {"K": 10, "selection_steps": (1, 50)}, {"survivor_fraction": 0.0}, {"survivor_fraction": 1.5}])
def test_schedule_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        AnnealSchedule(**kw)


def test_default_seed_count():
    assert Params().h1 == 50000


def test_normalized_score_example():
    # L_Q = 0.01 from two links, against a pair with four: exponent 2
    assert normalized_score(1.0, 1.0, 0.01, 2, 4) == pytest.approx(1e-4)
    assert normalized_score(0.5, 0.2, 0.3, 3, 3) == pytest.approx(0.5 * 0.2 * 0.3)
    with pytest.raises(ValueError):
        normalized_score(1, 1, 1, 0, 3)


@given(
    st.floats(-20, 0), st.floats(-20, 5), st.floats(-40, 10),
    st.integers(1, 6), st.integers(0, 5), st.floats(0.01, 5),
)
def test_log_score_matches_linear_and_is_monotone(lw, lc, lq, n_gm, extra, d):
    n_max = n_gm + extra
    s = log_normalized_score(lw, lc, lq, n_gm, n_max)
    assert s == pytest.approx(lw + lc + lq * n_max / n_gm)
    for bumped in (
        log_normalized_score(lw + d, lc, lq, n_gm, n_max),
        log_normalized_score(lw, lc + d, lq, n_gm, n_max),
        log_normalized_score(lw, lc, lq + d, n_gm, n_max),
    ):
        assert bumped > s


def test_ranking_invariant_to_common_rescaling(rng):
    # multiplying every L_Q (same N_gm) or every L_C by a constant keeps the order
    lw, lc, lq = rng.normal(size=(3, 50))
    base = np.argsort(-log_normalized_score(lw, lc, lq, 2, 3), kind="stable")
    shifted = np.argsort(-log_normalized_score(lw, lc + 4.0, lq - 7.0, 2, 3), kind="stable")
    assert np.array_equal(base, shifted)


# ---------------------------------------------------------------------------
# experts


def test_collision_far_cloud_is_free():
    pts = np.array([[1.0, 1.0, 1.0], [-2.0, 0.5, 3.0]])
    assert collision_expert(HAND, Pose.identity(), np.zeros(HAND.dof), pts) == 1.0


def test_collision_penalty_value():
    # a point 2 mm below the palm's top face
    pts = np.array([[0.0, 0.0, 0.008]])
    w = collision_expert(HAND, Pose.identity(), np.zeros(HAND.dof), pts, kappa=1000.0)
    assert w == pytest.approx(math.exp(-2.0), rel=1e-9)
    assert w == pytest.approx(0.135335, abs=1e-6)


def test_collision_decreases_with_depth():
    zs = np.linspace(0.0099, 0.0, 20)
    ws = [collision_expert(HAND, Pose.identity(), np.zeros(HAND.dof), [[0.0, 0.0, z]]) for z in zs]
    assert all(a > b for a, b in zip(ws, ws[1:]))


def test_grasp_likelihood_single_and_product():
    one = target_pair(links=(2,))
    two = target_pair(links=(2, 6))
    h_w = Pose([0.003, -0.002, 0.101], [0.02, 0.0, 0.0, 1.0])
    LP, LQ = HAND.forward_kinematics_arrays(h_w.p[None], h_w.q[None], H_TARGET[None])
    q2 = eval_query_naive(one.queries[0], Pose(LP[0, 2], LQ[0, 2]))
    q6 = eval_query_naive(two.queries[1], Pose(LP[0, 6], LQ[0, 6]))
    r1 = grasp_likelihood(HAND, h_w, H_TARGET, one)
    r2 = grasp_likelihood(HAND, h_w, H_TARGET, two)
    assert math.exp(r1["log_L_Q"]) == pytest.approx(q2, rel=1e-9)
    assert math.exp(r2["log_L_Q"]) == pytest.approx(q2 * q6, rel=1e-9)
    assert r2["log_L_C"] == pytest.approx(float(log_eval_config(two.config, H_TARGET)))
    assert r2["log_L_W"] == 0.0


def test_grasp_likelihood_log_domain_tiny_values():
    # far from the kernels the product underflows in linear space but not in logs
    pair = target_pair(links=(1, 2, 3, 4, 5, 6), sigma_p=0.001)
    h_w = Pose([0.05, 0.0, 0.1], [0.0, 0.0, 0.0, 1.0])
    r = grasp_likelihood(HAND, h_w, H_TARGET, pair)
    assert np.isfinite(r["log_L_Q"])
    assert r["log_L_Q"] < -745  # exp() would be 0.0


def test_grasp_likelihood_with_collision():
    pair = target_pair()
    r = grasp_likelihood(HAND, Pose.identity(), np.zeros(HAND.dof), pair, points=[[0.0, 0.0, 0.008]])
    assert r["log_L_W"] == pytest.approx(-2.0)


def test_pair_model_validation():
    p = target_pair()
    with pytest.raises(ValueError):
        PairModel("g", "v", [2], [], p.config)
    with pytest.raises(ValueError):
        PairModel("g", "v", [], [], p.config)


# ---------------------------------------------------------------------------
# seeds


def test_seed_link_pose_matches_sample(rng):
    pairs = [target_pair(), target_pair(links=(4,), grasp_id="h")]
    c = generate_seeds(pairs, HAND, 300, rng)
    LP, LQ = HAND.forward_kinematics_arrays(c.wp, c.wq, c.hc)
    idx = np.arange(len(c))
    assert np.max(np.abs(LP[idx, c.seed_link] - c.seed_p)) < 1e-6
    ang = quat_angle(LQ[idx, c.seed_link], c.seed_q)
    assert np.max(ang) < 1e-6
    # seeded links belong to the seed's pair
    for i in range(len(c)):
        assert c.seed_link[i] in pairs[c.pair[i]].links


def test_seeds_deterministic():
    pairs = [target_pair()]
    a = generate_seeds(pairs, HAND, 50, np.random.default_rng(3))
    b = generate_seeds(pairs, HAND, 50, np.random.default_rng(3))
    assert np.array_equal(a.wp, b.wp) and np.array_equal(a.wq, b.wq) and np.array_equal(a.hc, b.hc)


def test_seeds_need_pairs(rng):
    with pytest.raises(ValueError):
        generate_seeds([], HAND, 5, rng)


# ---------------------------------------------------------------------------
# optimisation


def test_best_so_far_never_decreases(rng):
    pairs = [target_pair()]
    seeds = generate_seeds(pairs, HAND, 100, rng)
    res = optimize(seeds, pairs, HAND, rng, AnnealSchedule(K=80, selection_steps=(1, 30)), record_history=True)
    for (ids0, b0), (ids1, b1) in zip(res.history, res.history[1:]):
        prev = dict(zip(ids0.tolist(), b0))
        for i, v in zip(ids1.tolist(), b1):
            assert v >= prev[i]


def test_optimisation_improves_on_seeds(rng):
    pairs = [target_pair()]
    seeds = generate_seeds(pairs, HAND, 100, rng)
    res = optimize(seeds, pairs, HAND, rng, AnnealSchedule(K=100, selection_steps=(1, 30)))
    assert res.solutions[0].log_score >= res.initial_best
    scores = [s.log_score for s in res.solutions]
    assert scores == sorted(scores, reverse=True)
    # two selection steps keeping 10% each: 100 -> 10 -> 1
    assert len(res.solutions) == 1


def test_optimise_ranks_by_collision_when_all_excluded(rng, caplog):
    pairs = [target_pair()]
    seeds = generate_seeds(pairs, HAND, 20, rng)
    res = optimize(seeds, pairs, HAND, rng, AnnealSchedule(K=5, selection_steps=(1,), survivor_fraction=1.0),
                   workspace=([5, 5, 5], [6, 6, 6]))
    assert "zero likelihood" in caplog.text
    assert len(res.solutions) == 20


def test_optimise_deterministic():
    pairs = [target_pair()]
    runs = []
    for _ in range(2):
        r = np.random.default_rng(9)
        seeds = generate_seeds(pairs, HAND, 40, r)
        runs.append(optimize(seeds, pairs, HAND, r, AnnealSchedule(K=30, selection_steps=(1, 10))))
    a, b = runs
    assert [s.log_score for s in a.solutions] == [s.log_score for s in b.solutions]


def test_evaluate_matches_grasp_likelihood(rng):
    pairs = [target_pair(), target_pair(links=(4,))]
    c = generate_seeds(pairs, HAND, 20, rng)
    lc, lq, s = evaluate(c, pairs, HAND, 2)
    for i in range(len(c)):
        r = grasp_likelihood(HAND, Pose(c.wp[i], c.wq[i]), c.hc[i], pairs[c.pair[i]])
        assert lq[i] == pytest.approx(r["log_L_Q"], rel=1e-9, abs=1e-9)
        assert lc[i] == pytest.approx(r["log_L_C"], rel=1e-9, abs=1e-9)
        n_gm = pairs[c.pair[i]].n_q
        assert s[i] == pytest.approx(lc[i] + lq[i] * 2 / n_gm)


def test_jsonl_round_trip(tmp_path):
    sols = [
        GraspSolution(Pose([0.1, 0.2, 0.3], [0, 0, 0.6, 0.8]), np.array([0.1] * 6), "g0", "g0/v1", -0.5, 2.0, -3.25, 2, 3),
        GraspSolution(Pose.identity(), np.zeros(6), "g1", "registered", -1e-3, -4.0, -np.float64(10.0), 3, 3),
    ]
    path = tmp_path / "out.jsonl"
    write_jsonl(sols, path)
    back = read_jsonl(path)
    for a, b in zip(sols, back):
        assert np.array_equal(a.h_w.p, b.h_w.p) and np.array_equal(a.h_w.q, b.h_w.q)
        assert np.array_equal(a.h_c, b.h_c)
        assert (a.grasp_id, a.view_id, a.n_q_gm, a.n_q_max) == (b.grasp_id, b.view_id, b.n_q_gm, b.n_q_max)
        assert a.log_score == b.log_score
    d = sols[0].to_dict()
    assert d["score"] == pytest.approx(d["L_W"] * d["L_C"] * d["L_Q"] ** (3 / 2))
