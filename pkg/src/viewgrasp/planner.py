"""Grasp generation and optimisation.

A candidate grasp is a wrist pose plus joint configuration, tied to one
retained grasp-view pair (g, m). Its likelihood is a product of experts:
the query densities of the pair's links evaluated at the link poses given
by forward kinematics, the hand-configuration density, and (at selection
steps) a collision penalty. Everything is computed in the log domain.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .density import sample, sample_vmf_pair
from .geometry import Pose, compose_arrays
from .hand import HandConfigModel, HandModel, log_eval_config, sample_config
from .query import QueryDensity, log_eval_query

log = logging.getLogger(__name__)

KAPPA_COLLISION = 1000.0
#: SA proposal scales: wrist position std = T * POS_SCALE (m), joint std = T * JOINT_SCALE (rad),
#: wrist orientation vMF concentration = ROT_CONCENTRATION / T
POS_SCALE = 0.1
JOINT_SCALE = 1.0
ROT_CONCENTRATION = 80.0


@dataclass
class PairModel:
    """A retained grasp-view pair: its links, their query densities, and C^g."""

    grasp_id: str
    view_id: str
    links: list
    queries: list
    config: HandConfigModel

    def __post_init__(self):
        if len(self.links) != len(self.queries):
            raise ValueError("every mapped link needs exactly one query density")
        if not self.links:
            raise ValueError(f"grasp-view pair ({self.grasp_id}, {self.view_id}) has no query densities")

    @property
    def n_q(self) -> int:
        return len(self.links)


@dataclass
class AnnealSchedule:
    K: int = 500
    T_start: float = 0.05
    T_end: float = 0.005
    selection_steps: tuple = (1, 50)
    survivor_fraction: float = 0.1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if any(not 1 <= s <= self.K for s in self.selection_steps):
            raise ValueError("selection steps must lie in [1, K]")
        if not 0 < self.survivor_fraction <= 1:
            raise ValueError("survivor fraction must lie in (0, 1]")

    def temperature(self, k: int) -> float:
        """Linear decline from T_start at step 1 to T_end at step K."""
        if self.K == 1:
            return self.T_start
        return self.T_start + (self.T_end - self.T_start) * (k - 1) / (self.K - 1)


def normalized_score(L_W, L_C, L_Q, n_q_gm: int, n_q_max: int):
    """L_W L_C L_Q^(N_max / N_gm)."""
    if n_q_gm < 1:
        raise ValueError("N_Q^gm must be at least 1")
    return L_W * L_C * L_Q ** (n_q_max / n_q_gm)


def log_normalized_score(log_W, log_C, log_Q, n_q_gm, n_q_max):
    return log_W + log_C + (np.asarray(n_q_max) / np.asarray(n_q_gm)) * log_Q


@dataclass
class GraspSolution:
    h_w: Pose
    h_c: np.ndarray
    grasp_id: str
    view_id: str
    log_L_W: float
    log_L_C: float
    log_L_Q: float
    n_q_gm: int
    n_q_max: int

    @property
    def L_W(self) -> float:
        return float(np.exp(self.log_L_W))

    @property
    def L_C(self) -> float:
        return float(np.exp(self.log_L_C))

    @property
    def L_Q(self) -> float:
        return float(np.exp(self.log_L_Q))

    @property
    def log_score(self) -> float:
        return float(log_normalized_score(self.log_L_W, self.log_L_C, self.log_L_Q, self.n_q_gm, self.n_q_max))

    @property
    def score(self) -> float:
        return float(np.exp(self.log_score))

    def to_dict(self) -> dict:
        return {
            "h_w": self.h_w.to_list(),
            "h_c": [float(v) for v in self.h_c],
            "source": {"grasp": self.grasp_id, "view": self.view_id},
            "L_W": self.L_W,
            "L_C": self.L_C,
            "L_Q": self.L_Q,
            "log_L_W": self.log_L_W,
            "log_L_C": self.log_L_C,
            "log_L_Q": self.log_L_Q,
            "n_q_gm": self.n_q_gm,
            "n_q_max": self.n_q_max,
            "score": self.score,
            "log_score": self.log_score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GraspSolution:
        return cls(
            Pose.from_list(d["h_w"]),
            np.array(d["h_c"], dtype=float),
            d["source"]["grasp"],
            d["source"]["view"],
            float(d["log_L_W"]),
            float(d["log_L_C"]),
            float(d["log_L_Q"]),
            int(d["n_q_gm"]),
            int(d["n_q_max"]),
        )


def write_jsonl(solutions, path) -> None:
    with open(path, "w") as fh:
        for s in solutions:
            fh.write(json.dumps(s.to_dict()) + "\n")


def read_jsonl(path) -> list:
    """Ranked grasps from a JSON-lines file; a leading run header is skipped."""
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [GraspSolution.from_dict(d) for d in rows if "report" not in d]


# ---------------------------------------------------------------------------
# experts


def penetration_depths(hand: HandModel, wp, wq, hc, points) -> np.ndarray:
    """Greatest depth of any cloud point inside the hand, per candidate (0 if none)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty cloud")
    LP, LQ = hand.forward_kinematics_arrays(np.atleast_2d(wp), np.atleast_2d(wq), np.atleast_2d(hc))
    return kernels.batch_max_penetration(points, LP, LQ, *hand.primitive_arrays())


def collision_expert(hand: HandModel, h_w: Pose, h_c, points, kappa: float = KAPPA_COLLISION) -> float:
    """W = exp(-κ d_pen); 1 when no cloud point is inside the hand."""
    d = penetration_depths(hand, h_w.p, h_w.q, np.asarray(h_c, dtype=float), points)[0]
    return float(np.exp(-kappa * d))


def log_query_product(pair: PairModel, LP, LQ) -> np.ndarray:
    """sum over the pair's links of log Q(link pose); LP/LQ are (C, L, 3/4)."""
    out = np.zeros(LP.shape[0])
    for link, Q in zip(pair.links, pair.queries):
        out += log_eval_query(Q, LP[:, link], LQ[:, link])
    return out


def grasp_likelihood(hand: HandModel, h_w: Pose, h_c, pair: PairModel, points=None, kappa: float = KAPPA_COLLISION) -> dict:
    """Per-expert log-likelihoods (collision only when ``points`` is given)."""
    h_c = np.asarray(h_c, dtype=float)
    LP, LQ = hand.forward_kinematics_arrays(h_w.p[None, :], h_w.q[None, :], h_c[None, :])
    out = {
        "log_L_Q": float(log_query_product(pair, LP, LQ)[0]),
        "log_L_C": float(log_eval_config(pair.config, h_c)),
        "log_L_W": 0.0,
    }
    if points is not None:
        out["log_L_W"] = float(-kappa * penetration_depths(hand, h_w.p, h_w.q, h_c, points)[0])
    return out


# ---------------------------------------------------------------------------
# candidate sets


@dataclass
class Candidates:
    wp: np.ndarray
    wq: np.ndarray
    hc: np.ndarray
    pair: np.ndarray
    seed_link: np.ndarray = field(default=None)
    #: the link pose each seed was generated from
    seed_p: np.ndarray = field(default=None)
    seed_q: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.wp)

    def take(self, idx) -> Candidates:
        sl, sp, sq = (None if a is None else a[idx] for a in (self.seed_link, self.seed_p, self.seed_q))
        return Candidates(self.wp[idx].copy(), self.wq[idx].copy(), self.hc[idx].copy(), self.pair[idx].copy(), sl, sp, sq)

    def copy(self) -> Candidates:
        return self.take(np.arange(len(self)))


def sample_query(Q: QueryDensity, rng: np.random.Generator, n: int):
    p, q, _ = sample(Q.as_kernel_set(), rng, n)
    return p, q


def generate_seeds(pairs, hand: HandModel, n: int, rng: np.random.Generator) -> Candidates:
    """Seed grasps: pair uniform, link uniform within it, s ~ Q, h_c ~ C^g, wrist solved from s."""
    if not pairs:
        raise ValueError("no retained grasp-view pairs")
    pair = rng.integers(len(pairs), size=n)
    wp = np.empty((n, 3))
    wq = np.empty((n, 4))
    hc = np.empty((n, hand.dof))
    links = np.empty(n, dtype=int)
    seed_p = np.empty((n, 3))
    seed_q = np.empty((n, 4))
    for g, pm in enumerate(pairs):
        rows = np.flatnonzero(pair == g)
        if rows.size == 0:
            continue
        which = rng.integers(pm.n_q, size=rows.size)
        h = hand.clamp(sample_config(pm.config, rng, rows.size))
        for j in range(pm.n_q):
            sel = rows[which == j]
            if sel.size == 0:
                continue
            sp, sq = sample_query(pm.queries[j], rng, sel.size)
            wp[sel], wq[sel] = hand.wrist_for_link(pm.links[j], sp, sq, h[which == j])
            seed_p[sel], seed_q[sel] = sp, sq
            links[sel] = pm.links[j]
        hc[rows] = h
    return Candidates(wp, wq, hc, pair, links, seed_p, seed_q)


def evaluate(cands: Candidates, pairs, hand: HandModel, n_q_max: int):
    """log L_C, log L_Q and the collision-free log score of every candidate."""
    LP, LQ = hand.forward_kinematics_arrays(cands.wp, cands.wq, cands.hc)
    log_C = np.empty(len(cands))
    log_Q = np.empty(len(cands))
    n_gm = np.empty(len(cands))
    for g, pm in enumerate(pairs):
        rows = np.flatnonzero(cands.pair == g)
        if rows.size == 0:
            continue
        log_C[rows] = log_eval_config(pm.config, cands.hc[rows]).reshape(-1)
        log_Q[rows] = log_query_product(pm, LP[rows], LQ[rows])
        n_gm[rows] = pm.n_q
    return log_C, log_Q, log_normalized_score(0.0, log_C, log_Q, n_gm, n_q_max)


def _log_collision(cands: Candidates, hand: HandModel, points, kappa: float) -> np.ndarray:
    if points is None:
        return np.zeros(len(cands))
    return -kappa * penetration_depths(hand, cands.wp, cands.wq, cands.hc, points)


def _in_workspace(cands: Candidates, workspace) -> np.ndarray:
    if workspace is None:
        return np.ones(len(cands), dtype=bool)
    lo, hi = (np.asarray(b, dtype=float) for b in workspace)
    return np.all((cands.wp >= lo) & (cands.wp <= hi), axis=1)


def propose(cands: Candidates, T: float, hand: HandModel, rng: np.random.Generator) -> Candidates:
    """Temperature-scaled perturbation of wrist position, wrist orientation and joints."""
    n = len(cands)
    wp = cands.wp + T * POS_SCALE * rng.standard_normal((n, 3))
    ident = np.tile([0.0, 0.0, 0.0, 1.0], (n, 1))
    dq = sample_vmf_pair(ident, ROT_CONCENTRATION / T, rng)
    _, wq = compose_arrays(np.zeros((n, 3)), cands.wq, np.zeros((n, 3)), dq)
    hc = hand.clamp(cands.hc + T * JOINT_SCALE * rng.standard_normal(cands.hc.shape))
    return Candidates(wp, wq, hc, cands.pair, cands.seed_link, cands.seed_p, cands.seed_q)


@dataclass
class OptimizationResult:
    solutions: list
    #: per step: (candidate ids, best-so-far collision-free log score)
    history: list
    initial_best: float
    timings: dict = field(default_factory=dict)


def _solution(c: Candidates, i: int, pairs, log_W, log_C, log_Q, n_q_max) -> GraspSolution:
    pm = pairs[c.pair[i]]
    return GraspSolution(Pose(c.wp[i], c.wq[i]), c.hc[i].copy(), pm.grasp_id, pm.view_id,
                         float(log_W[i]), float(log_C[i]), float(log_Q[i]), pm.n_q, n_q_max)


def optimize(
    seeds: Candidates,
    pairs,
    hand: HandModel,
    rng: np.random.Generator,
    schedule: AnnealSchedule | None = None,
    points=None,
    kappa: float = KAPPA_COLLISION,
    workspace=None,
    record_history: bool = False,
) -> OptimizationResult:
    """Simulated annealing with selection steps; returns solutions ranked by normalised score.

    Between selection steps the criterion is L_C L_Q^(N_max/N_gm); at
    selection steps the collision expert joins it, candidates are ranked on
    their best-so-far state and the top ``survivor_fraction`` continue from
    that state. Every candidate keeps its best state (elitism), and the best
    full score seen at any selection step is kept as well.
    """
    schedule = AnnealSchedule() if schedule is None else schedule
    if len(seeds) == 0:
        raise ValueError("no seed grasps")
    n_q_max = max(p.n_q for p in pairs)
    cur = seeds.copy()
    ids = np.arange(len(cur))
    _, _, cur_s = evaluate(cur, pairs, hand, n_q_max)
    best = cur.copy()
    best_s = cur_s.copy()
    # best full-score snapshot per candidate
    snap = cur.copy()
    snap_f = np.full(len(cur), -np.inf)
    history = []
    initial_best = -np.inf

    def full_scores(c):
        lc, lq, s = evaluate(c, pairs, hand, n_q_max)
        lw = _log_collision(c, hand, points, kappa)
        f = s + lw
        f[~_in_workspace(c, workspace)] = -np.inf
        return f, lw, lc, lq

    sel_steps = set(schedule.selection_steps)
    for k in range(1, schedule.K + 1):
        if k in sel_steps:
            f, *_ = full_scores(best)
            if k == 1:
                initial_best = float(f.max())
            better = f > snap_f
            snap_f = np.where(better, f, snap_f)
            snap.wp[better], snap.wq[better], snap.hc[better] = best.wp[better], best.wq[better], best.hc[better]
            keep_n = max(1, int(np.ceil(schedule.survivor_fraction * len(best))))
            order = np.argsort(-snap_f, kind="stable")[:keep_n]
            ids, best, best_s, snap, snap_f = ids[order], best.take(order), best_s[order], snap.take(order), snap_f[order]
            cur, cur_s = best.copy(), best_s.copy()
        T = schedule.temperature(k)
        prop = propose(cur, T, hand, rng)
        _, _, prop_s = evaluate(prop, pairs, hand, n_q_max)
        with np.errstate(invalid="ignore"):
            accept = np.log(rng.random(len(cur))) < (prop_s - cur_s) / T
        accept |= np.isfinite(prop_s) & ~np.isfinite(cur_s)
        cur.wp[accept], cur.wq[accept], cur.hc[accept] = prop.wp[accept], prop.wq[accept], prop.hc[accept]
        cur_s = np.where(accept, prop_s, cur_s)
        up = cur_s > best_s
        best.wp[up], best.wq[up], best.hc[up] = cur.wp[up], cur.wq[up], cur.hc[up]
        best_s = np.where(up, cur_s, best_s)
        if record_history:
            history.append((ids.copy(), best_s.copy()))

    f, lw, lc, lq = full_scores(best)
    final = best
    use_snap = snap_f > f
    if use_snap.any():
        sf, slw, slc, slq = full_scores(snap)
        final = best.copy()
        final.wp[use_snap], final.wq[use_snap], final.hc[use_snap] = snap.wp[use_snap], snap.wq[use_snap], snap.hc[use_snap]
        f, lw, lc, lq = (np.where(use_snap, a, b) for a, b in ((sf, f), (slw, lw), (slc, lc), (slq, lq)))
    if not np.isfinite(f).any():
        log.warning("every grasp has zero likelihood; ranking by collision penalty only")
        order = np.argsort(-lw, kind="stable")
    else:
        order = np.argsort(-f, kind="stable")
    sols = [_solution(final, i, pairs, lw, lc, lq, n_q_max) for i in order]
    return OptimizationResult(sols, history, initial_best)
