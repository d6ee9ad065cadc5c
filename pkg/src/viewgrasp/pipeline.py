"""Training, merging, inference and autonomous training.

Variants follow the ablation axes: A1 trains on the registered cloud of all
views and weights query kernels by the descriptor marginal without merging;
A2 adds view-based models; A3 adds the divergence weight; A4 adds merging.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import SurfaceIndex, cluster_contact_models
from .contact import build_contact_model, select_contacts
from .density import DegenerateConditional
from .geometry import Pose
from .hand import HandModel, build_config_model
from .planner import AnnealSchedule, PairModel, generate_seeds, optimize
from .query import WEIGHT_DIVERGENCE, WEIGHT_MARGINAL, form_query_density
from .store import Cluster, ModelStore, Params
from .surface import (
    Camera,
    PointCloud,
    Scene,
    estimate_normals,
    merge_clouds,
    principal_curvature_features,
    read_ply,
    simulate_depth_view,
    write_ply,
)

log = logging.getLogger(__name__)

REGISTERED_VIEW = "registered"
QUERY_TIME = "Query density computation"
OPTIMISATION_TIME = "Generation & Optimisation"

#: variant -> (view-based, weight rule, merge)
VARIANTS = {
    "A1": (False, WEIGHT_MARGINAL, False),
    "A2": (True, WEIGHT_MARGINAL, False),
    "A3": (True, WEIGHT_DIVERGENCE, False),
    "A4": (True, WEIGHT_DIVERGENCE, True),
}


# ---------------------------------------------------------------------------
# demonstrations


@dataclass
class Demonstration:
    """One demonstrated grasp: world-frame view clouds, final wrist pose, h_t and h_g."""

    grasp_id: str
    clouds: list
    h_w: Pose
    h_g: np.ndarray
    h_t: np.ndarray
    cameras: list = field(default_factory=list)
    view_ids: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    origin: str = "demo"

    def __post_init__(self):
        self.h_g = np.asarray(self.h_g, dtype=float)
        self.h_t = np.asarray(self.h_t, dtype=float)
        if not self.clouds:
            raise ValueError(f"grasp {self.grasp_id}: no view clouds")
        if self.h_g.shape != self.h_t.shape:
            raise ValueError(f"grasp {self.grasp_id}: h_g and h_t differ in length")
        if not self.view_ids:
            self.view_ids = [f"v{k}" for k in range(len(self.clouds))]

    def to_dict(self) -> dict:
        views = []
        for k, c in enumerate(self.clouds):
            views.append({
                "view_id": self.view_ids[k],
                "points": c.points.tolist(),
                "viewpoint": c.viewpoint.tolist(),
                "camera": self.cameras[k].pose.to_list() if k < len(self.cameras) else None,
            })
        return {
            "grasp_id": self.grasp_id,
            "h_w": self.h_w.to_list(),
            "h_g": self.h_g.tolist(),
            "h_t": self.h_t.tolist(),
            "origin": self.origin,
            "views": views,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Demonstration:
        clouds = [PointCloud(np.array(v["points"], dtype=float), None, np.array(v["viewpoint"], dtype=float)) for v in d["views"]]
        cams = [Camera(Pose.from_list(v["camera"])) for v in d["views"] if v.get("camera") is not None]
        return cls(d["grasp_id"], clouds, Pose.from_list(d["h_w"]), d["h_g"], d["h_t"], cams,
                   [v["view_id"] for v in d["views"]], origin=d.get("origin", "demo"))


def write_demo(demo: Demonstration, directory) -> None:
    """Demonstration directory: one PLY per view plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    views = []
    for k, c in enumerate(demo.clouds):
        name = f"{demo.view_ids[k]}.ply"
        write_ply(d / name, c)
        views.append({
            "view_id": demo.view_ids[k],
            "cloud": name,
            "camera": demo.cameras[k].pose.to_list() if k < len(demo.cameras) else None,
        })
    manifest = {
        "grasp_id": demo.grasp_id,
        "wrist": demo.h_w.to_list(),
        "trajectory": [p.to_list() for p in demo.trajectory],
        "h_t": demo.h_t.tolist(),
        "h_g": demo.h_g.tolist(),
        "views": views,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_demo(directory) -> Demonstration:
    d = Path(directory)
    try:
        m = json.loads((d / "manifest.json").read_text())
        clouds = [read_ply(d / v["cloud"]) for v in m["views"]]
        cams = [Camera(Pose.from_list(v["camera"])) for v in m["views"] if v.get("camera") is not None]
        traj = [Pose.from_list(p) for p in m.get("trajectory", [])]
        return Demonstration(m["grasp_id"], clouds, Pose.from_list(m["wrist"]), m["h_g"], m["h_t"], cams,
                             [v["view_id"] for v in m["views"]], traj)
    except (KeyError, TypeError, ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        raise ValueError(f"malformed demonstration in {d}: {e}") from e


def read_demos(directory) -> list:
    """Every sub-directory holding a ``manifest.json``, in name order."""
    root = Path(directory)
    if (root / "manifest.json").exists():
        return [read_demo(root)]
    dirs = sorted(p.parent for p in root.glob("*/manifest.json"))
    if not dirs:
        raise ValueError(f"no demonstrations found in {root}")
    return [read_demo(p) for p in dirs]


# ---------------------------------------------------------------------------
# training


def view_models(demo: Demonstration, params: Params, view_based: bool = True) -> list:
    """Object-view models of a demonstration: one per view, or one for the registered cloud."""
    bw = params.bandwidth()
    clouds = [estimate_normals(c, params.k_nn) for c in demo.clouds]
    if view_based:
        return [principal_curvature_features(c, params.k_nn, bw, vid, demo.grasp_id) for c, vid in zip(clouds, demo.view_ids)]
    return [principal_curvature_features(merge_clouds(clouds), params.k_nn, bw, REGISTERED_VIEW, demo.grasp_id)]


def train(demos, hand: HandModel, params: Params | None = None, view_based: bool = True) -> ModelStore:
    """Contact models per (link, view, grasp), selection, and hand-configuration models."""
    params = Params() if params is None else params
    demos = list(demos)
    if not demos:
        raise ValueError("no demonstrations")
    ids = [d.grasp_id for d in demos]
    if len(set(ids)) != len(ids):
        raise ValueError("grasp ids must be unique")
    bw = params.bandwidth()
    models = []
    config_models = {}
    grasps = {}
    for demo in demos:
        if demo.h_g.shape != (hand.dof,):
            raise ValueError(f"grasp {demo.grasp_id}: configuration has {demo.h_g.size} values, hand has {hand.dof} joints")
        P, Q = hand.forward_kinematics_arrays(demo.h_w.p, demo.h_w.q, demo.h_g)
        views = view_models(demo, params, view_based)
        built = [
            build_contact_model(V, hand.links[i], Pose(P[i], Q[i]), bw, params.lam, params.delta, i)
            for V in views
            for i in range(hand.n_links)
        ]
        if not any(m.norm > 0 for m in built):
            raise ValueError(f"grasp {demo.grasp_id}: no hand link within delta={params.delta} of any view")
        models.extend(built)
        config_models[demo.grasp_id] = build_config_model(
            demo.h_g, demo.h_t, params.alpha, params.beta, params.n_c, params.sigma_hc, demo.grasp_id
        )
        grasps[demo.grasp_id] = {
            "h_g": demo.h_g.tolist(),
            "h_t": demo.h_t.tolist(),
            "h_w": demo.h_w.to_list(),
            "views": [V.view_id for V in views],
            "origin": demo.origin,
        }
    sel = select_contacts({m.key: m.norm for m in models}, params.eta, params.zeta, hand.n_links)
    keep = set(sel.retained)
    retained = [k for k, m in enumerate(models) if m.key in keep]
    if not retained:
        raise ValueError("no view hypotheses retained: every grasp-view pair has too few contacting links")
    log.info("training: %d contact models, %d retained", len(models), len(retained))
    return ModelStore(hand, params, models, retained, config_models, grasps, view_based,
                      demos=[d.to_dict() for d in demos])


def merge(store: ModelStore, enabled: bool = True) -> ModelStore:
    """Cluster the retained contact models into prototypes (idempotent)."""
    if store.merged and store.merge_enabled == enabled:
        log.info("store already merged (merge=%s); nothing to do", enabled)
        return store
    p = store.params
    rm = store.retained_models
    protos, labels, _ = cluster_contact_models(rm, p.xi, p.w_lin, p.w_ang, merge=enabled)
    clusters = []
    for c, proto in enumerate(protos):
        members = [int(i) for i in np.flatnonzero(labels == c)]
        clusters.append(Cluster(members, [float(v) for v in proto.probs], int(proto.exemplar)))
    store.clusters = clusters
    store.merge_enabled = enabled
    log.info("merge: %d contact models -> %d prototypes (compression %.2f)", len(rm), len(clusters), compression_ratio(store))
    return store


def compression_ratio(store: ModelStore) -> float:
    if not store.merged or not store.clusters:
        return 1.0
    return len(store.retained) / len(store.clusters)


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferenceReport:
    variant: str
    seed: int
    solutions: list
    timings: dict
    n_prototypes: int
    n_pairs: int
    initial_best: float = -np.inf
    skipped_prototypes: list = field(default_factory=list)

    def header(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "timings": self.timings,
            "n_prototypes": self.n_prototypes,
            "n_pairs": self.n_pairs,
            "skipped_prototypes": self.skipped_prototypes,
        }

    def write_jsonl(self, path, top: int | None = None) -> None:
        """First line: run header with timings; then one ranked grasp per line."""
        with open(path, "w") as fh:
            fh.write(json.dumps({"report": self.header()}) + "\n")
            for s in self.solutions[:top]:
                fh.write(json.dumps(s.to_dict()) + "\n")


def query_view_model(cloud: PointCloud, params: Params):
    if len(cloud) == 0:
        raise ValueError("empty test cloud")
    if cloud.normals is None:
        cloud = estimate_normals(cloud, params.k_nn)
    return principal_curvature_features(cloud, params.k_nn, params.bandwidth(), "test", "")


def build_pairs(store: ModelStore, queries: dict, merge_models: bool) -> list:
    """Grasp-view pairs with the query density of every retained link."""
    rm = store.retained_models
    proto_of = {}
    if merge_models:
        for c, cl in enumerate(store.clusters):
            for i in cl.members:
                proto_of[i] = c
    else:
        proto_of = {i: i for i in range(len(rm))}
    groups = {}
    for i, m in enumerate(rm):
        groups.setdefault((m.grasp_id, m.view_id), []).append(i)
    pairs = []
    for (g, v), idx in groups.items():
        links, qs = [], []
        for i in sorted(idx, key=lambda i: rm[i].link):
            Q = queries.get(proto_of[i])
            if Q is None:
                continue
            links.append(rm[i].link)
            qs.append(Q)
        if links:
            pairs.append(PairModel(g, v, links, qs, store.config_models[g]))
        else:
            log.warning("grasp-view pair (%s, %s) has no usable query densities", g, v)
    return pairs


def infer(store: ModelStore, cloud: PointCloud, variant: str = "A4", seed: int = 0, params: Params | None = None,
          workspace=None) -> InferenceReport:
    """Query densities, seed generation and annealing on one test cloud."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    view_based, rule, merge_models = VARIANTS[variant]
    if store.view_based != view_based:
        mode = "view-based" if view_based else "registered-cloud"
        raise ValueError(f"variant {variant} needs a store trained in {mode} mode")
    params = store.params if params is None else params
    rng = np.random.default_rng(seed)

    t0 = time.perf_counter()
    V = query_view_model(cloud, params)
    protos = store.prototypes(merge_models)
    index = SurfaceIndex(V.positions, V.normals, params.w_lin, params.w_ang)
    queries = {}
    skipped = []
    for k, proto in enumerate(protos):
        try:
            queries[k] = form_query_density(V, proto, params.n_q, params.phi, rng, rule, params.rho, params.n_mc,
                                            params.w_lin, params.w_ang, view_index=index,
                                            jitter=params.query_jitter)
        except DegenerateConditional as e:
            log.warning("prototype %d skipped: %s", k, e)
            skipped.append(k)
    pairs = build_pairs(store, queries, merge_models)
    t1 = time.perf_counter()
    if not pairs:
        raise ValueError("no feasible seeds: no grasp-view pair has a query density on this cloud")
    seeds = generate_seeds(pairs, store.hand, params.h1, rng)
    schedule = AnnealSchedule(params.K, params.T_start, params.T_end,
                              tuple(s for s in params.selection_steps if s <= params.K), params.survivor_fraction)
    res = optimize(seeds, pairs, store.hand, rng, schedule, cloud.points, params.kappa, workspace)
    t2 = time.perf_counter()
    timings = {QUERY_TIME: t1 - t0, OPTIMISATION_TIME: t2 - t1}
    return InferenceReport(variant, seed, res.solutions, timings, len(protos), len(pairs), res.initial_best, skipped)


# ---------------------------------------------------------------------------
# geometric success check


@dataclass
class SuccessResult:
    success: bool
    contacts: list
    opposition_deg: float
    penetration: float


def geometric_success_check(hand: HandModel, h_w: Pose, h_c, scene: Scene, contact_tol: float = 0.003,
                            opposition_deg: float = 120.0, max_penetration: float = 0.003,
                            spacing: float = 0.002) -> SuccessResult:
    """Desk-scale stand-in for executing a grasp.

    Succeeds when at least two links touch the object surface within
    ``contact_tol``, their contact normals span at least ``opposition_deg``,
    and no link penetrates deeper than ``max_penetration``.
    """
    LP, LQ = hand.forward_kinematics_arrays(h_w.p, h_w.q, np.asarray(h_c, dtype=float))
    contacts = []
    normals = []
    pen = 0.0
    for i in range(hand.n_links):
        local = hand.link_surface_points(i, spacing)
        world = Pose(LP[i], LQ[i]).transform_points(local)
        sdf = scene.sdf(world)
        pen = max(pen, float(-sdf.min()))
        if sdf.min() <= contact_tol:
            contacts.append(i)
            normals.append(scene.surface_normal(world[np.argmin(sdf)][None, :])[0])
    spread = 0.0
    for a in range(len(normals)):
        for b in range(a + 1, len(normals)):
            spread = max(spread, float(np.degrees(np.arccos(np.clip(normals[a] @ normals[b], -1.0, 1.0)))))
    pen = max(pen, 0.0)
    ok = len(contacts) >= 2 and spread >= opposition_deg and pen <= max_penetration
    return SuccessResult(ok, contacts, spread, pen)


# ---------------------------------------------------------------------------
# autonomous training


@dataclass
class SelfTrainReport:
    rounds: list
    added: int
    halted: bool


def selftrain(store: ModelStore, scenes, rounds: int = 1, variant: str = "A4", seed: int = 0,
              params: Params | None = None, noise_std: float = 0.0) -> tuple:
    """Infer on each scene, keep geometrically successful grasps as new examples, retrain.

    ``scenes`` is a list of ``(name, Scene, Camera)``. Scene ``j`` is always
    evaluated by a model trained without the examples gained on scene ``j``.
    Returns the (possibly new) store and a report; a round with no new
    success halts the loop and leaves the store unchanged.
    """
    view_based, _, merge_models = VARIANTS[variant]
    params = store.params if params is None else params
    base = [Demonstration.from_dict(d) for d in store.demos if not d.get("origin", "demo").startswith("scene:")]
    gained = {d["origin"][len("scene:"):]: Demonstration.from_dict(d) for d in store.demos if d.get("origin", "").startswith("scene:")}
    rng = np.random.default_rng(seed)
    report = []
    total = 0
    halted = False
    for r in range(rounds):
        new = {}
        outcomes = []
        for name, scene, cam in scenes:
            if name in gained:
                continue
            others = [d for k, d in gained.items() if k != name]
            model = train(base + others, store.hand, params, view_based)
            if merge_models:
                merge(model, True)
            cloud = simulate_depth_view(scene, cam, noise_std, rng)
            rep = infer(model, cloud, variant, int(rng.integers(2**31)), params)
            top = rep.solutions[0]
            res = geometric_success_check(store.hand, top.h_w, top.h_c, scene)
            outcomes.append({"scene": name, "success": res.success, "contacts": res.contacts,
                             "opposition_deg": res.opposition_deg, "penetration": res.penetration})
            if res.success:
                src = store.grasps.get(top.grasp_id) or model.grasps[top.grasp_id]
                offset = np.asarray(src["h_t"]) - np.asarray(src["h_g"])
                new[name] = Demonstration(f"st-{name}", [cloud], top.h_w, top.h_c, top.h_c + offset,
                                          [cam], ["v0"], origin=f"scene:{name}")
        report.append({"round": r + 1, "new_successes": len(new), "outcomes": outcomes})
        if not new:
            halted = True
            log.info("selftrain: round %d found no new successes; stopping", r + 1)
            break
        gained.update(new)
        total += len(new)
    if total == 0:
        return store, SelfTrainReport(report, 0, halted)
    out = train(base + list(gained.values()), store.hand, params, view_based)
    if store.merged:
        merge(out, bool(store.merge_enabled))
    return out, SelfTrainReport(report, total, halted)


def load_scene_set(directory) -> list:
    """Scene files (``*.json``) with a ``camera`` pose next to the primitives."""
    out = []
    for path in sorted(Path(directory).glob("*.json")):
        d = json.loads(path.read_text())
        if "camera" not in d:
            raise ValueError(f"scene {path} has no camera pose")
        cam = d["camera"]
        camera = Camera(Pose.from_list(cam["pose"]), cam.get("width", 160), cam.get("height", 120), cam.get("fov_deg", 45.0)) \
            if isinstance(cam, dict) else Camera(Pose.from_list(cam))
        out.append((path.stem, Scene.from_dict(d), camera))
    if not out:
        raise ValueError(f"no scene files in {directory}")
    return out
