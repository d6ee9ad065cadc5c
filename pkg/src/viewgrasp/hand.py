"""Hand kinematics and the hand-configuration density.

The wrist frame has +z along the approach direction (out of the palm).
Every link frame sits at the link's geometric centre; a revolute joint
rotates its child about ``axis`` (expressed in the joint frame).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .geometry import Pose, axis_angle_quat, compose_arrays, inverse_arrays, quat_rotate

log = logging.getLogger(__name__)

HAND_SCHEMA = "viewgrasp.hand/1"


@dataclass(frozen=True)
class LinkPrimitive:
    """Capsule (segment ``a``-``b`` plus ``radius``) or box (centre ``a``, half extents ``b``)."""

    kind: str
    a: tuple
    b: tuple
    radius: float = 0.0

    def to_dict(self) -> dict:
        if self.kind == "capsule":
            return {"type": "capsule", "a": list(self.a), "b": list(self.b), "radius": self.radius}
        return {"type": "box", "center": list(self.a), "half_extents": list(self.b)}

    @classmethod
    def from_dict(cls, d: dict) -> LinkPrimitive:
        if d["type"] == "capsule":
            return cls("capsule", tuple(d["a"]), tuple(d["b"]), float(d["radius"]))
        if d["type"] == "box":
            return cls("box", tuple(d["center"]), tuple(d["half_extents"]))
        raise ValueError(f"unknown link primitive {d['type']!r}")


@dataclass(frozen=True)
class LinkGeometry:
    name: str
    primitives: tuple
    offset: Pose = field(default_factory=Pose.identity)

    def to_dict(self) -> dict:
        return {"name": self.name, "offset": self.offset.to_list(), "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> LinkGeometry:
        return cls(
            d["name"],
            tuple(LinkPrimitive.from_dict(p) for p in d["primitives"]),
            Pose.from_list(d.get("offset", [0, 0, 0, 0, 0, 0, 1])),
        )


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    child: int
    origin: Pose
    axis: tuple
    lower: float
    upper: float


class HandModel:
    """Kinematic tree rooted at the palm (link 0)."""

    def __init__(self, links, joints, name: str = "hand"):
        self.links = list(links)
        self.joints = list(joints)
        self.name = name
        if not self.links:
            raise ValueError("hand has no links")
        seen = {0}
        for j in self.joints:
            if j.parent not in seen:
                raise ValueError(f"joint {j.name}: parent link must precede child")
            if j.child in seen or not 0 < j.child < len(self.links):
                raise ValueError(f"joint {j.name}: invalid child link")
            if not (np.isfinite(j.lower) and np.isfinite(j.upper) and j.lower <= j.upper):
                raise ValueError(f"joint {j.name}: limits must be finite")
            seen.add(j.child)
        if len(seen) != len(self.links):
            raise ValueError("every non-root link needs exactly one parent joint")
        self._parent_joint = {j.child: k for k, j in enumerate(self.joints)}
        self.lower = np.array([j.lower for j in self.joints])
        self.upper = np.array([j.upper for j in self.joints])
        self._build_primitive_arrays()

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def link_names(self) -> list[str]:
        return [l.name for l in self.links]

    def _build_primitive_arrays(self):
        link, kind, a, b, rad = [], [], [], [], []
        for i, l in enumerate(self.links):
            for p in l.primitives:
                link.append(i)
                kind.append(0 if p.kind == "capsule" else 1)
                a.append(p.a)
                b.append(p.b)
                rad.append(p.radius)
        self.prim_link = np.array(link, dtype=np.int64)
        self.prim_type = np.array(kind, dtype=np.int64)
        self.prim_a = np.array(a, dtype=float).reshape(-1, 3)
        self.prim_b = np.array(b, dtype=float).reshape(-1, 3)
        self.prim_radius = np.array(rad, dtype=float)

    def primitive_arrays(self, link: int | None = None):
        if link is None:
            return self.prim_link, self.prim_type, self.prim_a, self.prim_b, self.prim_radius
        m = self.prim_link == link
        return np.zeros(m.sum(), dtype=np.int64), self.prim_type[m], self.prim_a[m], self.prim_b[m], self.prim_radius[m]

    def clamp(self, h_c):
        return np.clip(h_c, self.lower, self.upper)

    def forward_kinematics_arrays(self, wp, wq, h_c, clamp: bool = True):
        """Batched FK. ``wp`` (..., 3), ``wq`` (..., 4), ``h_c`` (..., D).

        Returns link positions (..., L, 3) and quaternions (..., L, 4).
        """
        h_c = np.asarray(h_c, dtype=float)
        if h_c.shape[-1] != self.dof:
            raise ValueError(f"configuration has {h_c.shape[-1]} values, hand has {self.dof} joints")
        if clamp:
            h_c = self.clamp(h_c)
        wp = np.asarray(wp, dtype=float)
        wq = np.asarray(wq, dtype=float)
        batch = np.broadcast_shapes(wp.shape[:-1], wq.shape[:-1], h_c.shape[:-1])
        P = np.empty(batch + (self.n_links, 3))
        Q = np.empty(batch + (self.n_links, 4))
        root = self.links[0].offset
        P[..., 0, :], Q[..., 0, :] = compose_arrays(wp, wq, root.p, root.q)
        for k, j in enumerate(self.joints):
            jp, jq = compose_arrays(P[..., j.parent, :], Q[..., j.parent, :], j.origin.p, j.origin.q)
            rq = axis_angle_quat(np.broadcast_to(np.asarray(j.axis, dtype=float), h_c.shape[:-1] + (3,)), h_c[..., k])
            jp, jq = compose_arrays(jp, jq, np.zeros(3), rq)
            off = self.links[j.child].offset
            P[..., j.child, :], Q[..., j.child, :] = compose_arrays(jp, jq, off.p, off.q)
        return P, Q

    def forward_kinematics(self, h_w: Pose, h_c) -> list[Pose]:
        """World pose of every link."""
        h_c = np.asarray(h_c, dtype=float)
        if h_c.shape != (self.dof,):
            raise ValueError(f"configuration must have {self.dof} values")
        clamped = self.clamp(h_c)
        if np.any(clamped != h_c):
            log.warning("forward_kinematics: configuration clamped to joint limits")
        P, Q = self.forward_kinematics_arrays(h_w.p, h_w.q, clamped, clamp=False)
        return [Pose(P[i], Q[i]) for i in range(self.n_links)]

    def wrist_for_link(self, link: int, s_p, s_q, h_c):
        """Wrist pose placing ``link`` exactly at ``(s_p, s_q)``: h_w = s ∘ rest(h_c)^-1."""
        h_c = np.asarray(h_c, dtype=float)
        ident_p = np.zeros(h_c.shape[:-1] + (3,))
        ident_q = np.zeros(h_c.shape[:-1] + (4,))
        ident_q[..., 3] = 1.0
        RP, RQ = self.forward_kinematics_arrays(ident_p, ident_q, h_c)
        ip, iq = inverse_arrays(RP[..., link, :], RQ[..., link, :])
        return compose_arrays(s_p, s_q, ip, iq)

    def link_surface_points(self, link: int, spacing: float = 0.004) -> np.ndarray:
        """Points on the link surface in the link frame (for visualisation/tests)."""
        pts = []
        for prim in self.links[link].primitives:
            a = np.asarray(prim.a, dtype=float)
            b = np.asarray(prim.b, dtype=float)
            if prim.kind == "capsule":
                axis = b - a
                length = np.linalg.norm(axis)
                n_ax = max(int(length / spacing), 1) + 1
                n_c = max(int(2 * np.pi * prim.radius / spacing), 6)
                u = axis / length if length > 0 else np.array([0.0, 0.0, 1.0])
                t1 = np.cross(u, [1.0, 0, 0] if abs(u[0]) < 0.9 else [0, 1.0, 0])
                t1 /= np.linalg.norm(t1)
                t2 = np.cross(u, t1)
                th = np.linspace(0, 2 * np.pi, n_c, endpoint=False)
                ring = prim.radius * (np.cos(th)[:, None] * t1 + np.sin(th)[:, None] * t2)
                for s in np.linspace(0, 1, n_ax):
                    pts.append(a + s * axis + ring)
            else:
                g = [np.linspace(-h, h, max(int(2 * h / spacing), 1) + 1) for h in b]
                X, Y, Z = np.meshgrid(*g, indexing="ij")
                cube = np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1)
                on = np.any(np.isclose(np.abs(cube), b), axis=1)
                pts.append(a + cube[on])
        return np.concatenate(pts)

    # -- serialisation -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema": HAND_SCHEMA,
            "name": self.name,
            "links": [l.to_dict() for l in self.links],
            "joints": [
                {
                    "name": j.name,
                    "parent": self.links[j.parent].name,
                    "child": self.links[j.child].name,
                    "origin": j.origin.to_list(),
                    "axis": list(j.axis),
                    "lower": j.lower,
                    "upper": j.upper,
                }
                for j in self.joints
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> HandModel:
        if d.get("schema") != HAND_SCHEMA:
            raise ValueError(f"unsupported hand schema {d.get('schema')!r}")
        links = [LinkGeometry.from_dict(l) for l in d["links"]]
        index = {l.name: i for i, l in enumerate(links)}
        joints = [
            Joint(
                j["name"],
                index[j["parent"]],
                index[j["child"]],
                Pose.from_list(j["origin"]),
                tuple(float(v) for v in j["axis"]),
                float(j["lower"]),
                float(j["upper"]),
            )
            for j in d["joints"]
        ]
        return cls(links, joints, d.get("name", "hand"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> HandModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


# geometry of the default three-finger hand (metres)
PALM_HALF = (0.045, 0.05, 0.01)
FINGER_BASE_Y = 0.04
FINGER_X = (0.025, -0.025)
PROX_LEN = 0.05
DIST_LEN = 0.04
PHALANX_RADIUS = 0.008


def default_hand() -> HandModel:
    """Palm plus three two-phalanx fingers (7 links, 6 revolute joints).

    Two fingers sit on the +y edge of the palm and a thumb on the -y edge;
    positive joint angles close every finger towards the palm's mid-plane.
    """
    palm_face = PALM_HALF[2]
    links = [LinkGeometry("palm", (LinkPrimitive("box", (0.0, 0.0, 0.0), PALM_HALF),))]
    joints = []

    def add_finger(name, x, y, axis):
        prox = LinkGeometry(
            f"{name}_prox",
            (LinkPrimitive("capsule", (0, 0, -PROX_LEN / 2), (0, 0, PROX_LEN / 2), PHALANX_RADIUS),),
            Pose([0, 0, PROX_LEN / 2], [0, 0, 0, 1]),
        )
        dist = LinkGeometry(
            f"{name}_dist",
            (LinkPrimitive("capsule", (0, 0, -DIST_LEN / 2), (0, 0, DIST_LEN / 2), PHALANX_RADIUS),),
            Pose([0, 0, DIST_LEN / 2], [0, 0, 0, 1]),
        )
        links.append(prox)
        pi = len(links) - 1
        joints.append(Joint(f"{name}_j1", 0, pi, Pose([x, y, palm_face], [0, 0, 0, 1]), axis, -0.6, 1.6))
        links.append(dist)
        joints.append(Joint(f"{name}_j2", pi, pi + 1, Pose([0, 0, PROX_LEN / 2], [0, 0, 0, 1]), axis, -0.6, 1.6))

    add_finger("f1", FINGER_X[0], FINGER_BASE_Y, (1.0, 0.0, 0.0))
    add_finger("f2", FINGER_X[1], FINGER_BASE_Y, (1.0, 0.0, 0.0))
    add_finger("th", 0.0, -FINGER_BASE_Y, (-1.0, 0.0, 0.0))
    return HandModel(links, joints, "three-finger")


# ---------------------------------------------------------------------------
# hand configuration model


@dataclass
class HandConfigModel:
    """Gaussian mixture over joint configurations for one grasp."""

    centers: np.ndarray
    weights: np.ndarray
    sigma: float
    grasp_id: str = ""

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def to_dict(self) -> dict:
        return {
            "grasp_id": self.grasp_id,
            "sigma": self.sigma,
            "centers": self.centers.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> HandConfigModel:
        return cls(np.array(d["centers"]), np.array(d["weights"]), float(d["sigma"]), d.get("grasp_id", ""))


def build_config_model(h_g, h_t, alpha=100.0, beta=1.0, n_kernels=1000, sigma_hc=0.05, grasp_id="") -> HandConfigModel:
    """Kernels along h(γ) = (1-γ) h_g + γ h_t for γ regularly spaced on [-β, β].

    At most ``n_kernels`` kernels; the count is made odd so the grid holds
    γ = 0 (the demonstrated configuration) as well as both ends.
    """
    h_g = np.asarray(h_g, dtype=float)
    h_t = np.asarray(h_t, dtype=float)
    if h_g.shape != h_t.shape:
        raise ValueError("h_g and h_t must have the same dimension")
    if beta <= 0:
        raise ValueError("beta must be positive")
    n = max(n_kernels - (1 - n_kernels % 2), 1)
    gamma = np.linspace(-beta, beta, n)
    if n > 1:
        gamma[n // 2] = 0.0
    centers = (1.0 - gamma)[:, None] * h_g + gamma[:, None] * h_t
    logw = -alpha * np.sum((centers - h_g) ** 2, axis=1)
    w = np.exp(logw - logw.max())
    return HandConfigModel(centers, w / w.sum(), float(sigma_hc), grasp_id)


def log_eval_config(C: HandConfigModel, h_c) -> np.ndarray:
    if len(C) == 0:
        raise ValueError("empty configuration model")
    h_c = np.asarray(h_c, dtype=float)
    single = h_c.ndim == 1
    h = h_c.reshape(-1, C.dim)
    d2 = np.sum(h * h, 1)[:, None] + np.sum(C.centers**2, 1)[None, :] - 2 * h @ C.centers.T
    np.maximum(d2, 0.0, out=d2)
    with np.errstate(divide="ignore"):
        logw = np.log(C.weights)
    lg = -0.5 * d2 / C.sigma**2 - C.dim * (np.log(C.sigma) + 0.5 * np.log(2 * np.pi))
    out = logsumexp(lg + logw[None, :], axis=1)
    return out[0] if single else out


def eval_config(C: HandConfigModel, h_c):
    """C(h_c) = sum_γ w(γ) N_D(h_c | h(γ), sigma)."""
    return np.exp(log_eval_config(C, h_c))


def sample_config(C: HandConfigModel, rng: np.random.Generator, n: int | None = None):
    if len(C) == 0:
        raise ValueError("empty configuration model")
    m = 1 if n is None else n
    cdf = np.cumsum(C.weights)
    idx = np.minimum(np.searchsorted(cdf, rng.random(m) * cdf[-1], side="right"), len(C) - 1)
    out = C.centers[idx] + C.sigma * rng.standard_normal((m, C.dim))
    return out[0] if n is None else out


def mixture_mean(C: HandConfigModel) -> np.ndarray:
    return C.weights @ C.centers


def link_axis(q) -> np.ndarray:
    """Link z axis (the capsule axis for phalanges)."""
    return quat_rotate(q, np.array([0.0, 0.0, 1.0]))
