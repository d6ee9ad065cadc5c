"""Learning parameters and the persisted grasp model store."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cluster import ClusterPrototype
from .contact import ContactModel
from .density import Bandwidth, KernelSet
from .geometry import Pose
from .hand import HandConfigModel, HandModel

STORE_SCHEMA = "viewgrasp.store/1"


@dataclass
class Params:
    """Learning and inference parameters with their defaults."""

    # receptive field
    delta: float = 0.01
    lam: float = 50.0
    # kernel bandwidths (sigma_q is an angular std in radians)
    sigma_p: float = 0.005
    sigma_q: float = 0.5
    sigma_r: float = 10.0
    # contact / view selection
    eta: float = 0.2
    zeta: int = 3
    # clustering
    xi: float = 1.0
    w_lin: float = 1.0
    w_ang: float = 0.01
    # hand configuration model
    n_c: int = 1000
    alpha: float = 100.0
    beta: float = 1.0
    sigma_hc: float = 0.05
    # query density
    n_q: int = 5000
    phi: float = 1.0
    rho: float = 0.02
    n_mc: int = 1000
    query_jitter: bool = False
    # generation and optimisation
    h1: int = 50000
    K: int = 500
    selection_steps: tuple = (1, 50)
    survivor_fraction: float = 0.1
    T_start: float = 0.05
    T_end: float = 0.005
    kappa: float = 1000.0
    # surface features
    k_nn: int = 25

    def bandwidth(self) -> Bandwidth:
        return Bandwidth.from_angular(self.sigma_p, self.sigma_q, self.sigma_r)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selection_steps"] = list(self.selection_steps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Params:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown parameters: {sorted(unknown)}")
        d = dict(d)
        if "selection_steps" in d:
            d["selection_steps"] = tuple(d["selection_steps"])
        return cls(**d)

    def replace(self, **kw) -> Params:
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return Params.from_dict(d)


def _ks_to_dict(ks: KernelSet) -> dict:
    return {"p": ks.p.tolist(), "q": ks.q.tolist(), "r": ks.r.tolist(), "w": ks.w.tolist(), "bandwidth": ks.bandwidth.to_dict()}


def _ks_from_dict(d: dict) -> KernelSet:
    n = len(d["w"])
    r = np.array(d["r"], dtype=float).reshape(n, -1) if n else np.zeros((0, 2))
    return KernelSet(
        np.array(d["p"], dtype=float).reshape(n, 3),
        np.array(d["q"], dtype=float).reshape(n, 4),
        r,
        np.array(d["w"], dtype=float),
        Bandwidth.from_dict(d["bandwidth"]),
    )


def contact_model_to_dict(m: ContactModel) -> dict:
    return {
        "link": m.link,
        "view": m.view_id,
        "grasp": m.grasp_id,
        "norm": m.norm,
        "link_pose": None if m.link_pose is None else m.link_pose.to_list(),
        "kernels": _ks_to_dict(m.kernels),
    }


def contact_model_from_dict(d: dict) -> ContactModel:
    lp = None if d["link_pose"] is None else Pose.from_list(d["link_pose"])
    return ContactModel(_ks_from_dict(d["kernels"]), float(d["norm"]), int(d["link"]), d["view"], d["grasp"], lp)


@dataclass
class Cluster:
    """Members (indices into the retained models), P(k) and the exemplar position."""

    members: list
    probs: list
    exemplar: int


@dataclass
class ModelStore:
    hand: HandModel
    params: Params
    #: every contact model built, empty ones included (selection needs them)
    models: list
    #: indices of the retained (selected) models
    retained: list
    config_models: dict
    #: per grasp: {"h_g", "h_t", "h_w", "views", "source"}
    grasps: dict
    view_based: bool = True
    clusters: list | None = None
    merge_enabled: bool | None = None
    #: training examples (clouds included) used for retraining
    demos: list = field(default_factory=list)

    @property
    def retained_models(self) -> list:
        return [self.models[i] for i in self.retained]

    @property
    def merged(self) -> bool:
        return self.clusters is not None

    def prototypes(self, merge: bool = True) -> list:
        """Cluster prototypes over the retained models; singletons when not merging."""
        rm = self.retained_models
        if not merge:
            return [ClusterPrototype([m], np.ones(1), 0, k) for k, m in enumerate(rm)]
        if self.clusters is None:
            raise ValueError("store has not been merged; run merge first")
        return [
            ClusterPrototype([rm[i] for i in c.members], np.asarray(c.probs, dtype=float), c.exemplar, k)
            for k, c in enumerate(self.clusters)
        ]

    def to_dict(self) -> dict:
        return {
            "schema": STORE_SCHEMA,
            "hand": self.hand.to_dict(),
            "params": self.params.to_dict(),
            "view_based": self.view_based,
            "models": [contact_model_to_dict(m) for m in self.models],
            "retained": list(self.retained),
            "config_models": {g: c.to_dict() for g, c in self.config_models.items()},
            "grasps": self.grasps,
            "merge_enabled": self.merge_enabled,
            "clusters": None if self.clusters is None else [asdict(c) for c in self.clusters],
            "demos": self.demos,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelStore:
        if d.get("schema") != STORE_SCHEMA:
            raise ValueError(f"unsupported store schema {d.get('schema')!r} (expected {STORE_SCHEMA})")
        clusters = None if d["clusters"] is None else [Cluster(**c) for c in d["clusters"]]
        return cls(
            HandModel.from_dict(d["hand"]),
            Params.from_dict(d["params"]),
            [contact_model_from_dict(m) for m in d["models"]],
            list(d["retained"]),
            {g: HandConfigModel.from_dict(c) for g, c in d["config_models"].items()},
            d["grasps"],
            bool(d["view_based"]),
            clusters,
            d.get("merge_enabled"),
            d.get("demos", []),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> ModelStore:
        return cls.from_dict(json.loads(Path(path).read_text()))
