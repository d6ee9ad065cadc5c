"""Contact receptive fields, contact models and contact/view selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .density import Bandwidth, KernelSet
from .geometry import Pose, inverse_arrays, quat_rotate, relative_arrays
from .hand import LinkGeometry
from .kernels import links_sdf_numpy
from .surface import ObjectViewModel

log = logging.getLogger(__name__)

Z_AXIS = np.array([0.0, 0.0, 1.0])


def link_surface_distance(points, link: LinkGeometry, s: Pose) -> np.ndarray:
    """Distance ``||p - a||`` from world points to the closest point ``a`` on the link surface."""
    prims = link.primitives
    sdf = links_sdf_numpy(
        np.atleast_2d(np.asarray(points, dtype=float)),
        s.p[None, :],
        s.q[None, :],
        np.zeros(len(prims), dtype=np.int64),
        np.array([0 if p.kind == "capsule" else 1 for p in prims]),
        np.array([p.a for p in prims], dtype=float),
        np.array([p.b for p in prims], dtype=float),
        np.array([p.radius for p in prims], dtype=float),
    )
    d = sdf.min(axis=0)
    # inside the union the surface distance is |sdf| (approximate for overlapping parts)
    return np.abs(d)


def receptive_field_from_distance(dist, lam: float, delta: float):
    if lam <= 0 or delta <= 0:
        raise ValueError("lambda and delta must be positive")
    dist = np.asarray(dist, dtype=float)
    return np.where(dist < delta, np.exp(-lam * dist * dist), 0.0)


def receptive_field(p, link: LinkGeometry, s: Pose, lam: float = 50.0, delta: float = 0.01):
    """exp(-λ||p - a||²) inside the cut-off δ, 0 outside."""
    return receptive_field_from_distance(link_surface_distance(p, link, s), lam, delta)


@dataclass
class ContactModel:
    """Density over link poses ``u`` relative to surface features, with descriptors.

    ``kernels.p``/``kernels.q`` hold ``u_j = v_j^-1 ∘ s``; the norm is the
    summed receptive-field response over the view.
    """

    kernels: KernelSet
    norm: float
    link: int
    view_id: str
    grasp_id: str
    link_pose: Pose | None = None
    _feature_frame: tuple | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.kernels)

    @property
    def empty(self) -> bool:
        return len(self.kernels) == 0

    @property
    def key(self) -> tuple:
        return (self.link, self.view_id, self.grasp_id)

    def feature_frame(self):
        """Surface feature positions and normals in the link frame (u^-1)."""
        if self._feature_frame is None:
            fp, fq = inverse_arrays(self.kernels.p, self.kernels.q)
            self._feature_frame = (fp, quat_rotate(fq, Z_AXIS))
        return self._feature_frame


def build_contact_model(
    view: ObjectViewModel,
    link: LinkGeometry,
    s: Pose,
    bandwidth: Bandwidth,
    lam: float = 50.0,
    delta: float = 0.01,
    link_index: int = 0,
) -> ContactModel:
    """One kernel per feature with non-zero receptive-field response."""
    if len(view) == 0:
        raise ValueError("empty object-view model")
    F = receptive_field(view.positions, link, s, lam, delta)
    keep = F > 0
    norm = float(F.sum())
    if not keep.any():
        log.info("contact model link=%d view=%s grasp=%s is empty", link_index, view.view_id, view.grasp_id)
        ks = KernelSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, view.features.descriptor_dim)), np.zeros(0), bandwidth)
        return ContactModel(ks, 0.0, link_index, view.view_id, view.grasp_id, s)
    vp = view.features.p[keep]
    vq = view.features.q[keep]
    up, uq = relative_arrays(vp, vq, s.p, s.q)
    ks = KernelSet(up, uq, view.features.r[keep], F[keep] / norm, bandwidth)
    return ContactModel(ks, norm, link_index, view.view_id, view.grasp_id, s)


@dataclass
class SelectionResult:
    b: dict
    c: dict
    retained: list

    def __contains__(self, key) -> bool:
        return key in set(self.retained)


def select_contacts(norms: dict, eta: float = 0.2, zeta: int = 3, n_links: int | None = None) -> SelectionResult:
    """Contact hypotheses b and view hypotheses c.

    ``norms`` maps ``(link, view, grasp)`` to the contact-model norm and must
    list every triple, empty ones included; ``n_links`` defaults to the number
    of distinct links among the keys.
    """
    keys = list(norms)
    total = float(sum(norms.values()))
    if n_links is None:
        n_links = len({k[0] for k in keys})
    grasps = {k[2] for k in keys}
    views_of = {g: {k[1] for k in keys if k[2] == g} for g in grasps}
    if total <= 0:
        log.warning("select_contacts: all contact-model norms are zero")
        return SelectionResult({k: 0 for k in keys}, {(m, g): 0 for g in grasps for m in views_of[g]}, [])
    b = {}
    for k in keys:
        i, m, g = k
        ratio = n_links * len(views_of[g]) * len(grasps) * norms[k] / total
        b[k] = int(ratio > eta)
    c = {}
    for g in grasps:
        for m in views_of[g]:
            c[(m, g)] = int(sum(b[k] for k in keys if k[1] == m and k[2] == g) > zeta)
    retained = [k for k in keys if b[k] and c[(k[1], k[2])]]
    return SelectionResult(b, c, retained)
