"""Contact-model distances, affinity propagation and cluster prototypes.

Kernel distance: ``w_lin |p_x - p_y|^2 + w_ang (1 - n_x . n_y)`` where ``n``
is the surface normal (frame z axis). For unit normals
``1 - n_x . n_y = |n_x - n_y|^2 / 2``, so the distance is the squared
Euclidean distance between the embeddings ``(sqrt(w_lin) p, sqrt(w_ang/2) n)``
and an exact nearest-neighbour search runs on a 6-D k-d tree.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .contact import ContactModel
from .density import KernelSet, sample_indices

log = logging.getLogger(__name__)

W_LIN = 1.0
W_ANG = 0.01


def kernel_distance(px, nx, py, ny, w_lin: float = W_LIN, w_ang: float = W_ANG):
    px, nx, py, ny = (np.asarray(a, dtype=float) for a in (px, nx, py, ny))
    # the |n_x - n_y|^2 / 2 form is exactly 0 for identical normals
    return w_lin * np.sum((px - py) ** 2, axis=-1) + 0.5 * w_ang * np.sum((nx - ny) ** 2, axis=-1)


def _embed(p, n, w_lin, w_ang):
    return np.hstack([np.sqrt(w_lin) * p, np.sqrt(0.5 * w_ang) * n])


class SurfaceIndex:
    """Nearest-kernel queries under the combined position/normal distance.

    Unrestricted queries are exact (6-D k-d tree). Radius-restricted queries
    scan a short candidate list looked up in a voxel grid.
    """

    #: position-nearest kernels scanned by the radius-restricted search
    restricted_candidates = 16
    #: voxel edge of the candidate grid (metres), and the cap on voxels per axis
    grid_cell = 0.002
    max_grid_dim = 160

    def __init__(self, positions, normals, w_lin: float = W_LIN, w_ang: float = W_ANG):
        self.p = np.ascontiguousarray(positions, dtype=float).reshape(-1, 3)
        self.n = np.ascontiguousarray(normals, dtype=float).reshape(-1, 3)
        if len(self.p) == 0:
            raise ValueError("empty kernel set")
        self.w_lin = w_lin
        self.w_ang = w_ang
        self._tree = None
        self._ptree = None
        self._grids = {}

    def cap(self, radius: float) -> float:
        """Distance assigned when no kernel lies within ``radius``."""
        return self.w_lin * radius * radius + 2.0 * self.w_ang

    def nearest(self, px, nx, radius: float | None = None):
        """Minimum distance (and index) for each query kernel.

        Without ``radius`` the search is exact. With ``radius`` only kernels
        whose position is within ``radius`` of the query count. The
        ``restricted_candidates`` kernels nearest to the centre of the query's
        voxel are scanned for the smallest combined distance; queries with no
        candidate in range get :meth:`cap` and index -1.
        """
        px = np.asarray(px, dtype=float).reshape(-1, 3)
        nx = np.asarray(nx, dtype=float).reshape(-1, 3)
        if radius is None:
            if self._tree is None:
                self._tree = cKDTree(_embed(self.p, self.n, self.w_lin, self.w_ang))
            _, idx = self._tree.query(_embed(px, nx, self.w_lin, self.w_ang), k=1)
            d = kernel_distance(px, nx, self.p[idx], self.n[idx], self.w_lin, self.w_ang)
            return np.maximum(d, 0.0), idx
        return kernels.restricted_nearest(px, nx, self.p, self.n, *self._grid(radius), radius, self.w_lin, self.w_ang, self.cap(radius))

    def _grid(self, radius: float):
        """Voxel grid whose cells list the position-nearest kernels to their centres."""
        if self._grids.get(radius) is None:
            lo = self.p.min(axis=0) - radius
            extent = self.p.max(axis=0) + radius - lo
            cell = max(self.grid_cell, float(extent.max()) / self.max_grid_dim)
            dims = np.maximum(np.ceil(extent / cell).astype(np.int64), 1)
            axes = [lo[a] + cell * (np.arange(dims[a]) + 0.5) for a in range(3)]
            centres = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
            if self._ptree is None:
                self._ptree = cKDTree(self.p)
            k = min(self.restricted_candidates, len(self.p))
            reach = radius + 0.5 * np.sqrt(3.0) * cell
            _, cand = self._ptree.query(centres, k=k, distance_upper_bound=reach)
            cand = cand.reshape(len(centres), k)
            cand = np.where(cand >= len(self.p), -1, cand).astype(np.int64)
            self._grids[radius] = (cand, lo, cell, dims)
        return self._grids[radius]


def _index_for(M: ContactModel, w_lin, w_ang) -> SurfaceIndex:
    cache = getattr(M, "_index_cache", None)
    if cache is not None and cache[0] == (w_lin, w_ang):
        return cache[1]
    fp, fn = M.feature_frame()
    idx = SurfaceIndex(fp, fn, w_lin, w_ang)
    M._index_cache = ((w_lin, w_ang), idx)
    return idx


def kernel_to_density_distance(px, nx, M: ContactModel, w_lin: float = W_LIN, w_ang: float = W_ANG) -> float:
    """Distance of one kernel (feature position/normal in link frame) to the nearest kernel of M."""
    if M.empty:
        raise ValueError("empty contact model")
    d, _ = _index_for(M, w_lin, w_ang).nearest(px, nx)
    return float(d[0])


def divergence(Mi: ContactModel, Mj: ContactModel, w_lin: float = W_LIN, w_ang: float = W_ANG) -> float:
    """Mean over kernels of Mi of their distance to the nearest kernel of Mj (weights ignored)."""
    if Mi.empty or Mj.empty:
        raise ValueError("divergence of an empty contact model")
    fp, fn = Mi.feature_frame()
    d, _ = _index_for(Mj, w_lin, w_ang).nearest(fp, fn)
    return float(d.mean())


def divergence_naive(Mi: ContactModel, Mj: ContactModel, w_lin: float = W_LIN, w_ang: float = W_ANG) -> float:
    """Double-loop reference for :func:`divergence`."""
    ip, in_ = Mi.feature_frame()
    jp, jn = Mj.feature_frame()
    total = 0.0
    for a in range(len(ip)):
        best = np.inf
        for b in range(len(jp)):
            best = min(best, float(kernel_distance(ip[a], in_[a], jp[b], jn[b], w_lin, w_ang)))
        total += best
    return total / len(ip)


def symmetric_distance(Mi: ContactModel, Mj: ContactModel, w_lin: float = W_LIN, w_ang: float = W_ANG) -> float:
    return max(divergence(Mi, Mj, w_lin, w_ang), divergence(Mj, Mi, w_lin, w_ang))


def distance_matrix(models, w_lin: float = W_LIN, w_ang: float = W_ANG) -> np.ndarray:
    """Symmetric distance for every pair of (non-empty) contact models."""
    n = len(models)
    div = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                div[i, j] = divergence(models[i], models[j], w_lin, w_ang)
    return np.maximum(div, div.T)


@dataclass
class APResult:
    labels: np.ndarray
    exemplars: np.ndarray
    converged: bool
    n_iter: int

    @property
    def n_clusters(self) -> int:
        return len(self.exemplars)


def affinity_propagation(
    D,
    preference: float | None = None,
    damping: float = 0.9,
    max_iter: int = 1000,
    convergence_iter: int = 100,
    seed: int = 0,
) -> APResult:
    """Frey-Dueck message passing on similarities ``-D``.

    The shared preference defaults to the median off-diagonal similarity.
    """
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    if D.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if n == 0:
        raise ValueError("empty distance matrix")
    if not np.allclose(np.diag(D), 0.0):
        raise ValueError("distance matrix must have a zero diagonal")
    if n == 1:
        return APResult(np.zeros(1, dtype=int), np.zeros(1, dtype=int), True, 0)
    S = -D.copy()
    off = ~np.eye(n, dtype=bool)
    if np.ptp(S[off]) <= 1e-12 * max(1.0, np.abs(S[off]).max()):
        # indistinguishable members: one cluster
        return APResult(np.zeros(n, dtype=int), np.zeros(1, dtype=int), True, 0)
    if preference is None:
        preference = float(np.median(S[off]))
    S[np.diag_indices(n)] = preference
    # tiny deterministic jitter removes degenerate ties
    rng = np.random.default_rng(seed)
    S = S + (np.finfo(float).eps * S + np.finfo(float).tiny * 100) * rng.standard_normal((n, n))

    A = np.zeros((n, n))
    R = np.zeros((n, n))
    rows = np.arange(n)
    history = np.zeros((n, convergence_iter), dtype=bool)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        AS = A + S
        first = np.argmax(AS, axis=1)
        y1 = AS[rows, first]
        AS[rows, first] = -np.inf
        y2 = np.max(AS, axis=1)
        Rnew = S - y1[:, None]
        Rnew[rows, first] = S[rows, first] - y2
        R = damping * R + (1 - damping) * Rnew

        Rp = np.maximum(R, 0)
        Rp[rows, rows] = R[rows, rows]
        col = Rp.sum(axis=0)
        Anew = col[None, :] - Rp
        dA = np.diag(Anew).copy()
        Anew = np.minimum(Anew, 0)
        Anew[rows, rows] = dA
        A = damping * A + (1 - damping) * Anew

        E = (np.diag(A) + np.diag(R)) > 0
        history[:, (it - 1) % convergence_iter] = E
        if it >= convergence_iter:
            stable = np.all(history == history[:, :1], axis=1).all()
            if stable and E.any():
                converged = True
                break
    exemplars = np.flatnonzero(np.diag(A) + np.diag(R) > 0)
    if not converged:
        log.warning("affinity propagation did not converge in %d iterations", max_iter)
    if exemplars.size == 0:
        log.warning("affinity propagation found no exemplars; using a single cluster")
        ex = int(np.argmax(S.sum(axis=0)))
        return APResult(np.zeros(n, dtype=int), np.array([ex]), converged, it)
    labels = np.argmax(S[:, exemplars], axis=1)
    labels[exemplars] = np.arange(exemplars.size)
    # refine each exemplar to the member with the largest summed similarity
    Sraw = -D
    for k in range(exemplars.size):
        members = np.flatnonzero(labels == k)
        exemplars[k] = members[np.argmax(Sraw[np.ix_(members, members)].sum(axis=0))]
    labels = np.argmax(Sraw[:, exemplars], axis=1)
    labels[exemplars] = np.arange(exemplars.size)
    return APResult(labels, exemplars, converged, it)


@dataclass
class ClusterPrototype:
    """Mixture of the contact models of one cluster."""

    members: list
    probs: np.ndarray
    exemplar: int
    cluster_id: int = 0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self._union = None

    def kernel_set(self) -> KernelSet:
        """All member kernels with weights P(k) w_kj: the mixture as one kernel set."""
        if self._union is None:
            ks = [m.kernels for m in self.members]
            w = np.concatenate([p * k.w for p, k in zip(self.probs, ks)])
            self._union = KernelSet(
                np.concatenate([k.p for k in ks]),
                np.concatenate([k.q for k in ks]),
                np.concatenate([k.r for k in ks]),
                w / w.sum(),
                ks[0].bandwidth,
            )
        return self._union

    def member_of_kernel(self) -> np.ndarray:
        return np.concatenate([np.full(len(m), k) for k, m in enumerate(self.members)])

    def sample_members(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return sample_indices(self.probs, rng, n)

    def feature_sample(self, rng: np.random.Generator, n_mc: int = 1000):
        """Kernel indices into :meth:`kernel_set` for Monte-Carlo divergence.

        Members are drawn by P(k), kernels uniformly within a member. A
        single-member prototype with at most ``n_mc`` kernels is used whole.
        """
        sizes = np.array([len(m) for m in self.members])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        if len(self.members) == 1 and sizes[0] <= n_mc:
            return np.arange(sizes[0])
        k = self.sample_members(rng, n_mc)
        return offsets[k] + (rng.random(n_mc) * sizes[k]).astype(int)


def prototype_weights(distances, xi: float = 1.0) -> np.ndarray:
    """Unnormalised member weights exp(-ξ d(exemplar, member))."""
    return np.exp(-xi * np.asarray(distances, dtype=float))


def build_prototype(models, exemplar: int, xi: float = 1.0, D=None, cluster_id: int = 0) -> ClusterPrototype:
    """Prototype with P(k) ∝ exp(-ξ d(exemplar, member_k))."""
    models = list(models)
    if not models:
        raise ValueError("empty cluster")
    if D is None:
        d = np.array([0.0 if k == exemplar else symmetric_distance(models[exemplar], m) for k, m in enumerate(models)])
    else:
        d = np.asarray(D, dtype=float)[exemplar]
    w = prototype_weights(d, xi)
    return ClusterPrototype(models, w / w.sum(), exemplar, cluster_id)


def cluster_contact_models(models, xi: float = 1.0, w_lin: float = W_LIN, w_ang: float = W_ANG, merge: bool = True, **ap_kwargs):
    """Distances, affinity propagation, then one prototype per cluster.

    Returns ``(prototypes, labels, D)``; with ``merge=False`` every model is
    its own singleton prototype.
    """
    models = list(models)
    n = len(models)
    if not merge or n < 2:
        if merge and n < 2:
            log.info("fewer than two contact models; one cluster per model")
        protos = [ClusterPrototype([m], np.ones(1), 0, k) for k, m in enumerate(models)]
        return protos, np.arange(n), np.zeros((n, n))
    D = distance_matrix(models, w_lin, w_ang)
    res = affinity_propagation(D, **ap_kwargs)
    labels = res.labels.copy()
    protos = []
    for c, ex in enumerate(res.exemplars):
        members = np.flatnonzero(res.labels == c)
        local_ex = int(np.flatnonzero(members == ex)[0])
        protos.append(
            build_prototype([models[m] for m in members], local_ex, xi, D=D[np.ix_(members, members)], cluster_id=c)
        )
    log.info("clustering: %d contact models -> %d prototypes", n, len(protos))
    return protos, labels, D
