"""Query densities: contact-model prototypes transferred onto a test view."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .cluster import W_ANG, W_LIN, ClusterPrototype, SurfaceIndex
from .density import (
    Bandwidth,
    DegenerateConditional,
    DEGENERATE_MARGINAL,
    KernelSet,
    log_gauss_iso,
    log_vmf_normalizer,
    sample,
    sample_indices,
    sample_vmf_pair,
)
from .geometry import Pose, compose_arrays, inverse_arrays, quat_rotate
from .surface import ObjectViewModel

log = logging.getLogger(__name__)

Z_AXIS = np.array([0.0, 0.0, 1.0])

#: weight rules: the divergence-based surface likelihood, or the descriptor marginal alone
WEIGHT_DIVERGENCE = "divergence"
WEIGHT_MARGINAL = "marginal"


@dataclass
class QueryDensity:
    """Weighted hand-link pose kernels on a test object."""

    p: np.ndarray
    q: np.ndarray
    w: np.ndarray
    sigma_p: float
    sigma_q: float
    prototype_id: int = 0

    def __post_init__(self):
        self.p = np.ascontiguousarray(self.p, dtype=float)
        self.q = np.ascontiguousarray(self.q, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        self._log_c4 = log_vmf_normalizer(self.sigma_q)
        with np.errstate(divide="ignore"):
            self._logw = np.log(self.w)

    def __len__(self) -> int:
        return len(self.p)

    def as_kernel_set(self) -> KernelSet:
        return KernelSet(self.p, self.q, np.zeros((len(self), 0)), self.w, Bandwidth(self.sigma_p, self.sigma_q, 1.0))

    def to_dict(self) -> dict:
        return {
            "prototype_id": self.prototype_id,
            "sigma_p": self.sigma_p,
            "sigma_q": self.sigma_q,
            "p": self.p.tolist(),
            "q": self.q.tolist(),
            "w": self.w.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> QueryDensity:
        return cls(np.array(d["p"]), np.array(d["q"]), np.array(d["w"]), d["sigma_p"], d["sigma_q"], d["prototype_id"])


def log_eval_query(Q: QueryDensity, p, q):
    """log sum_k w_k N3(p | p_k) Theta(q | q_k) for one or many poses."""
    if len(Q) == 0:
        raise ValueError("empty query density")
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    out = kernels.pose_mixture_logpdf(p.reshape(-1, 3), np.asarray(q, dtype=float).reshape(-1, 4), Q.p, Q.q, Q._logw, Q.sigma_p, Q.sigma_q, Q._log_c4)
    return out[0] if single else out


def eval_query(Q: QueryDensity, s):
    """Query density at a pose (``Pose``) or at arrays ``(p, q)``."""
    if isinstance(s, Pose):
        return float(np.exp(log_eval_query(Q, s.p, s.q)))
    p, q = s
    return np.exp(log_eval_query(Q, p, q))


def eval_query_naive(Q: QueryDensity, s: Pose) -> float:
    from .density import eval_kernel

    return float(sum(Q.w[k] * eval_kernel(s.p, s.q, [], Q.p[k], Q.q[k], [], Bandwidth(Q.sigma_p, Q.sigma_q)) for k in range(len(Q))))


def transform_features(s_p, s_q, feat_p, feat_n):
    """World positions/normals of link-frame features for link poses ``s``.

    ``s_p`` (B, 3), ``s_q`` (B, 4), ``feat_p``/``feat_n`` (K, 3) -> (B, K, 3).
    """
    s_q = np.asarray(s_q, dtype=float)[:, None, :]
    P = np.asarray(s_p, dtype=float)[:, None, :] + quat_rotate(s_q, feat_p[None, :, :])
    N = quat_rotate(s_q, feat_n[None, :, :])
    return P, N


def transform_contact_model(s: Pose, kernels_u: KernelSet) -> KernelSet:
    """s ⋄ M = {(s ∘ u_j^-1, r_j)}: contact-model kernels mapped to world feature poses."""
    if len(kernels_u) == 0:
        raise ValueError("empty contact model")
    ip, iq = inverse_arrays(kernels_u.p, kernels_u.q)
    p, q = compose_arrays(s.p, s.q, ip, iq)
    return KernelSet(p, q, kernels_u.r, kernels_u.w, kernels_u.bandwidth)


def _sample_conditional(U: KernelSet, r_hat, rng):
    """Kernel index per row of ``r_hat`` drawn from w_j N(r | r_j) (None where degenerate)."""
    sr = U.bandwidth.sigma_r_vec(U.descriptor_dim)
    with np.errstate(divide="ignore"):
        logw = np.log(U.w)
    lw = log_gauss_iso(r_hat[:, None, :], U.r[None, :, :], sr) + logw[None, :]
    lm = logsumexp(lw, axis=1)
    ok = np.isfinite(lm) & (lm >= np.log(DEGENERATE_MARGINAL))
    # Gumbel-max draws from the normalised conditional weights
    g = lw + rng.gumbel(size=lw.shape)
    idx = np.argmax(g, axis=1)
    return idx, ok, lm


def form_query_density(
    view: ObjectViewModel,
    prototype: ClusterPrototype,
    n_q: int = 5000,
    phi: float = 1.0,
    rng: np.random.Generator | None = None,
    weight_rule: str = WEIGHT_DIVERGENCE,
    rho: float = 0.02,
    n_mc: int = 1000,
    w_lin: float = W_LIN,
    w_ang: float = W_ANG,
    max_retries: int = 20,
    batch: int = 500,
    view_index: SurfaceIndex | None = None,
    jitter: bool = False,
) -> QueryDensity:
    """Importance-sampled query density for one prototype on a test view.

    By default v and u are kernel centres rather than kernel draws, so
    the bandwidth enters once (at evaluation); ``jitter`` draws them with kernel noise.
    """
    rng = np.random.default_rng() if rng is None else rng
    if len(view) == 0:
        raise ValueError("empty object-view model")
    U = prototype.kernel_set()
    if len(U) == 0:
        raise ValueError("empty prototype")
    bw = U.bandwidth
    S_p = np.empty((n_q, 3))
    S_q = np.empty((n_q, 4))
    logw = np.empty(n_q)

    if weight_rule == WEIGHT_DIVERGENCE:
        if view_index is None:
            view_index = SurfaceIndex(view.positions, view.normals, w_lin, w_ang)
        sub = prototype.feature_sample(rng, n_mc)
        fp, fq = inverse_arrays(U.p[sub], U.q[sub])
        fn = quat_rotate(fq, Z_AXIS)
    elif weight_rule != WEIGHT_MARGINAL:
        raise ValueError(f"unknown weight rule {weight_rule!r}")

    filled = 0
    retries = 0
    while filled < n_q:
        m = min(batch, n_q - filled)
        if jitter:
            vp, vq, vr = sample(view.features, rng, m)
        else:
            F = view.features
            j = sample_indices(F.w, rng, m)
            vp, vq, vr = F.p[j], F.q[j], F.r[j]
        idx, ok, log_marg = _sample_conditional(U, vr, rng)
        if not ok.all():
            retries += 1
            if retries > max_retries * max(1, n_q // batch):
                raise DegenerateConditional("test-view descriptors are far from every prototype kernel")
            vp, vq, vr, idx, log_marg = vp[ok], vq[ok], vr[ok], idx[ok], log_marg[ok]
            m = len(idx)
            if m == 0:
                continue
        if jitter:
            up = U.p[idx] + bw.sigma_p * rng.standard_normal((m, 3))
            uq = sample_vmf_pair(U.q[idx], bw.sigma_q, rng)
        else:
            up, uq = U.p[idx], U.q[idx]
        sp, sq = compose_arrays(vp, vq, up, uq)
        if weight_rule == WEIGHT_DIVERGENCE:
            P, N = transform_features(sp, sq, fp, fn)
            d, _ = view_index.nearest(P.reshape(-1, 3), N.reshape(-1, 3), radius=rho)
            div = d.reshape(m, -1).mean(axis=1)
            lw = -phi * div
        else:
            # marginal descriptor likelihood of the prototype
            lw = log_marg
        S_p[filled : filled + m] = sp
        S_q[filled : filled + m] = sq
        logw[filled : filled + m] = lw
        filled += m
    w = np.exp(logw - logw.max())
    w /= w.sum()
    return QueryDensity(S_p, S_q, w, bw.sigma_p, bw.sigma_q, prototype.cluster_id)


def query_weight(divergence_value: float, phi: float = 1.0) -> float:
    """Unnormalised importance weight exp(-φ d)."""
    return float(np.exp(-phi * divergence_value))


def surface_divergence(s: Pose, prototype: ClusterPrototype, view: ObjectViewModel, rho: float | None = 0.02,
                       w_lin: float = W_LIN, w_ang: float = W_ANG) -> float:
    """d_dd(s ⋄ M, V) using every prototype kernel."""
    U = prototype.kernel_set()
    fp, fq = inverse_arrays(U.p, U.q)
    P, N = transform_features(s.p[None, :], s.q[None, :], fp, quat_rotate(fq, Z_AXIS))
    idx = SurfaceIndex(view.positions, view.normals, w_lin, w_ang)
    d, _ = idx.nearest(P[0], N[0], radius=rho)
    return float(d.mean())
