"""Kernel density estimation over R^3 x SO(3) x R^Nr.

A :class:`KernelSet` is a weighted particle set. Every particle carries a
kernel that factorises into an isotropic 3-D Gaussian on position, an
antipodal von Mises-Fisher pair on the orientation quaternion, and an
isotropic Gaussian on the surface descriptor.

The orientation kernel is normalised with respect to the surface measure of
the unit 3-sphere (total volume ``2 pi^2``), so it integrates to one over
the quaternion parametrisation of SO(3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ive, logsumexp

from . import kernels

LOG_2PI = np.log(2.0 * np.pi)
DEGENERATE_MARGINAL = 1e-300


class DegenerateConditional(ValueError):
    """The descriptor has (numerically) zero marginal density."""


@dataclass(frozen=True)
class Bandwidth:
    """Kernel bandwidths.

    ``sigma_p`` is a position standard deviation (m), ``sigma_q`` the vMF
    concentration and ``sigma_r`` a descriptor standard deviation, either a
    scalar broadcast to every component or one value per component.
    """

    sigma_p: float
    sigma_q: float
    sigma_r: float | tuple = 1.0

    def __post_init__(self):
        sr = np.atleast_1d(np.asarray(self.sigma_r, dtype=float))
        if self.sigma_p <= 0 or self.sigma_q <= 0 or np.any(sr <= 0):
            raise ValueError("bandwidths must be strictly positive")

    @classmethod
    def from_angular(cls, sigma_p: float, angular_std: float, sigma_r=1.0) -> Bandwidth:
        """Build from an angular standard deviation (radians) instead of a concentration.

        For concentration ``k`` the rotation angle about each axis has standard
        deviation ``2 / sqrt(k)`` near the mode, hence ``k = 4 / angular_std**2``.
        """
        return cls(sigma_p, 4.0 / angular_std**2, sigma_r)

    def sigma_r_vec(self, dim: int) -> np.ndarray:
        sr = np.atleast_1d(np.asarray(self.sigma_r, dtype=float))
        if sr.size == 1:
            return np.full(dim, float(sr[0]))
        if sr.size != dim:
            raise ValueError(f"descriptor dimension {dim} does not match sigma_r of size {sr.size}")
        return sr

    def to_dict(self) -> dict:
        sr = self.sigma_r
        if isinstance(sr, (tuple, list, np.ndarray)):
            sr = [float(v) for v in np.atleast_1d(sr)]
        else:
            sr = float(sr)
        return {"sigma_p": float(self.sigma_p), "sigma_q": float(self.sigma_q), "sigma_r": sr}

    @classmethod
    def from_dict(cls, d: dict) -> Bandwidth:
        sr = d["sigma_r"]
        return cls(d["sigma_p"], d["sigma_q"], tuple(sr) if isinstance(sr, list) else sr)


def log_vmf_normalizer(kappa: float) -> float:
    """log C4(kappa) = log(kappa / (4 pi^2 I_1(kappa)))."""
    if kappa <= 0:
        raise ValueError("vMF concentration must be positive")
    # ive(1, k) = I_1(k) * exp(-k)
    return float(np.log(kappa) - np.log(4.0 * np.pi**2) - (np.log(ive(1, kappa)) + kappa))


def log_vmf_pair(q, mu_q, kappa: float, log_c4: float | None = None):
    """Log of the antipodal vMF pair, vectorised over leading dimensions."""
    if kappa <= 0:
        raise ValueError("vMF concentration must be positive")
    if log_c4 is None:
        log_c4 = log_vmf_normalizer(kappa)
    d = np.abs(np.sum(np.asarray(q, dtype=float) * np.asarray(mu_q, dtype=float), axis=-1))
    # cosh(k d) = exp(k|d|) (1 + exp(-2k|d|)) / 2
    return log_c4 + kappa * d + np.log1p(np.exp(-2.0 * kappa * d)) - np.log(2.0)


def eval_vmf_pair(q, mu_q, sigma_q: float):
    """C4(s) * (exp(s mu.q) + exp(-s mu.q)) / 2."""
    return np.exp(log_vmf_pair(q, mu_q, sigma_q))


def log_gauss_iso(x, mu, sigma):
    """Log density of an isotropic Gaussian (per-component sigma allowed)."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), x.shape[-1:])
    z = (x - mu) / sigma
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(sigma)) - 0.5 * x.shape[-1] * LOG_2PI


def log_kernel(p, q, r, mu_p, mu_q, mu_r, bw: Bandwidth):
    r = np.asarray(r, dtype=float)
    mu_r = np.asarray(mu_r, dtype=float)
    if r.shape[-1:] != mu_r.shape[-1:]:
        raise ValueError("descriptor dimension mismatch")
    out = log_gauss_iso(p, mu_p, bw.sigma_p) + log_vmf_pair(q, mu_q, bw.sigma_q)
    if r.shape[-1] > 0:
        out = out + log_gauss_iso(r, mu_r, bw.sigma_r_vec(r.shape[-1]))
    return out


def eval_kernel(p, q, r, mu_p, mu_q, mu_r, bw: Bandwidth):
    """Factored kernel value N3(p) * Theta(q) * N_Nr(r)."""
    return np.exp(log_kernel(p, q, r, mu_p, mu_q, mu_r, bw))


@dataclass(frozen=True)
class KernelSet:
    """Weighted kernel centres with a shared bandwidth.

    ``p`` is (N, 3), ``q`` (N, 4) unit quaternions, ``r`` (N, Nr) descriptors
    (``Nr`` may be 0 for pose-only densities) and ``w`` (N,) weights.
    """

    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    w: np.ndarray
    bandwidth: Bandwidth
    _log_c4: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.p, dtype=float).reshape(-1, 3))
        n = len(p)
        q = np.asarray(self.q, dtype=float).reshape(n, 4)
        if n:
            # rescale only rows that are not already unit, so stored sets load back bit for bit
            norm = np.linalg.norm(q, axis=1, keepdims=True)
            q = np.ascontiguousarray(np.where(np.abs(norm - 1.0) > 1e-12, q / norm, q))
        r = np.asarray(self.r, dtype=float)
        r = np.zeros((n, 0)) if r.size == 0 else np.ascontiguousarray(r.reshape(n, -1))
        w = np.asarray(self.w, dtype=float).reshape(n)
        if np.any(w < 0):
            raise ValueError("kernel weights must be non-negative")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "_log_c4", log_vmf_normalizer(self.bandwidth.sigma_q))

    @classmethod
    def from_points(cls, p, q, r=None, w=None, bandwidth: Bandwidth | None = None, normalize: bool = True):
        p = np.asarray(p, dtype=float).reshape(-1, 3)
        n = len(p)
        r = np.zeros((n, 0)) if r is None else np.asarray(r, dtype=float).reshape(n, -1)
        w = np.full(n, 1.0 / max(n, 1)) if w is None else np.asarray(w, dtype=float)
        if normalize and n:
            total = w.sum()
            if total <= 0:
                raise ValueError("weights sum to zero")
            w = w / total
        return cls(p, q, r, w, bandwidth)

    def __len__(self) -> int:
        return len(self.p)

    @property
    def descriptor_dim(self) -> int:
        return self.r.shape[1]

    @property
    def log_c4(self) -> float:
        return self._log_c4

    def is_normalized(self, tol: float = 1e-9) -> bool:
        return abs(self.w.sum() - 1.0) <= tol

    def normalized(self) -> KernelSet:
        return KernelSet(self.p, self.q, self.r, self.w / self.w.sum(), self.bandwidth)

    def subset(self, idx) -> KernelSet:
        return KernelSet(self.p[idx], self.q[idx], self.r[idx], self.w[idx], self.bandwidth)

    def _check(self):
        if len(self) == 0:
            raise ValueError("empty kernel set")


def log_pdf(S: KernelSet, p, q, r=None):
    """Log of the weighted kernel sum at one or many query points."""
    S._check()
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 4)
    bw = S.bandwidth
    with np.errstate(divide="ignore"):
        logw = np.log(S.w)
    if not S.descriptor_dim:
        out = kernels.pose_mixture_logpdf(p, q, S.p, S.q, logw, bw.sigma_p, bw.sigma_q, S.log_c4)
    else:
        if r is None:
            raise ValueError("descriptor required for a kernel set with descriptors")
        r = np.asarray(r, dtype=float).reshape(len(p), -1)
        if r.shape[1] != S.descriptor_dim:
            raise ValueError("descriptor dimension mismatch")
        sr = bw.sigma_r_vec(S.descriptor_dim)
        lr = log_gauss_iso(r[:, None, :], S.r[None, :, :], sr)
        lp = kernels.pose_kernel_logmatrix(p, q, S.p, S.q, bw.sigma_p, bw.sigma_q, S.log_c4)
        out = logsumexp(lp + lr + logw[None, :], axis=1)
    return out[0] if single else out


def eval_pdf(S: KernelSet, p, q, r=None):
    """pdf(x) ~= sum_j w_j K(x | x_j, sigma)."""
    return np.exp(log_pdf(S, p, q, r))


def eval_pdf_naive(S: KernelSet, p, q, r=None) -> float:
    """Reference double loop used by tests; one query point."""
    S._check()
    total = 0.0
    for j in range(len(S)):
        rj = S.r[j]
        rr = np.zeros(0) if r is None else np.asarray(r, dtype=float)
        total += S.w[j] * float(eval_kernel(p, q, rr, S.p[j], S.q[j], rj, S.bandwidth))
    return total


def _descriptor_logweights(S: KernelSet, r) -> np.ndarray:
    r = np.asarray(r, dtype=float).reshape(-1)
    if r.shape[0] != S.descriptor_dim:
        raise ValueError("descriptor dimension mismatch")
    sr = S.bandwidth.sigma_r_vec(S.descriptor_dim)
    with np.errstate(divide="ignore"):
        return np.log(S.w) + log_gauss_iso(r[None, :], S.r, sr)


def marginal_descriptor(S: KernelSet, r) -> float:
    """pdf(r) = sum_j w_j N(r | r_j, sigma_r); pose blocks integrate out."""
    S._check()
    return float(np.exp(logsumexp(_descriptor_logweights(S, r))))


def conditional_pose(S: KernelSet, r) -> KernelSet:
    """Pose-only kernel set for pdf(p, q | r)."""
    S._check()
    lw = _descriptor_logweights(S, r)
    lm = logsumexp(lw)
    if not np.isfinite(lm) or lm < np.log(DEGENERATE_MARGINAL):
        raise DegenerateConditional("descriptor has negligible marginal density")
    w = np.exp(lw - lm)
    return KernelSet(S.p, S.q, np.zeros((len(S), 0)), w / w.sum(), S.bandwidth)


def sample_vmf_pair(mu, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """Draw one quaternion per row of ``mu`` from the antipodal vMF pair.

    Wood's rejection sampler on S^3 followed by a random sign flip.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    n = len(mu)
    dim = 4
    b = (dim - 1) / (2.0 * kappa + np.sqrt(4.0 * kappa**2 + (dim - 1) ** 2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (dim - 1) * np.log(1.0 - x0 * x0)
    w = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        z = rng.beta((dim - 1) / 2.0, (dim - 1) / 2.0, size=todo.size)
        ww = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(todo.size)
        ok = kappa * ww + (dim - 1) * np.log(1.0 - x0 * ww) - c >= np.log(u)
        w[todo[ok]] = ww[ok]
        todo = todo[~ok]
    v = rng.standard_normal((n, dim))
    v -= np.sum(v * mu, axis=1, keepdims=True) * mu
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    out = w[:, None] * mu + np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    out *= sign[:, None]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def sample(S: KernelSet, rng: np.random.Generator, n: int | None = None):
    """Draw features ``(p, q, r)``; returns single arrays when ``n`` is None."""
    S._check()
    m = 1 if n is None else n
    idx = sample_indices(S.w, rng, m)
    bw = S.bandwidth
    p = S.p[idx] + bw.sigma_p * rng.standard_normal((m, 3))
    q = sample_vmf_pair(S.q[idx], bw.sigma_q, rng)
    if S.descriptor_dim:
        r = S.r[idx] + bw.sigma_r_vec(S.descriptor_dim) * rng.standard_normal((m, S.descriptor_dim))
    else:
        r = np.zeros((m, 0))
    if n is None:
        return p[0], q[0], r[0]
    return p, q, r


def sample_indices(w: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
    cdf = np.cumsum(w)
    return np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), len(w) - 1)
