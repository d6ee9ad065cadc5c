"""Rigid-body pose algebra.

Quaternions are stored scalar-last, ``(x, y, z, w)``, and multiplied with the
Hamilton convention, matching :class:`scipy.spatial.transform.Rotation`.
A pose ``(p, q)`` maps a point ``x`` given in its local frame to
``R(q) @ x + p`` in the parent frame.

Besides the :class:`Pose` value type, the module exposes array versions of
every operation (``*_arrays``) that broadcast over leading dimensions; the
density and planner code works on those directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

IDENTITY_Q = np.array([0.0, 0.0, 0.0, 1.0])


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite pose component")


def normalize_quat(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_mul(a, b):
    """Hamilton product ``a * b`` (scalar-last), broadcasting."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax, ay, az, aw = np.moveaxis(a, -1, 0)
    bx, by, bz, bw = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_rotate(q, v):
    """Rotate vectors ``v`` by unit quaternions ``q`` (broadcasting)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., :3]
    w = q[..., 3:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    x, y, z, w = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - z * w)
    m[..., 0, 2] = 2 * (x * z + y * w)
    m[..., 1, 0] = 2 * (x * y + z * w)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - x * w)
    m[..., 2, 0] = 2 * (x * z - y * w)
    m[..., 2, 1] = 2 * (y * z + x * w)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    q = Rotation.from_matrix(flat).as_quat()
    return q.reshape(m.shape[:-2] + (4,))


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([axis * np.sin(half), np.cos(half)], axis=-1)


def quat_angle(q1, q2):
    """Rotation angle (radians) between orientations, double-cover aware."""
    d = np.abs(np.sum(np.asarray(q1) * np.asarray(q2), axis=-1))
    return 2.0 * np.arccos(np.clip(d, 0.0, 1.0))


def compose_arrays(p1, q1, p2, q2):
    p = np.asarray(p1, dtype=float) + quat_rotate(q1, p2)
    q = normalize_quat(quat_mul(q1, q2))
    return p, q


def inverse_arrays(p, q):
    qi = quat_conj(normalize_quat(q))
    return -quat_rotate(qi, p), qi


def relative_arrays(pv, qv, ps, qs):
    """``v^-1 ∘ s`` for arrays of poses."""
    pi, qi = inverse_arrays(pv, qv)
    return compose_arrays(pi, qi, ps, qs)


@dataclass(frozen=True)
class Pose:
    """Position ``p`` in metres and unit quaternion ``q`` (x, y, z, w)."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(3)
        q = np.asarray(self.q, dtype=float).reshape(4)
        _check_finite(p, q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", normalize_quat(q))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.zeros(3), IDENTITY_Q)

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3], matrix_to_quat(T[:3, :3]))

    @classmethod
    def from_list(cls, values) -> Pose:
        values = list(values)
        return cls(values[:3], values[3:7])

    def to_list(self) -> list[float]:
        return [float(v) for v in np.concatenate([self.p, self.q])]

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.q)
        T[:3, 3] = self.p
        return T

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def transform_points(self, pts) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(pts, dtype=float)) + self.p

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def isclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.p, other.p, atol=atol)
            and abs(abs(float(self.q @ other.q)) - 1.0) <= atol
        )


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of frame ``b`` (expressed in ``a``) in ``a``'s parent frame."""
    p, q = compose_arrays(a.p, a.q, b.p, b.q)
    return Pose(p, q)


def inverse(v: Pose) -> Pose:
    p, q = inverse_arrays(v.p, v.q)
    return Pose(p, q)


def relative_link_pose(v: Pose, s: Pose) -> Pose:
    """Pose of a link at ``s`` relative to a surface frame ``v``: ``v^-1 ∘ s``."""
    return compose(inverse(v), s)


def translation(x, y, z) -> Pose:
    return Pose([x, y, z], IDENTITY_Q)


def rotation_pose(axis, angle, p=(0.0, 0.0, 0.0)) -> Pose:
    return Pose(p, axis_angle_quat(axis, angle))


def random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform random unit quaternions (Haar measure on SO(3))."""
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def frame_from_axes(x_axis, z_axis) -> np.ndarray:
    """Quaternions of right-handed frames with given (orthogonal) x and z axes."""
    x_axis = np.asarray(x_axis, dtype=float)
    z_axis = np.asarray(z_axis, dtype=float)
    y_axis = np.cross(z_axis, x_axis)
    m = np.stack([x_axis, y_axis, z_axis], axis=-1)
    return matrix_to_quat(m)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose whose +z axis points from ``eye`` towards ``target``."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    if abs(z @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    return Pose(eye, frame_from_axes(x, z))
