"""Point clouds, surface features and single-view depth simulation.

Surface features are oriented frames attached to cloud points: the frame's
z axis is the (viewpoint-oriented) surface normal and its x axis the first
principal direction. The descriptor is the pair of principal curvatures
``(r1, r2)``, ``r1 >= r2``, positive where the surface bends away from the
normal (convex as seen from the sensor).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .density import Bandwidth, KernelSet
from .geometry import Pose, frame_from_axes, quat_rotate, quat_to_matrix

log = logging.getLogger(__name__)

DEFAULT_KNN = 25
UMBILIC_TOL = 1e-8


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    viewpoint: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals and points differ in length")
        self.viewpoint = np.asarray(self.viewpoint, dtype=float).reshape(3)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose) -> PointCloud:
        normals = None if self.normals is None else quat_rotate(pose.q, self.normals)
        return PointCloud(pose.transform_points(self.points), normals, pose.transform_points(self.viewpoint))

    def subset(self, idx) -> PointCloud:
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals, self.viewpoint)


def merge_clouds(clouds) -> PointCloud:
    """Concatenate registered clouds (viewpoint = mean of viewpoints)."""
    clouds = list(clouds)
    pts = np.concatenate([c.points for c in clouds])
    normals = None
    if all(c.normals is not None for c in clouds):
        normals = np.concatenate([c.normals for c in clouds])
    vp = np.mean([c.viewpoint for c in clouds], axis=0)
    return PointCloud(pts, normals, vp)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Keep the point closest to each occupied voxel's centroid."""
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    n = inverse.max() + 1
    centroids = np.zeros((n, 3))
    np.add.at(centroids, inverse, cloud.points)
    centroids /= np.bincount(inverse, minlength=n)[:, None]
    d = np.linalg.norm(cloud.points - centroids[inverse], axis=1)
    order = np.lexsort((d, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order[1:]] != inverse[order[:-1]]
    return cloud.subset(np.sort(order[first]))


# ---------------------------------------------------------------------------
# PLY


def write_ply(path, cloud: PointCloud) -> None:
    has_n = cloud.normals is not None
    lines = [
        "ply",
        "format ascii 1.0",
        "comment viewpoint {!r} {!r} {!r}".format(*map(float, cloud.viewpoint)),
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if has_n:
        lines += ["property double nx", "property double ny", "property double nz"]
    lines.append("end_header")
    data = cloud.points if not has_n else np.hstack([cloud.points, cloud.normals])
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in data)
    Path(path).write_text("\n".join(lines) + "\n" + body + ("\n" if len(data) else ""))


def read_ply(path) -> PointCloud:
    """ASCII PLY with x y z and optional nx ny nz vertex properties."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    props: list[str] = []
    n_vertex = None
    viewpoint = np.zeros(3)
    in_vertex = False
    body_start = None
    for i, line in enumerate(text[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "comment" and len(tok) == 5 and tok[1] == "viewpoint":
            viewpoint = np.array([float(v) for v in tok[2:5]])
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None or n_vertex is None:
        raise ValueError(f"{path}: malformed PLY header")
    for name in ("x", "y", "z"):
        if name not in props:
            raise ValueError(f"{path}: missing vertex property {name}")
    rows = [ln.split() for ln in text[body_start : body_start + n_vertex]]
    data = np.array(rows, dtype=float).reshape(n_vertex, len(props))
    col = {name: j for j, name in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if all(name in col for name in ("nx", "ny", "nz")):
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
    return PointCloud(pts, normals, viewpoint)


# ---------------------------------------------------------------------------
# normals and curvatures


def estimate_normals(cloud: PointCloud, k_nn: int = DEFAULT_KNN) -> PointCloud:
    """PCA normals oriented towards the sensor viewpoint.

    Points whose neighbourhood covariance has rank < 2 are dropped; the count
    is logged.
    """
    if k_nn < 3:
        raise ValueError("k_nn must be at least 3")
    n = len(cloud)
    if n < 3:
        raise ValueError(f"need at least 3 points for normal estimation, got {n}")
    k = min(k_nn + 1, n)
    _, idx = cKDTree(cloud.points).query(cloud.points, k=k)
    nb = cloud.points[idx]
    centred = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    keep = evals[:, 1] > 1e-10 * scale
    keep &= evals[:, 2] > 0
    to_vp = cloud.viewpoint - cloud.points
    flip = np.sum(normals * to_vp, axis=1) < 0
    normals[flip] *= -1
    dropped = int((~keep).sum())
    if dropped:
        log.warning("estimate_normals: dropped %d degenerate points", dropped)
    out = PointCloud(cloud.points[keep], normals[keep], cloud.viewpoint)
    out.dropped = dropped
    return out


@dataclass
class ObjectViewModel:
    """Uniformly weighted surface-feature density of one view."""

    features: KernelSet
    view_id: str = ""
    grasp_id: str = ""
    viewpoint: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self) -> int:
        return len(self.features)

    @property
    def positions(self) -> np.ndarray:
        return self.features.p

    @property
    def normals(self) -> np.ndarray:
        return quat_rotate(self.features.q, np.array([0.0, 0.0, 1.0]))

    @property
    def descriptors(self) -> np.ndarray:
        return self.features.r


def _tangent_basis(normals):
    ref = np.where(np.abs(normals[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(normals, ref)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    return t1, t2


def principal_curvatures(points, normals, k_nn: int = DEFAULT_KNN, centroid=None):
    """Quadric-fit principal curvatures and directions.

    Returns ``(r, k1, k2)`` with ``r`` (N, 2) sorted so ``r1 >= r2`` and
    ``k1``, ``k2`` unit tangent directions with ``k1 x k2 = n``.
    """
    points = np.asarray(points, dtype=float)
    normals = np.asarray(normals, dtype=float)
    n = len(points)
    k = min(k_nn + 1, n)
    if k < 6:
        raise ValueError("too few points for a quadric fit")
    if centroid is None:
        centroid = points.mean(axis=0)
    _, idx = cKDTree(points).query(points, k=k)
    t1, t2 = _tangent_basis(normals)
    d = points[idx] - points[:, None, :]
    x = np.einsum("nkj,nj->nk", d, t1)
    y = np.einsum("nkj,nj->nk", d, t2)
    z = np.einsum("nkj,nj->nk", d, normals)
    h = np.maximum(np.sqrt(np.mean(x * x + y * y, axis=1)), 1e-12)[:, None]
    xs, ys, zs = x / h, y / h, z / h
    A = np.stack([xs * xs, xs * ys, ys * ys, xs, ys, np.ones_like(xs)], axis=-1)
    AtA = np.einsum("nki,nkj->nij", A, A) + 1e-12 * np.eye(6)
    Atz = np.einsum("nki,nk->ni", A, zs)
    coef = np.linalg.solve(AtA, Atz[..., None])[..., 0]
    a = coef[:, 0] / h[:, 0]
    b = coef[:, 1] / h[:, 0]
    c = coef[:, 2] / h[:, 0]
    fx = coef[:, 3]
    fy = coef[:, 4]
    # shape operator of the graph z = f(x, y) at the origin
    g = np.sqrt(1.0 + fx * fx + fy * fy)
    I = np.stack([np.stack([1 + fx * fx, fx * fy], -1), np.stack([fx * fy, 1 + fy * fy], -1)], -2)
    II = np.stack([np.stack([2 * a, b], -1), np.stack([b, 2 * c], -1)], -2) / g[:, None, None]
    # symmetrise in the metric: eigen-decompose I^-1/2 II I^-1/2
    w_i, v_i = np.linalg.eigh(I)
    Ih = np.einsum("nij,nj,nkj->nik", v_i, 1.0 / np.sqrt(w_i), v_i)
    M = Ih @ II @ Ih
    ev, evec = np.linalg.eigh(0.5 * (M + np.swapaxes(M, 1, 2)))
    # curvature is positive where the surface bends away from the normal
    curv = -ev
    order = np.argsort(-curv, axis=1)
    curv = np.take_along_axis(curv, order, axis=1)
    evec = np.take_along_axis(evec, order[:, None, :], axis=2)
    dirs_param = np.einsum("nij,njk->nik", Ih, evec)
    u = dirs_param[:, :, 0]
    k1 = u[:, :1] * (t1 + fx[:, None] * normals) + u[:, 1:2] * (t2 + fy[:, None] * normals)
    k1 -= np.sum(k1 * normals, axis=1, keepdims=True) * normals
    k1 /= np.linalg.norm(k1, axis=1, keepdims=True)
    umbilic = np.abs(curv[:, 0] - curv[:, 1]) < UMBILIC_TOL
    if np.any(umbilic):
        ex = np.array([1.0, 0.0, 0.0])
        proj = ex - (normals[umbilic] @ ex)[:, None] * normals[umbilic]
        bad = np.linalg.norm(proj, axis=1) < 1e-6
        proj[bad] = np.array([0.0, 1.0, 0.0]) - normals[umbilic][bad][:, 1:2] * normals[umbilic][bad]
        k1[umbilic] = proj / np.linalg.norm(proj, axis=1, keepdims=True)
    else:
        umbilic = np.zeros(n, dtype=bool)
    # deterministic sign: towards the cloud centroid, ties to global +x
    s = np.sum(k1 * (centroid - points), axis=1)
    tie = np.abs(s) < 1e-12
    s[tie] = k1[tie, 0]
    flip = (s < 0) & ~umbilic
    k1[flip] *= -1
    k2 = np.cross(normals, k1)
    return curv, k1, k2


def principal_curvature_features(
    cloud: PointCloud,
    k_nn: int = DEFAULT_KNN,
    bandwidth: Bandwidth | None = None,
    view_id: str = "",
    grasp_id: str = "",
) -> ObjectViewModel:
    """Object-view model: one oriented curvature feature per cloud point."""
    if cloud.normals is None:
        raise ValueError("cloud has no normals; run estimate_normals first")
    if bandwidth is None:
        bandwidth = Bandwidth.from_angular(0.005, 0.5, 10.0)
    normals = cloud.normals / np.linalg.norm(cloud.normals, axis=1, keepdims=True)
    r, k1, _ = principal_curvatures(cloud.points, normals, k_nn)
    q = frame_from_axes(k1, normals)
    n = len(cloud)
    ks = KernelSet(cloud.points, q, r, np.full(n, 1.0 / n), bandwidth)
    return ObjectViewModel(ks, view_id, grasp_id, cloud.viewpoint.copy())


def view_model_from_cloud(cloud: PointCloud, k_nn: int = DEFAULT_KNN, bandwidth=None, view_id="", grasp_id=""):
    if cloud.normals is None:
        cloud = estimate_normals(cloud, k_nn)
    return principal_curvature_features(cloud, k_nn, bandwidth, view_id, grasp_id)


# ---------------------------------------------------------------------------
# scenes


def _safe_div(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(b != 0, a / np.where(b != 0, b, 1.0), np.inf)


@dataclass
class Primitive:
    """Solid primitive with its own pose. Dimensions in metres.

    ``kind`` is one of box (``size`` = full extents), sphere (``radius``),
    cylinder (``radius``, ``height``, axis = local z), tube (``radius``,
    ``inner_radius``, ``height``) or composite (``parts``, posed relative to
    the composite).
    """

    kind: str
    pose: Pose = field(default_factory=Pose.identity)
    size: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    inner_radius: float = 0.0
    height: float = 0.0
    parts: list = field(default_factory=list)

    def flatten(self, parent: Pose | None = None):
        pose = self.pose if parent is None else parent @ self.pose
        if self.kind == "composite":
            out = []
            for part in self.parts:
                out.extend(part.flatten(pose))
            return out
        return [Primitive(self.kind, pose, self.size, self.radius, self.inner_radius, self.height)]

    # local-frame signed distance
    def _sdf_local(self, x):
        if self.kind == "box":
            d = np.abs(x) - 0.5 * np.asarray(self.size, dtype=float)
            return np.linalg.norm(np.maximum(d, 0.0), axis=1) + np.minimum(d.max(axis=1), 0.0)
        if self.kind == "sphere":
            return np.linalg.norm(x, axis=1) - self.radius
        if self.kind in ("cylinder", "tube"):
            rho = np.linalg.norm(x[:, :2], axis=1)
            dr = rho - self.radius
            if self.kind == "tube":
                dr = np.maximum(dr, self.inner_radius - rho)
            dz = np.abs(x[:, 2]) - 0.5 * self.height
            d = np.stack([dr, dz], axis=1)
            return np.linalg.norm(np.maximum(d, 0.0), axis=1) + np.minimum(d.max(axis=1), 0.0)
        raise ValueError(f"unknown primitive {self.kind}")

    def _hits_local(self, o, d):
        """List of (t, normal_local) candidate surface hits."""
        hits = []
        if self.kind == "box":
            h = 0.5 * np.asarray(self.size, dtype=float)
            for ax in range(3):
                for sgn in (-1.0, 1.0):
                    t = _safe_div(sgn * h[ax] - o[:, ax], d[:, ax])
                    pt = o + t[:, None] * d
                    others = [j for j in range(3) if j != ax]
                    ok = np.all(np.abs(pt[:, others]) <= h[others] + 1e-12, axis=1)
                    nrm = np.zeros(3)
                    nrm[ax] = sgn
                    hits.append((np.where(ok, t, np.inf), np.broadcast_to(nrm, o.shape)))
        elif self.kind == "sphere":
            b = np.sum(o * d, axis=1)
            c = np.sum(o * o, axis=1) - self.radius**2
            disc = b * b - c
            sq = np.sqrt(np.maximum(disc, 0.0))
            for t in (-b - sq, -b + sq):
                t = np.where(disc >= 0, t, np.inf)
                pt = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
                hits.append((t, pt / self.radius))
        else:
            hz = 0.5 * self.height
            radii = [(self.radius, 1.0)]
            if self.kind == "tube":
                radii.append((self.inner_radius, -1.0))
            a = d[:, 0] ** 2 + d[:, 1] ** 2
            b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
            for rad, sgn in radii:
                c = o[:, 0] ** 2 + o[:, 1] ** 2 - rad**2
                disc = b * b - a * c
                sq = np.sqrt(np.maximum(disc, 0.0))
                for root in (-b - sq, -b + sq):
                    t = np.where((disc >= 0) & (a > 0), _safe_div(root, a), np.inf)
                    pt = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
                    ok = np.abs(pt[:, 2]) <= hz
                    nrm = np.zeros_like(pt)
                    nrm[:, :2] = sgn * pt[:, :2] / rad
                    hits.append((np.where(ok, t, np.inf), nrm))
            for sgn in (-1.0, 1.0):
                t = _safe_div(sgn * hz - o[:, 2], d[:, 2])
                pt = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
                rho2 = pt[:, 0] ** 2 + pt[:, 1] ** 2
                ok = rho2 <= self.radius**2
                if self.kind == "tube":
                    ok &= rho2 >= self.inner_radius**2
                nrm = np.zeros(3)
                nrm[2] = sgn
                hits.append((np.where(ok, t, np.inf), np.broadcast_to(nrm, o.shape)))
        return hits

    def raycast(self, origins, dirs):
        """Nearest positive hit distance and world normal for each ray."""
        R = self.pose.rotation()
        o = (origins - self.pose.p) @ R
        d = dirs @ R
        best_t = np.full(len(o), np.inf)
        best_n = np.zeros((len(o), 3))
        for t, nrm in self._hits_local(o, d):
            t = np.where(t > 1e-9, t, np.inf)
            better = t < best_t
            best_t = np.where(better, t, best_t)
            best_n[better] = np.asarray(nrm)[better] if np.ndim(nrm) == 2 else nrm
        return best_t, best_n @ R.T

    def sdf(self, points):
        R = self.pose.rotation()
        return self._sdf_local((np.asarray(points, dtype=float) - self.pose.p) @ R)

    def to_dict(self) -> dict:
        d = {"type": self.kind, "pose": self.pose.to_list()}
        if self.kind == "box":
            d["size"] = [float(v) for v in self.size]
        elif self.kind == "sphere":
            d["radius"] = self.radius
        elif self.kind in ("cylinder", "tube"):
            d["radius"] = self.radius
            d["height"] = self.height
            if self.kind == "tube":
                d["inner_radius"] = self.inner_radius
        elif self.kind == "composite":
            d["parts"] = [p.to_dict() for p in self.parts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Primitive:
        kind = d["type"]
        if kind not in ("box", "sphere", "cylinder", "tube", "composite"):
            raise ValueError(f"unknown primitive type {kind!r}")
        pose = Pose.from_list(d.get("pose", [0, 0, 0, 0, 0, 0, 1]))
        return cls(
            kind,
            pose,
            tuple(d.get("size", (0.0, 0.0, 0.0))),
            float(d.get("radius", 0.0)),
            float(d.get("inner_radius", 0.0)),
            float(d.get("height", 0.0)),
            [cls.from_dict(p) for p in d.get("parts", [])],
        )


@dataclass
class Scene:
    """Union of solid primitives."""

    primitives: list
    name: str = ""

    def solids(self) -> list:
        out = []
        for p in self.primitives:
            out.extend(p.flatten())
        return out

    def sdf(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.min([s.sdf(points) for s in self.solids()], axis=0)

    def surface_normal(self, points, eps: float = 1e-5) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        g = np.zeros_like(points)
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = eps
            g[:, ax] = self.sdf(points + e) - self.sdf(points - e)
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)

    def raycast(self, origins, dirs):
        best_t = np.full(len(origins), np.inf)
        best_n = np.zeros((len(origins), 3))
        for s in self.solids():
            t, n = s.raycast(origins, dirs)
            better = t < best_t
            best_t[better] = t[better]
            best_n[better] = n[better]
        return best_t, best_n

    def to_dict(self) -> dict:
        return {"name": self.name, "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        return cls([Primitive.from_dict(p) for p in d["primitives"]], d.get("name", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> Scene:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking along its local +z (x right, y down)."""

    pose: Pose
    width: int = 160
    height: int = 120
    fov_deg: float = 45.0

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(0.5 * np.deg2rad(self.fov_deg))

    def ray_dirs(self) -> np.ndarray:
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        f = self.focal
        d = np.stack([(u - 0.5 * self.width) / f, (v - 0.5 * self.height) / f, np.ones_like(u)], -1).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d @ self.pose.rotation().T


def simulate_depth_view(
    scene: Scene,
    camera: Camera,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    with_normals: bool = False,
) -> PointCloud:
    """Ray-cast the first visible surface for every pixel.

    ``noise_std`` is Gaussian noise on depth (camera z), in metres. When
    ``with_normals`` is set the analytic surface normals are attached.
    """
    if scene.sdf(camera.pose.p[None, :])[0] <= 0:
        raise ValueError("camera is inside the object")
    dirs = camera.ray_dirs()
    origins = np.broadcast_to(camera.pose.p, dirs.shape)
    t, n = scene.raycast(origins, dirs)
    hit = np.isfinite(t)
    if not hit.any():
        raise ValueError("no surface visible from camera")
    t = t[hit]
    dirs = dirs[hit]
    if noise_std > 0:
        rng = np.random.default_rng() if rng is None else rng
        fwd = quat_to_matrix(camera.pose.q)[:, 2]
        t = t + noise_std * rng.standard_normal(len(t)) / (dirs @ fwd)
    pts = camera.pose.p + t[:, None] * dirs
    return PointCloud(pts, n[hit] if with_normals else None, camera.pose.p.copy())
