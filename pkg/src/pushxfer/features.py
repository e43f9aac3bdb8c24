"""Oriented surface features from point clouds.

A feature is a pose whose z-axis is the outward surface normal and whose
x-axis is the direction of highest curvature, plus the principal curvatures
``r = (r1, r2)`` with ``r1 >= r2``.  Curvatures are signed: positive on convex
surfaces (outward normals).

Where the surface is (nearly) umbilic, e.g. a flat face, the principal
direction is undefined.  There the x-axis falls back to the horizontal tangent
``up × n`` so that frames on vertical faces are gravity-consistent across
objects; this is what lets contacts learned on a cube face be compared with
contacts on a cylinder wall.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateNeighborhood, TooFewPoints
from .geom import Pose, qfrom_matrix

DEFAULT_K = 20
UP = np.array([0.0, 0.0, 1.0])


@dataclass
class PointCloud:
    points: np.ndarray
    view_origin: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts
        if self.view_origin is not None:
            self.view_origin = np.asarray(self.view_origin, dtype=float).reshape(3)

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose) -> "PointCloud":
        vo = None if self.view_origin is None else pose.transform_points(self.view_origin)
        return PointCloud(pose.transform_points(self.points), vo)


@dataclass(frozen=True, eq=False)
class SurfaceFeature:
    v: Pose
    r: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=float).reshape(2)
        r.setflags(write=False)
        object.__setattr__(self, "r", r)


@dataclass
class FeatureSet:
    """Array form of a list of features; ``index`` maps back into the cloud."""

    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 4)
        self.r = np.asarray(self.r, dtype=float).reshape(-1, 2)
        if self.index is None:
            self.index = np.arange(len(self.p))

    def __len__(self):
        return len(self.p)

    def __getitem__(self, i) -> SurfaceFeature:
        return SurfaceFeature(Pose(self.p[i], self.q[i]), self.r[i])

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet(self.p[idx], self.q[idx], self.r[idx], self.index[idx])

    def to_list(self) -> list[SurfaceFeature]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def from_list(cls, feats) -> "FeatureSet":
        feats = list(feats)
        if not feats:
            return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)))
        return cls(
            np.array([f.v.p for f in feats]),
            np.array([f.v.q for f in feats]),
            np.array([f.r for f in feats]),
        )

    def transformed(self, pose: Pose) -> "FeatureSet":
        from .geom import compose_arrays

        p, q = compose_arrays(pose.p, pose.q, self.p, self.q)
        return FeatureSet(p, q, self.r.copy(), self.index.copy())


def _as_points(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points, cloud.view_origin
    return PointCloud(cloud).points, None


def _neighbors(points, k):
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k)
    return idx.reshape(len(points), k)


def estimate_normals(cloud, k: int = DEFAULT_K, on_degenerate: str = "raise") -> np.ndarray:
    """PCA normals from the ``k`` nearest neighbours (including the point itself).

    Normals point toward the cloud's view origin when it has one, otherwise
    away from the centroid.  With ``on_degenerate="skip"`` rows for collinear
    neighbourhoods are NaN instead of raising.
    """
    points, view = _as_points(cloud)
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(points) < k:
        raise TooFewPoints(f"cloud has {len(points)} points, need at least k={k}")
    idx = _neighbors(points, k)
    nb = points[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-10 * scale
    if degenerate.any() and on_degenerate == "raise":
        raise DegenerateNeighborhood(f"{int(degenerate.sum())} neighbourhoods are collinear")

    if view is not None:
        ref = view[None, :] - points
    else:
        ref = points - points.mean(axis=0)
    dots = np.einsum("ni,ni->n", normals, ref)
    extent = np.linalg.norm(ref, axis=1)
    ambiguous = np.abs(dots) <= 1e-9 * np.maximum(extent, 1e-12)
    flip = np.where(ambiguous, _first_nonzero_negative(normals), dots < 0.0)
    normals[flip] *= -1.0
    normals[degenerate] = np.nan
    return normals


def _first_nonzero_negative(vecs, eps=1e-12):
    out = np.zeros(len(vecs), dtype=bool)
    decided = np.zeros(len(vecs), dtype=bool)
    for j in range(vecs.shape[1]):
        comp = vecs[:, j]
        nz = (~decided) & (np.abs(comp) > eps)
        out[nz] = comp[nz] < 0.0
        decided |= nz
    return out


def _tangent_basis(normals):
    # any orthonormal (e1, e2) with e1 x e2 = n
    helper = np.where(np.abs(normals[:, 2:3]) < 0.9, UP, np.array([1.0, 0.0, 0.0]))
    e1 = np.cross(helper, normals)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(normals, e1)
    return e1, e2


def estimate_curvatures(cloud, normals, k: int = DEFAULT_K, aniso_tol: float = 2.0,
                        on_degenerate: str = "raise"):
    """Principal directions and curvatures by a local quadric fit.

    Returns ``(k1, r)`` with ``k1`` of shape (N, 3) and ``r`` of shape (N, 2).
    ``aniso_tol`` (1/m) is the anisotropy ``r1 - r2`` below which ``k1`` is
    replaced by the horizontal tangent.
    """
    points, _ = _as_points(cloud)
    normals = np.asarray(normals, dtype=float)
    if k < 5:
        raise ValueError("k must be at least 5")
    if len(points) < k:
        raise TooFewPoints(f"cloud has {len(points)} points, need at least k={k}")
    n_pts = len(points)
    k1 = np.full((n_pts, 3), np.nan)
    r = np.full((n_pts, 2), np.nan)
    valid = np.all(np.isfinite(normals), axis=1)
    if not valid.any():
        if on_degenerate == "raise":
            raise DegenerateNeighborhood("no valid normals")
        return k1, r

    idx = _neighbors(points, k)[valid]
    n = normals[valid]
    e1, e2 = _tangent_basis(n)
    d = points[idx] - points[valid][:, None, :]
    x = np.einsum("nki,ni->nk", d, e1)
    y = np.einsum("nki,ni->nk", d, e2)
    z = np.einsum("nki,ni->nk", d, n)
    rho = np.sqrt(np.mean(x * x + y * y, axis=1))[:, None]
    rho = np.where(rho > 0, rho, 1.0)
    xs, ys = x / rho, y / rho
    if k - 1 >= 5:
        A = np.stack([xs * xs, xs * ys, ys * ys, xs, ys], axis=-1)
    else:
        A = np.stack([xs * xs, xs * ys, ys * ys], axis=-1)
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    rank_ok = s[:, -1] > 1e-8 * s[:, 0]
    bad = ~rank_ok
    if bad.any() and on_degenerate == "raise":
        raise DegenerateNeighborhood(f"{int(bad.sum())} quadric fits are rank deficient")
    s_inv = np.where(rank_ok[:, None], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    coef = np.einsum("nji,nj,nkj,nk->ni", vt, s_inv, u, z)
    a = coef[:, 0] / rho[:, 0] ** 2
    b = coef[:, 1] / rho[:, 0] ** 2
    c = coef[:, 2] / rho[:, 0] ** 2
    if coef.shape[1] == 5:
        gx = coef[:, 3] / rho[:, 0]
        gy = coef[:, 4] / rho[:, 0]
    else:
        gx = gy = np.zeros_like(a)

    # shape operator W = I^{-1} II, solved as a symmetric problem through chol(I)
    g = np.sqrt(1.0 + gx * gx + gy * gy)
    I11, I12, I22 = 1.0 + gx * gx, gx * gy, 1.0 + gy * gy
    II = np.stack([np.stack([2 * a, b], -1), np.stack([b, 2 * c], -1)], -2) / g[:, None, None]
    L11 = np.sqrt(I11)
    L21 = I12 / L11
    L22 = np.sqrt(I22 - L21 * L21)
    Linv = np.zeros((len(a), 2, 2))
    Linv[:, 0, 0] = 1.0 / L11
    Linv[:, 1, 1] = 1.0 / L22
    Linv[:, 1, 0] = -L21 / (L11 * L22)
    M = Linv @ II @ np.swapaxes(Linv, 1, 2)
    kappa, vecs = np.linalg.eigh(M)
    # r = -kappa so convex surfaces (bending away from the outward normal) are positive;
    # the most negative kappa becomes r1
    r_valid = np.stack([-kappa[:, 0], -kappa[:, 1]], axis=1)
    dirs = np.einsum("nji,nj->ni", Linv, vecs[:, :, 0])  # L^{-T} y
    k1_valid = dirs[:, 0:1] * e1 + dirs[:, 1:2] * e2
    k1_valid = _fix_directions(k1_valid, n, r_valid, aniso_tol)

    rows = np.flatnonzero(valid)
    good = rows[rank_ok]
    k1[good] = k1_valid[rank_ok]
    r[good] = r_valid[rank_ok]
    return k1, r


def _fix_directions(k1, n, r, aniso_tol):
    horiz = np.cross(UP, n)
    hnorm = np.linalg.norm(horiz, axis=1, keepdims=True)
    has_horiz = hnorm[:, 0] > 1e-6
    horiz = np.where(has_horiz[:, None], horiz / np.where(hnorm > 0, hnorm, 1.0), 0.0)

    # fallback direction on horizontal faces: world x (or y) projected to the tangent plane
    ex = np.array([1.0, 0.0, 0.0])
    ey = np.array([0.0, 1.0, 0.0])
    ref = np.where((np.abs(n @ ex) < 0.9)[:, None], ex, ey)
    proj = ref - np.einsum("ni,ni->n", ref, n)[:, None] * n
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)

    isotropic = (r[:, 0] - r[:, 1]) < aniso_tol
    fallback = np.where(has_horiz[:, None], horiz, proj)
    k1 = np.where(isotropic[:, None], fallback, k1)
    k1 = k1 - np.einsum("ni,ni->n", k1, n)[:, None] * n
    k1 /= np.linalg.norm(k1, axis=1, keepdims=True)

    eps = 1e-9
    dh = np.einsum("ni,ni->n", k1, horiz)
    du = k1 @ UP
    flip = np.where(
        np.abs(dh) > eps,
        dh < 0.0,
        np.where(np.abs(du) > eps, du < 0.0, _first_nonzero_negative(k1)),
    )
    k1[flip] *= -1.0
    return k1


def frames_from_directions(normals, k1) -> np.ndarray:
    """Quaternions of frames with x = k1, z = normal, y = z × x."""
    k2 = np.cross(normals, k1)
    R = np.stack([k1, k2, normals], axis=-1)
    return qfrom_matrix(R)


def build_feature_set(cloud, k: int = DEFAULT_K, aniso_tol: float = 2.0) -> FeatureSet:
    """Features for every point with a non-degenerate neighbourhood."""
    points, _ = _as_points(cloud)
    normals = estimate_normals(cloud, k, on_degenerate="skip")
    k1, r = estimate_curvatures(cloud, normals, k, aniso_tol, on_degenerate="skip")
    ok = np.all(np.isfinite(k1), axis=1) & np.all(np.isfinite(r), axis=1)
    idx = np.flatnonzero(ok)
    q = frames_from_directions(normals[ok], k1[ok]) if len(idx) else np.zeros((0, 4))
    return FeatureSet(points[ok], q, r[ok], idx)


def build_features(cloud, k: int = DEFAULT_K, aniso_tol: float = 2.0) -> list[SurfaceFeature]:
    return build_feature_set(cloud, k, aniso_tol).to_list()


# ---------------------------------------------------------------- file formats

def read_ply(path) -> PointCloud:
    """ASCII PLY reader; only the vertex x/y/z properties are used."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vertex = None
        props = []
        in_vertex = False
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n_vertex is None:
            raise ValueError(f"{path}: no vertex element")
        cols = [props.index(c) for c in ("x", "y", "z")]
        rows = [fh.readline().split() for _ in range(n_vertex)]
    pts = np.array([[float(r[c]) for c in cols] for r in rows]).reshape(-1, 3)
    return PointCloud(pts)


def write_ply(path, cloud) -> None:
    points, _ = _as_points(cloud)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in points:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_csv_cloud(path) -> PointCloud:
    pts = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    return PointCloud(pts[:, :3])


def write_csv_cloud(path, cloud) -> None:
    points, _ = _as_points(cloud)
    np.savetxt(path, points, delimiter=",", fmt="%.17g")


def read_cloud(path) -> PointCloud:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_csv_cloud(path)
