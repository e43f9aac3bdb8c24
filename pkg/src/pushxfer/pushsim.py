"""Synthetic shapes and a quasi-static planar push simulator.

Objects are upright extrusions of a convex footprint resting on a planar
ground.  The support friction is modelled by an ellipsoidal limit surface,

    V = H W,    H = diag(1, 1, 1 / c^2),

mapping the wrench ``W`` applied by the pusher (about the centre of mass,
world-aligned axes) to the object twist ``V``; ``c`` is the mean distance of
the uniform pressure distribution from the centre of mass.  Force magnitudes
are scale free in the quasi-static regime, so ground friction drops out and
only the pusher friction coefficient matters.  Pusher contacts are Coulomb
point contacts; each step solves the resulting complementarity problem by
enumerating separate / stick / slide modes for at most two contacts.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCloud, NoContactDuringPush, UnknownShape
from .features import PointCloud
from .geom import Pose, compose_arrays, inverse, qyaw, yaw_of

SHAPE_KINDS = ("cube", "cuboid", "box", "triangular-prism", "rounded-prism", "cylinder")


@dataclass(frozen=True)
class ShapeSpec:
    """Upright extruded shape.

    ``dims`` per kind: cube ``(side,)``; cuboid/box ``(length, width, height)``;
    triangular-prism ``(side, height)``; rounded-prism ``(side, height,
    fillet_radius)``; cylinder ``(radius, height)``.
    """

    kind: str
    dims: tuple
    mass: float = 0.5
    density: float = 1e4
    name: str = ""

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise UnknownShape(f"unknown shape kind {self.kind!r}")
        dims = tuple(float(d) for d in self.dims)
        if not dims or any(not d > 0 for d in dims):
            raise ValueError("shape dimensions must be positive")
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.density <= 0:
            raise ValueError("sampling density must be positive")
        object.__setattr__(self, "dims", dims)
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    @property
    def height(self) -> float:
        if self.kind == "cube":
            return self.dims[0]
        if self.kind in ("cuboid", "box"):
            return self.dims[2]
        return self.dims[1]

    def to_text(self) -> str:
        return "\n".join([
            f"name={self.name}",
            f"kind={self.kind}",
            "dims=" + ",".join(repr(float(d)) for d in self.dims),
            f"mass={self.mass!r}",
            f"density={self.density!r}",
        ]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ShapeSpec":
        vals = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"expected key=value, got {raw!r}")
            vals[key.strip()] = val.strip()
        if "kind" not in vals or "dims" not in vals:
            raise ValueError("shape spec needs kind and dims")
        return cls(
            kind=vals["kind"],
            dims=tuple(float(x) for x in vals["dims"].split(",")),
            mass=float(vals.get("mass", 0.5)),
            density=float(vals.get("density", 1e4)),
            name=vals.get("name", ""),
        )


PRESET_SHAPES = {
    "cube": ShapeSpec("cube", (0.2,), name="cube"),
    "cuboid": ShapeSpec("cuboid", (0.3, 0.2, 0.2), name="cuboid"),
    "triangular-prism": ShapeSpec("triangular-prism", (0.2, 0.2), name="triangular-prism"),
    "rounded-prism": ShapeSpec("rounded-prism", (0.2, 0.2, 0.05), name="rounded-prism"),
    "cylinder": ShapeSpec("cylinder", (0.1, 0.2), name="cylinder"),
}


def preset_shape(name: str, density: float | None = None) -> ShapeSpec:
    try:
        spec = PRESET_SHAPES[name]
    except KeyError:
        raise UnknownShape(f"unknown shape preset {name!r}") from None
    if density is not None:
        spec = ShapeSpec(spec.kind, spec.dims, spec.mass, density, spec.name)
    return spec


# ------------------------------------------------------------------ footprints

def _triangle(side):
    h = side * math.sqrt(3.0) / 2.0
    return np.array([[-side / 2, -h / 3], [side / 2, -h / 3], [0.0, 2 * h / 3]])


def _boundary(spec: ShapeSpec):
    """Footprint boundary as CCW pieces: ("seg", a, b) or ("arc", centre, radius, t0, t1)."""
    k, d = spec.kind, spec.dims
    if k == "cylinder":
        return [("arc", np.zeros(2), d[0], 0.0, 2 * math.pi)]
    if k in ("cube", "cuboid", "box"):
        lx, ly = (d[0], d[0]) if k == "cube" else (d[0], d[1])
        c = np.array([[-lx / 2, -ly / 2], [lx / 2, -ly / 2], [lx / 2, ly / 2], [-lx / 2, ly / 2]])
        return [("seg", c[i], c[(i + 1) % 4]) for i in range(4)]
    tri = _triangle(d[0])
    if k == "triangular-prism":
        return [("seg", tri[i], tri[(i + 1) % 3]) for i in range(3)]
    # rounded-prism: fillet of radius rf replaces the apex vertex
    rf = d[2] if len(d) > 2 else 0.05
    apex, a, b = tri[2], tri[0], tri[1]
    half = math.pi / 6.0  # half interior angle of an equilateral triangle
    dist = rf / math.sin(half)
    bis = (np.array([0.0, 0.0]) - apex)
    bis /= np.linalg.norm(bis)
    centre = apex + dist * bis
    tlen = rf / math.tan(half)
    t_right = apex + tlen * (b - apex) / np.linalg.norm(b - apex)
    t_left = apex + tlen * (a - apex) / np.linalg.norm(a - apex)
    t0 = math.atan2(*(t_right - centre)[::-1])
    t1 = math.atan2(*(t_left - centre)[::-1])
    if t1 < t0:
        t1 += 2 * math.pi
    return [("seg", a, b), ("seg", b, t_right), ("arc", centre, rf, t0, t1), ("seg", t_left, a)]


def _piece_length(piece):
    if piece[0] == "seg":
        return float(np.linalg.norm(piece[2] - piece[1]))
    return piece[2] * (piece[4] - piece[3])


def _polygon(pieces, arc_step=math.radians(3.75)):
    pts = []
    for pc in pieces:
        if pc[0] == "seg":
            pts.append(pc[1])
        else:
            _, c, R, t0, t1 = pc
            closed = abs((t1 - t0) - 2 * math.pi) < 1e-12
            n = max(2, int(math.ceil((t1 - t0) / arc_step)))
            ts = np.linspace(t0, t1, n, endpoint=not closed)
            pts.extend(c + R * np.c_[np.cos(ts), np.sin(ts)])
    poly = np.array(pts, dtype=float)
    keep = np.ones(len(poly), dtype=bool)
    for i in range(len(poly)):
        if np.linalg.norm(poly[i] - poly[i - 1]) < 1e-12:
            keep[i] = False
    return poly[keep]


def polygon_area_centroid(poly):
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6 * area)
    cy = ((y + yn) * cross).sum() / (6 * area)
    return area, np.array([cx, cy])


def _edge_normals(poly):
    e = np.roll(poly, -1, axis=0) - poly
    n = np.c_[e[:, 1], -e[:, 0]]
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def inside_polygon(poly, pts, margin=0.0):
    """True where points lie inside the convex CCW polygon by more than ``margin``."""
    pts = np.atleast_2d(pts)
    normals = _edge_normals(poly)
    s = np.einsum("mkd,kd->mk", pts[:, None, :] - poly[None, :, :], normals)
    return np.all(s < -margin, axis=1)


def support_radius(poly, n_grid=200):
    """Mean distance from the area centroid under uniform pressure."""
    area, c = polygon_area_centroid(poly)
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    xs = np.linspace(lo[0], hi[0], n_grid)
    ys = np.linspace(lo[1], hi[1], n_grid)
    g = np.stack(np.meshgrid(xs, ys), -1).reshape(-1, 2)
    ins = inside_polygon(poly, g)
    return float(np.mean(np.linalg.norm(g[ins] - c, axis=1)))


@dataclass
class GeneratedShape:
    """A sampled shape in its body frame (origin at the centre of mass)."""

    spec: ShapeSpec
    cloud: PointCloud
    normals: np.ndarray
    curvature: np.ndarray
    footprint: np.ndarray
    height: float
    support_radius: float
    part: np.ndarray = field(default=None)

    def world_cloud(self, pose: Pose) -> PointCloud:
        return self.cloud.transformed(pose)

    def resting_pose(self, x=0.0, y=0.0, theta=0.0, ground=0.0) -> Pose:
        return Pose.planar(x, y, theta, z=ground + self.height / 2.0)


def gen_shape(spec: ShapeSpec, rng, view_origin=None) -> GeneratedShape:
    """Sample the surface of ``spec`` at ``spec.density`` points per m².

    Parts: 0 = side wall, 1 = top, 2 = bottom.  ``view_origin`` (body frame)
    enables single-view culling.
    """
    pieces = _boundary(spec)
    poly = _polygon(pieces)
    area, com = polygon_area_centroid(poly)
    H = spec.height
    pts, nrm, curv, part = [], [], [], []
    for pc in pieces:
        L = _piece_length(pc)
        n = int(round(spec.density * L * H))
        if n == 0:
            continue
        s = rng.uniform(0.0, 1.0, n)
        z = rng.uniform(0.0, H, n)
        if pc[0] == "seg":
            a, b = pc[1], pc[2]
            xy = a + s[:, None] * (b - a)
            d = (b - a) / np.linalg.norm(b - a)
            nn = np.tile([d[1], -d[0]], (n, 1))
            cv = np.zeros((n, 2))
        else:
            _, c, R, t0, t1 = pc
            t = t0 + s * (t1 - t0)
            nn = np.c_[np.cos(t), np.sin(t)]
            xy = c + R * nn
            cv = np.tile([1.0 / R, 0.0], (n, 1))
        pts.append(np.c_[xy, z])
        nrm.append(np.c_[nn, np.zeros(n)])
        curv.append(cv)
        part.append(np.zeros(n, dtype=int))
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    for zval, nz, tag in ((H, 1.0, 1), (0.0, -1.0, 2)):
        n = int(round(spec.density * area))
        xy = np.zeros((0, 2))
        while len(xy) < n:
            cand = rng.uniform(lo, hi, size=(2 * n + 8, 2))
            xy = np.concatenate([xy, cand[inside_polygon(poly, cand)]])
        xy = xy[:n]
        pts.append(np.c_[xy, np.full(n, zval)])
        nrm.append(np.tile([0.0, 0.0, nz], (n, 1)))
        curv.append(np.zeros((n, 2)))
        part.append(np.full(n, tag))
    pts = np.concatenate(pts)
    nrm = np.concatenate(nrm)
    curv = np.concatenate(curv)
    part = np.concatenate(part)
    shift = np.array([com[0], com[1], H / 2.0])
    pts = pts - shift
    poly = poly - com
    vo = None
    if view_origin is not None:
        vo = np.asarray(view_origin, dtype=float)
        visible = np.einsum("ni,ni->n", nrm, vo - pts) > 0
        pts, nrm, curv, part = pts[visible], nrm[visible], curv[visible], part[visible]
    return GeneratedShape(spec, PointCloud(pts, vo), nrm, curv, poly, H, support_radius(poly), part)


def estimate_pose_from_cloud(cloud) -> Pose:
    """Centroid plus covariance eigenframe.

    Axes are ordered by decreasing variance; the first two get their first
    non-negligible component positive and z = x × y.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(pts) < 4:
        raise DegenerateCloud("need at least 4 points")
    c = pts.mean(axis=0)
    cov = np.cov((pts - c).T)
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 1e-12 * max(evals[2], 1e-300):
        raise DegenerateCloud("points are coplanar")
    axes = evecs[:, ::-1].copy()
    for j in range(2):
        v = axes[:, j]
        nz = np.flatnonzero(np.abs(v) > 1e-9)
        if len(nz) and v[nz[0]] < 0:
            axes[:, j] = -v
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    from .geom import qfrom_matrix

    return Pose(c, qfrom_matrix(axes))


# ----------------------------------------------------------------------- robot

@dataclass(frozen=True)
class LinkSpec:
    """Rectangular bumper plate.

    The link frame sits at the centre of the plate's front face with x along
    the outward normal (the pushing direction) and z up.  ``offset`` is the
    link frame in the robot base frame.
    """

    name: str
    offset: Pose
    width: float = 0.3
    height: float = 0.1
    thickness: float = 0.02

    def surface_points(self, spacing=0.005) -> np.ndarray:
        ys = np.arange(-self.width / 2, self.width / 2 + 1e-12, spacing)
        zs = np.arange(-self.height / 2, self.height / 2 + 1e-12, spacing)
        g = np.stack(np.meshgrid(ys, zs), -1).reshape(-1, 2)
        return np.c_[np.zeros(len(g)), g]

    def base_from_link(self, link_pose: Pose) -> Pose:
        from .geom import compose

        return compose(link_pose, inverse(self.offset))

    def link_from_base(self, base_pose: Pose) -> Pose:
        from .geom import compose

        return compose(base_pose, self.offset)


LINK_HEIGHT = 0.06


def default_links(width=0.3, height=0.1) -> dict:
    front = LinkSpec("front", Pose.planar(0.25, 0.0, 0.0, z=LINK_HEIGHT), width, height)
    side = LinkSpec("side", Pose.planar(0.30, 0.18, math.radians(45.0), z=LINK_HEIGHT), width, height)
    return {"front": front, "side": side}


def project_link_poses(P, Q, link_height=LINK_HEIGHT):
    """Snap link poses to the plane: keep x, y and the heading of the link x-axis."""
    P = np.atleast_2d(P)
    Q = np.atleast_2d(Q)
    from .geom import qrot

    xa = qrot(Q, np.array([1.0, 0.0, 0.0]))
    yaw = np.arctan2(xa[:, 1], xa[:, 0])
    P2 = np.c_[P[:, :2], np.full(len(P), link_height)]
    return P2, qyaw(yaw)


# ------------------------------------------------------------------- simulator

@dataclass(frozen=True)
class Action:
    id: str
    linear: tuple = (0.1, 0.0, 0.0)
    angular_z_deg: float = 0.0
    duration: float = 4.0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("action duration must be positive")
        object.__setattr__(self, "linear", tuple(float(v) for v in self.linear))


@dataclass(frozen=True)
class SimConfig:
    friction_range: tuple = (0.15, 0.35)
    pressure_radius: float | None = None
    timestep: float = 0.01
    ground_height: float = 0.0
    waypoints: int = 10
    contact_tol: float = 0.002

    def __post_init__(self):
        lo, hi = self.friction_range
        if not (0 < lo <= hi):
            raise ValueError("friction range must be positive with min <= max")
        if not self.timestep > 0:
            raise ValueError("timestep must be positive")


def sample_friction(cfg: SimConfig, rng) -> float:
    lo, hi = cfg.friction_range
    return float(rng.uniform(lo, hi))


@dataclass
class SimResult:
    times: np.ndarray
    object_poses: list
    link_poses: list
    frames: dict
    contact_lost: bool
    contact_made: bool

    @property
    def object_motion(self):
        from .geom import motion_between

        return motion_between(self.object_poses[0], self.object_poses[-1])

    def frame_motion(self, name):
        from .geom import motion_between

        traj = self.frames[name]
        return motion_between(traj[0], traj[-1])

    def trajectory_rows(self, which="object"):
        poses = self.object_poses if which == "object" else (
            self.link_poses if which == "link" else self.frames[which])
        return [[float(t)] + p.as_list() for t, p in zip(self.times, poses)]


def _plate_geometry(base, link: LinkSpec):
    """2D plate centre, normal and tangent from a planar base state (x, y, th)."""
    bx, by, bth = base
    ox, oy = link.offset.p[:2]
    oth = float(yaw_of(link.offset.q))
    c, s = math.cos(bth), math.sin(bth)
    centre = np.array([bx + c * ox - s * oy, by + s * ox + c * oy])
    th = bth + oth
    return centre, np.array([math.cos(th), math.sin(th)]), np.array([-math.sin(th), math.cos(th)])


def _find_contacts(verts, poly_normals, centre, n_l, t_l, link: LinkSpec, tol):
    """Contacts between the plate front face and the object polygon (world)."""
    hw = link.width / 2.0
    rel = verts - centre
    xl = rel @ n_l
    yl = rel @ t_l
    cands = []
    sel = (xl < tol) & (xl > -link.thickness - 0.05) & (np.abs(yl) <= hw)
    for i in np.flatnonzero(sel):
        cands.append((verts[i], n_l, float(xl[i]), float(yl[i])))
    for sgn in (-1.0, 1.0):
        e = centre + sgn * hw * t_l
        s = np.einsum("kd,kd->k", e - verts, poly_normals)
        k = int(np.argmax(s))
        if s[k] < tol and -(poly_normals[k] @ n_l) > 0.1:
            if not any(np.linalg.norm(e - c[0]) < 1e-6 for c in cands):
                cands.append((e, -poly_normals[k], float(s[k]), sgn * hw))
    if len(cands) > 2:
        cands.sort(key=lambda c: c[3])
        cands = [cands[0], cands[-1]]
    return cands


_MODES = ("sep", "stick", "slide+", "slide-")


def _solve_lcp(contacts, com, c2, vel_fn, mu, dt, hint=None):
    """Object twist (vx, vy, w) at the COM for the given pusher contacts.

    Returns ``(twist, modes)``; ``hint`` is tried first (the previous step's
    modes), then all mode combinations in a fixed order.
    """
    n = len(contacts)
    Hd = np.array([1.0, 1.0, 1.0 / c2])
    J = np.zeros((2 * n, 3))
    b = np.zeros(2 * n)
    for i, (p, nrm, gap, _) in enumerate(contacts):
        t = np.array([-nrm[1], nrm[0]])
        r = p - com
        B = np.array([[1.0, 0.0, -r[1]], [0.0, 1.0, r[0]]])
        J[2 * i] = nrm @ B
        J[2 * i + 1] = t @ B
        vp = vel_fn(p)
        b[2 * i] = nrm @ vp - max(gap, 0.0) / dt
        b[2 * i + 1] = t @ vp
    D = (J * Hd) @ J.T
    D += np.eye(2 * n) * (1e-10 * max(np.trace(D) / (2 * n), 1e-12))
    tolv = 1e-9
    best = None
    order = list(itertools.product(_MODES, repeat=n))
    if hint is not None and len(hint) == n:
        order.insert(0, hint)
    for modes in order:
        A = np.zeros((2 * n, 2 * n))
        rhs = np.zeros(2 * n)
        for i, m in enumerate(modes):
            rn, rt = 2 * i, 2 * i + 1
            if m == "sep":
                A[rn, rn] = 1.0
                A[rt, rt] = 1.0
            elif m == "stick":
                A[rn] = D[rn]
                rhs[rn] = b[rn]
                A[rt] = D[rt]
                rhs[rt] = b[rt]
            else:
                sgn = 1.0 if m == "slide+" else -1.0
                A[rn] = D[rn]
                rhs[rn] = b[rn]
                A[rt, rt] = 1.0
                A[rt, rn] = sgn * mu
        try:
            x = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            continue
        g = D @ x - b
        viol = 0.0
        for i, m in enumerate(modes):
            fn, ft = x[2 * i], x[2 * i + 1]
            gn, gt = g[2 * i], g[2 * i + 1]
            scale = abs(fn) + abs(ft) + 1e-12
            if m == "sep":
                viol += max(0.0, -gn - tolv)
            elif m == "stick":
                viol += max(0.0, -fn) + max(0.0, abs(ft) - mu * fn - 1e-9 * scale)
            else:
                sgn = 1.0 if m == "slide+" else -1.0
                viol += max(0.0, -fn) + max(0.0, -sgn * gt - tolv)
        if viol <= 1e-12:
            return Hd * (J.T @ x), modes
        if best is None or viol < best[0]:
            best = (viol, Hd * (J.T @ x), modes)
    return (best[1], best[2]) if best is not None else (np.zeros(3), None)


def simulate_push(shape: GeneratedShape, object_pose: Pose, link_pose: Pose, link: LinkSpec,
                  action: Action, mu: float, cfg: SimConfig | None = None,
                  frames: dict | None = None, require_contact: bool = True) -> SimResult:
    """Push ``shape`` (resting at ``object_pose``) with ``link`` executing ``action``.

    ``frames`` maps names to world poses rigidly attached to the object; their
    trajectories are integrated alongside the object's.
    """
    cfg = cfg or SimConfig()
    dt = cfg.timestep
    n_steps = int(round(action.duration / dt))
    c = cfg.pressure_radius or shape.support_radius
    c2 = c * c

    obj = np.array([object_pose.p[0], object_pose.p[1], float(yaw_of(object_pose.q))])
    obj_z = float(object_pose.p[2])
    base_pose = link.base_from_link(link_pose)
    base = np.array([base_pose.p[0], base_pose.p[1], float(yaw_of(base_pose.q))])
    base_z = float(base_pose.p[2])
    v_lin = np.array(action.linear[:2])
    w = math.radians(action.angular_z_deg)

    names = list(frames or {})
    FP = np.array([frames[k].p for k in names]).reshape(-1, 3)
    FQ = np.array([frames[k].q for k in names]).reshape(-1, 4)
    poly_local = shape.footprint
    poly_normals_local = _edge_normals(poly_local)

    record_at = set(np.unique(np.round(np.linspace(0, n_steps, cfg.waypoints + 2)).astype(int)).tolist())
    times, obj_traj, link_traj, frame_traj = [], [], [], {k: [] for k in names}
    contact_made = False
    in_contact = False
    hint = None

    def record(step):
        times.append(step * dt)
        obj_traj.append(Pose.planar(obj[0], obj[1], obj[2], z=obj_z))
        bp = Pose.planar(base[0], base[1], base[2], z=base_z)
        link_traj.append(link.link_from_base(bp))
        for j, k in enumerate(names):
            frame_traj[k].append(Pose(FP[j], FQ[j]))

    for step in range(n_steps + 1):
        if step in record_at:
            record(step)
        if step == n_steps:
            break
        cth, sth = math.cos(obj[2]), math.sin(obj[2])
        Rz = np.array([[cth, -sth], [sth, cth]])
        verts = poly_local @ Rz.T + obj[:2]
        pnorm = poly_normals_local @ Rz.T
        centre, n_l, t_l = _plate_geometry(base, link)
        vb = np.array([math.cos(base[2]) * v_lin[0] - math.sin(base[2]) * v_lin[1],
                       math.sin(base[2]) * v_lin[0] + math.cos(base[2]) * v_lin[1]])
        bpos = base[:2].copy()

        def vel_fn(p, vb=vb, bpos=bpos):
            r = p - bpos
            return vb + w * np.array([-r[1], r[0]])

        contacts = _find_contacts(verts, pnorm, centre, n_l, t_l, link, cfg.contact_tol)
        in_contact = any(cn[2] < 1e-4 for cn in contacts)
        V = np.zeros(3)
        if contacts:
            V, hint = _solve_lcp(contacts, obj[:2], c2, vel_fn, mu, dt, hint)
            if np.abs(V).max() > 0:
                contact_made = True
        if in_contact:
            contact_made = True
        if np.any(V != 0.0):
            dth = V[2] * dt
            new = np.array([obj[0] + V[0] * dt, obj[1] + V[1] * dt, obj[2] + dth])
            _apply_world_delta(obj, new, obj_z, FP, FQ)
            obj[:] = new
        # robot base: exact integration of a constant body twist
        th0 = base[2]
        if abs(w) > 1e-12:
            th1 = th0 + w * dt
            vx, vy = v_lin
            base[0] += (vx * (math.sin(th1) - math.sin(th0)) + vy * (math.cos(th1) - math.cos(th0))) / w
            base[1] += (vx * (math.cos(th0) - math.cos(th1)) + vy * (math.sin(th1) - math.sin(th0))) / w
            base[2] = th1
        else:
            base[:2] += vb * dt
        # resolve residual penetration along the contact normals
        if contacts:
            _depenetrate(obj, obj_z, poly_local, poly_normals_local, base, link, FP, FQ)

    final_contacts = _find_contacts(
        *_world_poly(obj, poly_local, poly_normals_local), *_plate_geometry(base, link), link, cfg.contact_tol)
    in_contact_end = any(cn[2] < cfg.contact_tol for cn in final_contacts)
    if require_contact and not contact_made and not in_contact_end:
        raise NoContactDuringPush("the link never touched the object")
    moved = abs(v_lin).max() > 0 or abs(w) > 0
    return SimResult(np.array(times), obj_traj, link_traj, frame_traj,
                     contact_lost=bool(contact_made and moved and not in_contact_end),
                     contact_made=bool(contact_made or in_contact_end))


def _world_poly(obj, poly_local, normals_local):
    cth, sth = math.cos(obj[2]), math.sin(obj[2])
    Rz = np.array([[cth, -sth], [sth, cth]])
    return poly_local @ Rz.T + obj[:2], normals_local @ Rz.T


def _apply_world_delta(old, new, z, FP, FQ):
    """Move attached frames by the planar displacement taking ``old`` to ``new``."""
    if len(FP) == 0:
        return
    dth = new[2] - old[2]
    c, s = math.cos(dth), math.sin(dth)
    rel = FP[:, :2] - old[:2]
    FP[:, 0] = c * rel[:, 0] - s * rel[:, 1] + new[0]
    FP[:, 1] = s * rel[:, 0] + c * rel[:, 1] + new[1]
    hw, hz = math.cos(0.5 * dth), math.sin(0.5 * dth)
    w, x, y, zq = FQ[:, 0].copy(), FQ[:, 1].copy(), FQ[:, 2].copy(), FQ[:, 3].copy()
    FQ[:, 0] = hw * w - hz * zq
    FQ[:, 1] = hw * x - hz * y
    FQ[:, 2] = hw * y + hz * x
    FQ[:, 3] = hw * zq + hz * w
    FQ /= np.linalg.norm(FQ, axis=1, keepdims=True)


def _depenetrate(obj, obj_z, poly_local, normals_local, base, link, FP, FQ):
    for _ in range(3):
        verts, pnorm = _world_poly(obj, poly_local, normals_local)
        centre, n_l, t_l = _plate_geometry(base, link)
        contacts = _find_contacts(verts, pnorm, centre, n_l, t_l, link, 0.0)
        worst = min((cn for cn in contacts), key=lambda cn: cn[2], default=None)
        if worst is None or worst[2] > -1e-9:
            return
        shift = -worst[2] * worst[1]
        new = obj.copy()
        new[:2] += shift
        _apply_world_delta(obj, new, obj_z, FP, FQ)
        obj[:] = new


def write_trajectory_csv(path, result: SimResult, which="object") -> None:
    with open(path, "w") as fh:
        fh.write("t,x,y,z,qw,qx,qy,qz\n")
        for row in result.trajectory_rows(which):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
