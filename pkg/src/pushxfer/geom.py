"""Pose algebra on SE(3).

Quaternions are stored scalar-first ``(w, x, y, z)``.  Motions follow the
body-frame convention ``x_{t+1} = x_t ∘ m``.

The array-level helpers (``qmul``, ``qrot``, ``compose_arrays`` ...) broadcast
over leading axes and are what the density and prediction code use in their
inner loops; ``Pose`` is the value type for everything else.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def qnormalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    # leave rows that are unit up to rounding untouched so reloads are exact
    n = np.where(np.abs(n - 1.0) <= 4e-16, 1.0, n)
    return q / n


def qcanonical(q):
    """Unit quaternion with non-negative scalar part (q and -q are the same rotation)."""
    q = qnormalize(q)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def qconj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def qmul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def qrot(q, v):
    """Rotate vectors ``v`` by unit quaternions ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def qto_matrix(q):
    w, x, y, z = np.moveaxis(qnormalize(q), -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(m.shape[:-1] + (3, 3))


def qfrom_matrix(m):
    """Quaternion from rotation matrices (Shepperd's method, batched)."""
    m = np.asarray(m, dtype=float)
    shape = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    out = np.empty((m.shape[0], 4))
    tr = np.trace(m, axis1=1, axis2=2)
    diag = np.diagonal(m, axis1=1, axis2=2)
    choice = np.argmax(np.concatenate([tr[:, None], diag], axis=1), axis=1)
    for i in range(m.shape[0]):
        r = m[i]
        c = choice[i]
        if c == 0:
            s = 2.0 * np.sqrt(1.0 + tr[i])
            out[i] = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif c == 1:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            out[i] = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif c == 2:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            out[i] = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            out[i] = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return qcanonical(out).reshape(shape + (4,))


def qfrom_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def qyaw(theta):
    """Rotation by ``theta`` radians about world z."""
    half = 0.5 * np.asarray(theta, dtype=float)
    z = np.zeros_like(half)
    return np.stack([np.cos(half), z, z, np.sin(half)], axis=-1)


def yaw_of(q):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def qangle(a, b):
    """Rotation angle (radians) between orientations, antipodal-aware."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    b = b * np.where(np.sum(a * b, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    # half-angle via atan2 stays accurate near zero, unlike arccos of the dot product
    return 2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))


def compose_arrays(p1, q1, p2, q2):
    return p1 + qrot(q1, p2), qnormalize(qmul(q1, q2))


def inverse_arrays(p, q):
    qi = qconj(q)
    return -qrot(qi, p), qi


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: position ``p`` (m) and unit quaternion ``q``."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(3)
        q = np.array(self.q, dtype=float).reshape(4)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("pose components must be finite")
        if np.linalg.norm(q) == 0.0:
            raise ValueError("zero quaternion")
        p.setflags(write=False)
        q = qcanonical(q)
        q.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), IDENTITY_Q)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3], qfrom_matrix(T[:3, :3]))

    @classmethod
    def planar(cls, x, y, theta, z=0.0):
        return cls([x, y, z], qyaw(theta))

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = qto_matrix(self.q)
        T[:3, 3] = self.p
        return T

    @property
    def rotation(self):
        return qto_matrix(self.q)

    def transform_points(self, pts):
        return self.p + qrot(self.q, np.asarray(pts, dtype=float))

    def __matmul__(self, other):
        return compose(self, other)

    def as_list(self):
        return [float(v) for v in self.p] + [float(v) for v in self.q]

    @classmethod
    def from_list(cls, vals):
        vals = list(vals)
        return cls(vals[:3], vals[3:7])

    def allclose(self, other, atol=1e-9):
        dq = min(np.abs(self.q - other.q).max(), np.abs(self.q + other.q).max())
        return bool(np.allclose(self.p, other.p, rtol=0.0, atol=atol) and dq <= atol)

    def __repr__(self):
        p = ", ".join(f"{v:.6g}" for v in self.p)
        q = ", ".join(f"{v:.6g}" for v in self.q)
        return f"{type(self).__name__}(p=[{p}], q=[{q}])"


class RigidMotion(Pose):
    """Body-frame rigid motion; same layout as :class:`Pose`."""


def _as(cls, pose):
    return cls(pose.p, pose.q)


def compose(a: Pose, b: Pose) -> Pose:
    p, q = compose_arrays(a.p, a.q, b.p, b.q)
    return type(a)(p, q) if type(a) is type(b) else Pose(p, q)


def inverse(v: Pose) -> Pose:
    p, q = inverse_arrays(v.p, v.q)
    return type(v)(p, q)


def relative_pose(v: Pose, b: Pose) -> Pose:
    """``h = v⁻¹ ∘ b``: pose of ``b`` expressed in frame ``v``."""
    return _as(Pose, compose(inverse(v), b))


def motion_between(x_t: Pose, x_t1: Pose) -> RigidMotion:
    return _as(RigidMotion, compose(inverse(x_t), x_t1))


def apply_motion(x: Pose, m: RigidMotion) -> Pose:
    return _as(Pose, compose(x, m))


def local_to_object_motion(m_v: RigidMotion, h: Pose) -> RigidMotion:
    """Object motion implied by the motion of a frame sitting at relative pose ``h``."""
    return _as(RigidMotion, compose(compose(inverse(h), m_v), h))


def object_to_local_motion(m_b: RigidMotion, h: Pose) -> RigidMotion:
    return _as(RigidMotion, compose(compose(h, m_b), inverse(h)))


def orientation_distance(a, b) -> float:
    qa = a.q if isinstance(a, Pose) else qnormalize(a)
    qb = b.q if isinstance(b, Pose) else qnormalize(b)
    return float(qangle(qa, qb))


def random_quaternion(rng, size=None):
    """Uniform random unit quaternions."""
    shape = (4,) if size is None else (size, 4)
    return qnormalize(rng.standard_normal(shape))


def random_pose(rng, scale=1.0):
    return Pose(rng.uniform(-scale, scale, 3), random_quaternion(rng))
