"""Query densities: where and how a learned contact can happen on a new object.

A query particle pairs an object feature frame ``v_j`` with a contact-model
sample ``u_i``; its link (or environment) pose is ``s = v_j ∘ u_i`` and its
weight is the curvature likelihood ``N2(r_j | r_i, sigma_r)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .contact import OBJECT_ENVIRONMENT, ContactModel
from .density import (
    Bandwidths,
    ParticleDensity,
    log_pose_kernel_matrix,
    sample_vmf_quaternion,
)
from .errors import EmptyFeatures, EmptyModel, InfeasibleQuery, NoContact
from .features import FeatureSet, PointCloud
from .geom import IDENTITY_Q, Pose, compose_arrays, qcanonical, qrot, relative_pose
from .optimize import AnnealSchedule, anneal_maximize_batch, pose_proposal

DEFAULT_KQ = 200


@dataclass
class QueryDensity:
    """Weighted ``(s, v)`` pairs on one object.

    ``feature`` holds the index of ``v`` in the feature set the density was
    built from and ``r`` that feature's curvature.
    """

    s_p: np.ndarray
    s_q: np.ndarray
    v_p: np.ndarray
    v_q: np.ndarray
    r: np.ndarray
    weights: np.ndarray
    feature: np.ndarray
    bandwidths: Bandwidths
    source_kind: str

    def __len__(self):
        return len(self.weights)

    @property
    def K_Q(self) -> int:
        return len(self)

    @property
    def density(self) -> ParticleDensity:
        """The link-pose marginal ``Q(s)``."""
        return ParticleDensity("feature", self.s_p, self.s_q, self.weights, self.bandwidths, r=self.r)

    @property
    def frame_density(self) -> ParticleDensity:
        """The contact-frame marginal ``Q(v)``."""
        return ParticleDensity("feature", self.v_p, self.v_q, self.weights, self.bandwidths, r=self.r)

    def to_dict(self) -> dict:
        return {
            "format": "pushxfer/query-density",
            "version": 1,
            "source_kind": self.source_kind,
            "bandwidths": self.density.to_dict()["bandwidths"],
            "weights": self.weights.tolist(),
            "feature": self.feature.tolist(),
            "s_p": self.s_p.tolist(),
            "s_q": self.s_q.tolist(),
            "v_p": self.v_p.tolist(),
            "v_q": self.v_q.tolist(),
            "r": self.r.tolist(),
        }

    @classmethod
    def from_dict(cls, doc) -> "QueryDensity":
        arr = lambda k: np.asarray(doc[k], dtype=float)  # noqa: E731
        return cls(arr("s_p").reshape(-1, 3), arr("s_q").reshape(-1, 4), arr("v_p").reshape(-1, 3),
                   arr("v_q").reshape(-1, 4), arr("r").reshape(-1, 2), arr("weights"),
                   np.asarray(doc["feature"], dtype=int), Bandwidths(**doc["bandwidths"]), doc["source_kind"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True, eq=False)
class ContactFrame:
    """A contact frame on the object plus its conditioning ``(u, r)``."""

    v: Pose
    u: Pose
    r: np.ndarray

    def h(self, object_pose: Pose) -> Pose:
        return relative_pose(self.v, object_pose)


def build_query_density(model: ContactModel, features, K_Q: int = DEFAULT_KQ, rng=None,
                        ground_height: float = 0.0) -> QueryDensity:
    """Combine ``model`` with an object's features.

    For environment models a particle gets weight zero unless its feature
    is within the model's cut-off of the ground and its pose ``s`` lies on
    the ground up to the position bandwidth.
    """
    fs = features if isinstance(features, FeatureSet) else FeatureSet.from_list(features)
    if len(fs) == 0:
        raise EmptyFeatures("the object has no features")
    if model is None or len(model) == 0:
        raise EmptyModel("the contact model has no particles")
    if K_Q < 1:
        raise ValueError("K_Q must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    d = model.density
    j = rng.integers(0, len(fs), size=K_Q)
    cdf = np.cumsum(d.weights)
    cdf[-1] = 1.0
    i = np.searchsorted(cdf, rng.uniform(size=K_Q), side="right")
    s_p, s_q = compose_arrays(fs.p[j], fs.q[j], d.p[i], d.q[i])
    bw = d.bandwidths
    logw = -0.5 * np.sum((fs.r[j] - d.r[i]) ** 2, axis=1) / bw.sigma_r**2
    if model.kind == OBJECT_ENVIRONMENT:
        # same binary rule the model was learned with, plus s itself on the ground
        near = np.abs(fs.p[j, 2] - ground_height) < model.cutoff
        grounded = np.abs(s_p[:, 2] - ground_height) < bw.sigma_p
        logw = np.where(near & grounded, logw, -np.inf)
        if not np.isfinite(logw).any():
            raise NoContact("no query particle lies on the ground")
    w = np.exp(logw - logw.max())
    return QueryDensity(s_p, qcanonical(s_q), fs.p[j].copy(), qcanonical(fs.q[j]), fs.r[j].copy(),
                        w / w.sum(), fs.index[j].copy(), bw, model.kind)


def _draw(weights, rng, size):
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.uniform(size=size), side="right")


def sample_link_poses(q: QueryDensity, rng, size: int):
    """Weighted particle draws of ``s`` with kernel perturbation; arrays (P, Q)."""
    bw = q.bandwidths
    idx = _draw(q.weights, rng, size)
    P = q.s_p[idx] + bw.sigma_p * rng.standard_normal((size, 3))
    Q = qcanonical(sample_vmf_quaternion(q.s_q[idx], bw.sigma_q, rng))
    return P, Q


def sample_link_pose(q: QueryDensity, rng) -> Pose:
    P, Q = sample_link_poses(q, rng, 1)
    return Pose(P[0], Q[0])


# ----------------------------------------------------------------- feasibility

@dataclass(frozen=True)
class Feasibility:
    """Rules turning a sampled link pose into one the planar robot can take.

    The pose is snapped to the link height with its pushing axis made
    horizontal, then slid along that axis until the plate just touches the
    cloud.  Poses tilted by more than ``max_tilt_deg`` or without any cloud
    point in front of the plate are rejected.
    """

    link_height: float = 0.06
    plate_width: float = 0.3
    plate_height: float = 0.1
    max_tilt_deg: float = 30.0
    max_shift: float = 0.05
    max_tries: int = 100

    def check(self, P, Q, points):
        """Feasible planar pose for one sampled ``(P, Q)`` or ``None``."""
        xa = qrot(Q, np.array([1.0, 0.0, 0.0]))
        za = qrot(Q, np.array([0.0, 0.0, 1.0]))
        lim = math.sin(math.radians(self.max_tilt_deg))
        if abs(xa[2]) > lim or za[2] < math.cos(math.radians(self.max_tilt_deg)):
            return None
        yaw = math.atan2(xa[1], xa[0])
        n = np.array([math.cos(yaw), math.sin(yaw)])
        t = np.array([-n[1], n[0]])
        rel = points[:, :2] - P[:2]
        band = np.abs(points[:, 2] - self.link_height) <= self.plate_height / 2
        lateral = np.abs(rel @ t) <= self.plate_width / 2
        ahead = rel[band & lateral] @ n
        if len(ahead) == 0:
            return None
        gap = float(ahead.min())
        if abs(gap) > self.max_shift:
            return None
        xy = P[:2] + gap * n
        return Pose.planar(xy[0], xy[1], yaw, z=self.link_height)


def sample_feasible_link_pose(q: QueryDensity, cloud, rng, feas: Feasibility | None = None) -> Pose:
    """Draw link poses until one passes ``feas``; :class:`InfeasibleQuery` after ``max_tries``."""
    feas = feas or Feasibility()
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    for _ in range(feas.max_tries):
        P, Q = sample_link_poses(q, rng, 1)
        pose = feas.check(P[0], Q[0], pts)
        if pose is not None:
            return pose
    raise InfeasibleQuery(f"no feasible link pose in {feas.max_tries} draws")


# ------------------------------------------------------------ frame selection

def _nearest_r(q: QueryDensity, p):
    k = int(np.argmin(np.sum((q.v_p - p) ** 2, axis=1)))
    return q.r[k].copy()


def select_contact_frame(q: QueryDensity, schedule: AnnealSchedule | None = None, rng=None,
                         link_pose: Pose | None = None, smoothing: float = 1.0):
    """Annealed maximiser of the frame marginal ``Q(v)``.

    With ``link_pose`` given, particles are reweighted by how well their
    ``s`` matches it, so the frame is the one most consistent with the
    actual link placement.  ``smoothing`` widens the position kernels by that
    factor; values above one make
    the maximiser land in the middle of a flat contact patch instead of on
    whichever feature happens to be densest.  Returns ``(ContactFrame, score)``.
    """
    schedule = schedule or AnnealSchedule()
    rng = np.random.default_rng() if rng is None else rng
    bw = q.bandwidths
    sp, sq = bw.sigma_p * smoothing, bw.sigma_q
    with np.errstate(divide="ignore"):
        logw = np.log(q.weights)
    if link_pose is not None:
        logw = logw + log_pose_kernel_matrix(link_pose.p, link_pose.q, q.s_p, q.s_q, sp, sq)[0]
    logw = logw - logsumexp(logw)

    def score(X):
        lk = log_pose_kernel_matrix(X[:, :3], X[:, 3:], q.v_p, q.v_q, sp, sq)
        with np.errstate(divide="ignore"):
            return logsumexp(lk + logw[None, :], axis=1)

    centres = np.concatenate([q.v_p, q.v_q], axis=1)
    start = int(np.argmax(score(centres)))
    best, best_s = anneal_maximize_batch(score, centres[start:start + 1], schedule, pose_proposal(schedule), rng)
    v = Pose(best[0, :3], best[0, 3:])
    lp = link_pose if link_pose is not None else Pose(q.s_p[start], q.s_q[start])
    return ContactFrame(v, relative_pose(v, lp), _nearest_r(q, v.p)), float(best_s[0])


def frame_log_density(q: QueryDensity, v: Pose) -> float:
    """``log Q(v)`` with the plain particle weights (pose part of the kernel)."""
    bw = q.bandwidths
    lk = log_pose_kernel_matrix(v.p, v.q, q.v_p, q.v_q, bw.sigma_p, bw.sigma_q)[0]
    with np.errstate(divide="ignore"):
        return float(logsumexp(lk + np.log(q.weights)))


def sample_env_frames(qE: QueryDensity, N_E: int, rng, ground_height: float = 0.0) -> list[ContactFrame]:
    """``N_E`` weighted draws of distinct object features from ``Q^E(v)``.

    Each frame is paired with the ground point right below it (z up), which
    gives the conditioning ``u = v⁻¹ ∘ z``.
    """
    if N_E <= 0:
        return []
    # collapse particles sharing a feature, then draw without replacement
    feats, first, inv = np.unique(qE.feature, return_index=True, return_inverse=True)
    w = np.bincount(inv.ravel(), weights=qE.weights, minlength=len(feats))
    nz = np.flatnonzero(w > 0)
    take = min(N_E, len(nz))
    pick = rng.choice(nz, size=take, replace=False, p=w[nz] / w[nz].sum())
    out = []
    for k in np.sort(pick):
        j = first[k]
        v = Pose(qE.v_p[j], qE.v_q[j])
        z = Pose(np.array([v.p[0], v.p[1], ground_height]), IDENTITY_Q)
        out.append(ContactFrame(v, relative_pose(v, z), qE.r[j].copy()))
    if take < N_E:
        out.extend(out[i % take] for i in range(N_E - take))
    return out

