"""Static contact models: robot link vs. object and object vs. environment.

A contact model is a kernel density over ``(u, r)``, where ``u = v⁻¹ ∘ s`` is
the pose of the contacting body (link or environment frame ``s``) relative to
a surface feature frame ``v`` and ``r`` is that feature's curvature.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .density import Bandwidths, ParticleDensity
from .errors import NoContact
from .features import FeatureSet, PointCloud
from .geom import IDENTITY_Q, Pose, compose_arrays, inverse_arrays

ROBOT_OBJECT = "robot-object"
OBJECT_ENVIRONMENT = "object-environment"


@dataclass
class ContactModel:
    density: ParticleDensity
    kind: str
    cutoff: float

    def __len__(self):
        return len(self.density)

    @property
    def bandwidths(self) -> Bandwidths:
        return self.density.bandwidths

    def to_dict(self) -> dict:
        return {"kind": self.kind, "cutoff": self.cutoff, "density": self.density.to_dict()}

    @classmethod
    def from_dict(cls, doc) -> "ContactModel":
        return cls(ParticleDensity.from_dict(doc["density"]), doc["kind"], float(doc["cutoff"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _as_feature_set(features) -> FeatureSet:
    return features if isinstance(features, FeatureSet) else FeatureSet.from_list(features)


def _relative(fs: FeatureSet, P, Q):
    ip, iq = inverse_arrays(fs.p, fs.q)
    return compose_arrays(ip, iq, P, Q)


def learn_robot_object(features, link_pose: Pose, link_surface, cutoff: float = 0.01,
                       bandwidths: Bandwidths | None = None) -> ContactModel:
    """Contact model from the features lying within ``cutoff`` of the link surface.

    Weights follow a Gaussian in the feature-to-link distance with standard
    deviation ``cutoff / 2``, truncated to zero beyond ``cutoff``.
    """
    fs = _as_feature_set(features)
    surf = link_surface.points if isinstance(link_surface, PointCloud) else np.asarray(link_surface, float)
    dist, _ = cKDTree(surf).query(fs.p)
    keep = dist <= cutoff
    if not keep.any():
        raise NoContact(f"no feature within {cutoff} m of the link surface")
    sub = fs.subset(np.flatnonzero(keep))
    d = dist[keep]
    w = np.exp(-(d**2) / (2.0 * (cutoff / 2.0) ** 2))
    up, uq = _relative(sub, link_pose.p, link_pose.q)
    dens = ParticleDensity("feature", up, uq, w, bandwidths or Bandwidths(), r=sub.r)
    return ContactModel(dens, ROBOT_OBJECT, cutoff)


def learn_object_environment(features, ground_height: float = 0.0, delta_E: float = 0.05,
                             n_samples: int = 1000, rng=None,
                             bandwidths: Bandwidths | None = None) -> ContactModel:
    """Contact model between sampled features and the closest ground point.

    Each sampled feature gets an environment frame directly below it on the
    ground (identity orientation, z up); the binary weight keeps features
    closer than ``delta_E`` to that frame.
    """
    fs = _as_feature_set(features)
    rng = np.random.default_rng() if rng is None else rng
    if n_samples >= len(fs):
        idx = np.arange(len(fs))
    else:
        idx = np.sort(rng.choice(len(fs), size=n_samples, replace=False))
    sub = fs.subset(idx)
    Z = np.c_[sub.p[:, :2], np.full(len(sub), ground_height)]
    keep = np.linalg.norm(sub.p - Z, axis=1) < delta_E
    if not keep.any():
        raise NoContact(f"no sampled feature within {delta_E} m of the ground")
    sub = sub.subset(np.flatnonzero(keep))
    Z = Z[keep]
    up, uq = _relative(sub, Z, np.broadcast_to(IDENTITY_Q, (len(Z), 4)))
    dens = ParticleDensity("feature", up, uq, None, bandwidths or Bandwidths(), r=sub.r)
    return ContactModel(dens, OBJECT_ENVIRONMENT, delta_E)
