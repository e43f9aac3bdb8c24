"""Kernel densities over surface features and rigid motions.

Feature kernel:  N3(p | mu_p, sigma_p) * Theta(q | mu_q, kappa) * N2(r | mu_r, sigma_r)
Motion kernel:   N3(p | mu_p, sigma_mp) * Theta(q | mu_q, kappa_m)

``Theta`` is the antipodally symmetric pair of von Mises-Fisher densities on
the unit quaternion sphere S^3, normalised w.r.t. its surface measure (area
2*pi^2)::

    Theta(q | mu, k) = C(k) * (exp(k mu.q) + exp(-k mu.q)) / 2
    C(k) = k / (4 pi^2 I_1(k))

Everything is evaluated in log space; ``I_1`` goes through the exponentially
scaled Bessel function so large concentrations do not overflow.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ive, logsumexp

from .errors import KindMismatch, NonPositiveBandwidth, NonUnitQuaternion
from .features import SurfaceFeature
from .geom import Pose, qcanonical, qmul, qnormalize

FORMAT = "pushxfer/particle-density"
VERSION = 1
KINDS = ("feature", "motion", "joint")
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Bandwidths:
    sigma_p: float = 0.01
    sigma_q: float = 100.0
    sigma_r: float = 10.0
    sigma_mp: float = 0.02
    sigma_mq: float = 200.0

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not (np.isfinite(val) and val > 0):
                raise NonPositiveBandwidth(f"{name} must be > 0, got {val}")

    def scaled(self, **factors) -> "Bandwidths":
        vals = asdict(self)
        for k, f in factors.items():
            vals[k] = vals[k] * f
        return Bandwidths(**vals)


# --------------------------------------------------------------------- factors

def log_gaussian(x, mu, sigma):
    """Log of the isotropic Gaussian; the last axis is the dimension."""
    if not sigma > 0:
        raise NonPositiveBandwidth(f"sigma must be > 0, got {sigma}")
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    n = x.shape[-1] if x.ndim else 1
    d2 = np.sum((x - mu) ** 2, axis=-1) if x.ndim else (x - mu) ** 2
    return -0.5 * n * (LOG_2PI + 2.0 * np.log(sigma)) - 0.5 * d2 / sigma**2


def eval_gaussian(x, mu, sigma):
    return np.exp(log_gaussian(x, mu, sigma))


def theta_log_normalizer(kappa: float) -> float:
    """log C(kappa) for the S^3 von Mises-Fisher density."""
    if not kappa > 0:
        raise NonPositiveBandwidth(f"kappa must be > 0, got {kappa}")
    return float(np.log(kappa) - np.log(4.0 * np.pi**2) - (np.log(ive(1, kappa)) + kappa))


def _logcosh(x):
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


def log_theta_from_dot(dot, kappa):
    return theta_log_normalizer(kappa) + _logcosh(kappa * np.asarray(dot, dtype=float))


def _check_unit(q, tol=1e-6):
    n = np.linalg.norm(np.asarray(q, dtype=float), axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise NonUnitQuaternion("quaternion is not unit length")


def log_theta(q, mu_q, kappa):
    _check_unit(q)
    _check_unit(mu_q)
    dot = np.sum(np.asarray(q, dtype=float) * np.asarray(mu_q, dtype=float), axis=-1)
    return log_theta_from_dot(dot, kappa)


def eval_theta(q, mu_q, kappa):
    return np.exp(log_theta(q, mu_q, kappa))


# --------------------------------------------------------------------- kernels

def log_feature_kernel(x: SurfaceFeature, mu: SurfaceFeature, bw: Bandwidths) -> float:
    return float(
        log_gaussian(x.v.p, mu.v.p, bw.sigma_p)
        + log_theta(x.v.q, mu.v.q, bw.sigma_q)
        + log_gaussian(x.r, mu.r, bw.sigma_r)
    )


def eval_feature_kernel(x: SurfaceFeature, mu: SurfaceFeature, bw: Bandwidths) -> float:
    return float(np.exp(log_feature_kernel(x, mu, bw)))


def log_motion_kernel(m: Pose, mu: Pose, bw: Bandwidths) -> float:
    return float(log_gaussian(m.p, mu.p, bw.sigma_mp) + log_theta(m.q, mu.q, bw.sigma_mq))


def eval_motion_kernel(m: Pose, mu: Pose, bw: Bandwidths) -> float:
    return float(np.exp(log_motion_kernel(m, mu, bw)))


def log_pose_kernel_matrix(P, Q, Pc, Qc, sigma_p, kappa):
    """Log pose-kernel values between N query poses and J centres, shape (N, J)."""
    P = np.atleast_2d(P)
    Pc = np.atleast_2d(Pc)
    d2 = (
        np.sum(P * P, axis=1)[:, None]
        + np.sum(Pc * Pc, axis=1)[None, :]
        - 2.0 * P @ Pc.T
    )
    d2 = np.maximum(d2, 0.0)
    out = -1.5 * (LOG_2PI + 2.0 * np.log(sigma_p)) - 0.5 * d2 / sigma_p**2
    dots = np.atleast_2d(Q) @ np.atleast_2d(Qc).T
    return out + log_theta_from_dot(dots, kappa)


def log_descriptor_kernel_matrix(R, Rc, sigma_r):
    R = np.atleast_2d(R)
    Rc = np.atleast_2d(Rc)
    d2 = np.sum((R[:, None, :] - Rc[None, :, :]) ** 2, axis=-1)
    return -(LOG_2PI + 2.0 * np.log(sigma_r)) - 0.5 * d2 / sigma_r**2


def log_feature_kernel_matrix(P, Q, R, Pc, Qc, Rc, bw: Bandwidths):
    return log_pose_kernel_matrix(P, Q, Pc, Qc, bw.sigma_p, bw.sigma_q) + log_descriptor_kernel_matrix(
        R, Rc, bw.sigma_r
    )


# --------------------------------------------------------------------- density

class ParticleDensity:
    """Weighted kernel set.

    ``kind`` selects the kernel: ``feature`` (pose + descriptor), ``motion``
    (pose only, motion bandwidths) or ``joint`` (feature kernel on the
    condition times motion kernel on ``mp``/``mq``).  Weights are normalised
    on construction.
    """

    def __init__(self, kind, p, q, weights=None, bandwidths=None, r=None, mp=None, mq=None):
        if kind not in KINDS:
            raise ValueError(f"unknown density kind {kind!r}")
        self.kind = kind
        self.p = np.asarray(p, dtype=float).reshape(-1, 3)
        self.q = qcanonical(np.asarray(q, dtype=float).reshape(-1, 4))
        n = len(self.p)
        if n == 0:
            raise ValueError("a density needs at least one particle")
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float).reshape(n)
        if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise ValueError("weights must be finite, non-negative and not all zero")
        total = w.sum()
        self.weights = w if abs(total - 1.0) <= 1e-15 else w / total
        self.bandwidths = bandwidths or Bandwidths()
        self.r = None if r is None else np.asarray(r, dtype=float).reshape(n, 2)
        self.mp = None if mp is None else np.asarray(mp, dtype=float).reshape(n, 3)
        self.mq = None if mq is None else qcanonical(np.asarray(mq, dtype=float).reshape(n, 4))
        if kind in ("feature", "joint") and self.r is None:
            raise ValueError(f"{kind} density needs descriptors r")
        if kind == "joint" and (self.mp is None or self.mq is None):
            raise ValueError("joint density needs motion centres mp, mq")

    def __len__(self):
        return len(self.weights)

    # evaluation -----------------------------------------------------------
    def _log_kernels(self, x):
        bw = self.bandwidths
        if self.kind == "feature":
            if not isinstance(x, SurfaceFeature):
                raise KindMismatch("feature density expects a SurfaceFeature")
            return log_feature_kernel_matrix(x.v.p, x.v.q, x.r, self.p, self.q, self.r, bw)[0]
        if self.kind == "motion":
            if not isinstance(x, Pose):
                raise KindMismatch("motion density expects a RigidMotion")
            return log_pose_kernel_matrix(x.p, x.q, self.p, self.q, bw.sigma_mp, bw.sigma_mq)[0]
        if not (isinstance(x, tuple) and len(x) == 2 and isinstance(x[0], SurfaceFeature)
                and isinstance(x[1], Pose)):
            raise KindMismatch("joint density expects (SurfaceFeature, RigidMotion)")
        c, m = x
        return (
            log_feature_kernel_matrix(c.v.p, c.v.q, c.r, self.p, self.q, self.r, bw)[0]
            + log_pose_kernel_matrix(m.p, m.q, self.mp, self.mq, bw.sigma_mp, bw.sigma_mq)[0]
        )

    def log_eval(self, x) -> float:
        lk = self._log_kernels(x)
        with np.errstate(divide="ignore"):
            return float(logsumexp(lk, b=self.weights))

    def mixture(self, other: "ParticleDensity", alpha: float) -> "ParticleDensity":
        """Convex combination ``alpha * self + (1 - alpha) * other``."""
        if other.kind != self.kind:
            raise KindMismatch("cannot mix densities of different kinds")

        def cat(a, b):
            return None if a is None else np.concatenate([a, b])

        w = np.concatenate([alpha * self.weights, (1.0 - alpha) * other.weights])
        return ParticleDensity(self.kind, cat(self.p, other.p), cat(self.q, other.q), w, self.bandwidths,
                               cat(self.r, other.r), cat(self.mp, other.mp), cat(self.mq, other.mq))

    # serialisation --------------------------------------------------------
    def to_dict(self) -> dict:
        particles = {"p": self.p.tolist(), "q": self.q.tolist()}
        for name in ("r", "mp", "mq"):
            arr = getattr(self, name)
            if arr is not None:
                particles[name] = arr.tolist()
        return {
            "format": FORMAT,
            "version": VERSION,
            "kind": self.kind,
            "bandwidths": asdict(self.bandwidths),
            "weights": self.weights.tolist(),
            "particles": particles,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParticleDensity":
        if doc.get("format") != FORMAT:
            raise ValueError(f"not a particle density document: {doc.get('format')!r}")
        if doc.get("version") != VERSION:
            raise ValueError(f"unsupported density version {doc.get('version')!r}")
        parts = doc["particles"]
        return cls(doc["kind"], parts["p"], parts["q"], doc["weights"], Bandwidths(**doc["bandwidths"]),
                   parts.get("r"), parts.get("mp"), parts.get("mq"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ParticleDensity":
        return cls.from_dict(json.loads(text))


def eval_density(d: ParticleDensity, x) -> float:
    return float(np.exp(d.log_eval(x)))


def log_eval_density(d: ParticleDensity, x) -> float:
    return d.log_eval(x)


# -------------------------------------------------------------------- sampling

def sample_vmf_quaternion(mu, kappa, rng, size=None):
    """Draw unit quaternions from the antipodal vMF pair around ``mu``.

    Wood's rejection sampler for the vMF on S^3; a random sign picks the
    antipode.  ``mu`` may be a single quaternion or one per draw.
    """
    mu = qnormalize(np.asarray(mu, dtype=float))
    single = size is None and mu.ndim == 1
    n = 1 if single else (len(mu) if mu.ndim == 2 else int(size))
    mus = np.broadcast_to(mu, (n, 4)) if mu.ndim == 1 else mu
    if not np.isfinite(kappa) or kappa > 1e12:
        out = mus.copy()
        return out[0] if single else out
    dim = 4
    b = (dim - 1) / (2.0 * kappa + np.sqrt(4.0 * kappa**2 + (dim - 1) ** 2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (dim - 1) * np.log(1.0 - x0**2)
    w = np.empty(n)
    todo = np.arange(n)
    while len(todo):
        z = rng.beta((dim - 1) / 2.0, (dim - 1) / 2.0, size=len(todo))
        ww = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=len(todo))
        ok = kappa * ww + (dim - 1) * np.log(1.0 - x0 * ww) - c >= np.log(u)
        w[todo[ok]] = ww[ok]
        todo = todo[~ok]
    # direction orthogonal to mu: rotate a sample around e0 = (1,0,0,0) onto mu
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    local = np.concatenate([w[:, None], np.sqrt(np.clip(1.0 - w**2, 0.0, None))[:, None] * v], axis=1)
    # left-multiplication by mu is an isometry of S^3 mapping e0 to mu
    out = qmul(mus, local)
    sign = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
    out = out * sign[:, None]
    return out[0] if single else out


def _sample_indices(weights, rng, size):
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.uniform(size=size), side="right")


def sample_density(d: ParticleDensity, rng, size=None):
    """Draw from the kernel density.

    Returns a ``SurfaceFeature`` / ``RigidMotion`` / ``(feature, motion)``
    for a single draw, or a dict of arrays when ``size`` is given.
    """
    n = 1 if size is None else int(size)
    bw = d.bandwidths
    idx = _sample_indices(d.weights, rng, n)
    sp, sq = (bw.sigma_mp, bw.sigma_mq) if d.kind == "motion" else (bw.sigma_p, bw.sigma_q)
    out = {
        "index": idx,
        "p": d.p[idx] + sp * rng.standard_normal((n, 3)),
        "q": qcanonical(sample_vmf_quaternion(d.q[idx], sq, rng)),
    }
    if d.r is not None:
        out["r"] = d.r[idx] + bw.sigma_r * rng.standard_normal((n, 2))
    if d.kind == "joint":
        out["mp"] = d.mp[idx] + bw.sigma_mp * rng.standard_normal((n, 3))
        out["mq"] = qcanonical(sample_vmf_quaternion(d.mq[idx], bw.sigma_mq, rng))
    if size is not None:
        return out
    from .geom import RigidMotion

    if d.kind == "motion":
        return RigidMotion(out["p"][0], out["q"][0])
    feat = SurfaceFeature(Pose(out["p"][0], out["q"][0]), out["r"][0])
    if d.kind == "feature":
        return feat
    return feat, RigidMotion(out["mp"][0], out["mq"][0])
