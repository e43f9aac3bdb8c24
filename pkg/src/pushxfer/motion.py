"""Motion experts and product-of-experts prediction.

A motion model stores, for one action and one kind of contact, the observed
body-frame motions ``m_j`` of contact frames together with the condition
``c_j = (u_j, r_j)`` each frame had when the push started.  Given a new
condition it acts as a Nadaraya-Watson conditional density over local
motions.  Object motions ``m_b`` are translated into an expert's local frame
with ``m_v = h ∘ m_b ∘ h⁻¹``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .contact import OBJECT_ENVIRONMENT, ROBOT_OBJECT
from .density import (
    Bandwidths,
    ParticleDensity,
    log_feature_kernel_matrix,
    log_pose_kernel_matrix,
    sample_vmf_quaternion,
)
from .errors import AllVetoed, EmptyModel, LostContact, UnsupportedCondition
from .geom import Pose, RigidMotion, compose_arrays, inverse_arrays, motion_between, qangle, qcanonical
from .optimize import AnnealSchedule, anneal_maximize_batch, pose_proposal

LOG_FLOOR = math.log(1e-300)


@dataclass(frozen=True, eq=False)
class MotionKernel:
    u: Pose
    r: np.ndarray
    m: RigidMotion
    weight: float = 1.0


def record_rollout(sim_result, frame_name: str, condition, action=None, kind: str = ROBOT_OBJECT) -> MotionKernel:
    """Kernel for one tracked frame of one simulated push.

    ``condition`` is anything with ``u`` and ``r`` attributes (a
    :class:`~pushxfer.query.ContactFrame`) or a ``(u, r)`` pair.  A
    robot-object frame whose link lost contact raises :class:`LostContact`.
    """
    if kind == ROBOT_OBJECT and sim_result.contact_lost:
        raise LostContact(f"link lost contact during push {getattr(action, 'id', '')!s}".strip())
    u, r = (condition.u, condition.r) if hasattr(condition, "u") else condition
    traj = sim_result.frames[frame_name]
    return MotionKernel(u, np.asarray(r, dtype=float), motion_between(traj[0], traj[-1]))


class MotionModel:
    """Kernels ``(c_j, m_j, w_j)`` for one action and one contact kind."""

    def __init__(self, action_id: str, kind: str, density: ParticleDensity):
        if density.kind != "joint":
            raise ValueError("a motion model wraps a joint density")
        self.action_id = action_id
        self.kind = kind
        self.density = density

    @classmethod
    def from_kernels(cls, kernels, action_id: str, kind: str, bandwidths: Bandwidths | None = None):
        kernels = list(kernels)
        if not kernels:
            raise EmptyModel(f"no rollouts for action {action_id!r} ({kind})")
        d = ParticleDensity(
            "joint",
            [k.u.p for k in kernels], [k.u.q for k in kernels],
            [k.weight for k in kernels], bandwidths or Bandwidths(),
            r=[k.r for k in kernels], mp=[k.m.p for k in kernels], mq=[k.m.q for k in kernels],
        )
        return cls(action_id, kind, d)

    def __len__(self):
        return len(self.density)

    @property
    def bandwidths(self) -> Bandwidths:
        return self.density.bandwidths

    def with_bandwidths(self, bw: Bandwidths) -> "MotionModel":
        d = self.density
        return MotionModel(self.action_id, self.kind,
                           ParticleDensity("joint", d.p, d.q, d.weights, bw, d.r, d.mp, d.mq))

    def log_condition_weights(self, u: Pose, r):
        """``log w_j K(c | c_j)`` for every kernel, unnormalised."""
        d = self.density
        lk = log_feature_kernel_matrix(u.p, u.q, np.asarray(r, float), d.p, d.q, d.r, d.bandwidths)[0]
        with np.errstate(divide="ignore"):
            return lk + np.log(d.weights)

    def to_dict(self) -> dict:
        return {"action": self.action_id, "kind": self.kind, "density": self.density.to_dict()}

    @classmethod
    def from_dict(cls, doc) -> "MotionModel":
        return cls(doc["action"], doc["kind"], ParticleDensity.from_dict(doc["density"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class Expert:
    """A motion model bound to a condition and a frame-to-object transform ``h``."""

    def __init__(self, model: MotionModel, condition, h: Pose):
        u, r = (condition.u, condition.r) if hasattr(condition, "u") else condition
        self.model = model
        self.u = u
        self.r = np.asarray(r, dtype=float)
        self.h = h
        lw = model.log_condition_weights(u, self.r)
        with np.errstate(divide="ignore"):
            self.log_denominator = float(logsumexp(lw))
        self.vetoed = not (self.log_denominator >= LOG_FLOOR)
        self.log_alpha = lw - self.log_denominator if not self.vetoed else None

    def local_motions(self, P, Q):
        """``m_v = h ∘ m_b ∘ h⁻¹`` for arrays of object motions."""
        hp, hq = self.h.p, self.h.q
        ip, iq = inverse_arrays(hp, hq)
        a_p, a_q = compose_arrays(hp, hq, P, Q)
        return compose_arrays(a_p, a_q, ip, iq)

    def object_motions(self, P, Q):
        """Inverse of :meth:`local_motions`: ``m_b = h⁻¹ ∘ m_v ∘ h``."""
        ip, iq = inverse_arrays(self.h.p, self.h.q)
        a_p, a_q = compose_arrays(ip, iq, P, Q)
        return compose_arrays(a_p, a_q, self.h.p, self.h.q)

    def log_likelihood(self, P, Q, chunk: int = 4096):
        """Log conditional density at object motions ``(P, Q)``; shape (N,)."""
        if self.vetoed:
            return np.full(len(np.atleast_2d(P)), -np.inf)
        P = np.atleast_2d(P)
        Q = np.atleast_2d(Q)
        d = self.model.density
        bw = d.bandwidths
        out = np.empty(len(P))
        for s in range(0, len(P), chunk):
            vp, vq = self.local_motions(P[s:s + chunk], Q[s:s + chunk])
            lk = log_pose_kernel_matrix(vp, vq, d.mp, d.mq, bw.sigma_mp, bw.sigma_mq)
            with np.errstate(divide="ignore"):
                out[s:s + chunk] = logsumexp(lk + self.log_alpha[None, :], axis=1)
        return out

    def sample_object_motions(self, rng, size: int):
        """Draws from the expert's motion mixture, mapped to object motions."""
        d = self.model.density
        bw = d.bandwidths
        alpha = np.exp(self.log_alpha)
        cdf = np.cumsum(alpha)
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, rng.uniform(size=size) * cdf[-1], side="right")
        idx = np.minimum(idx, len(alpha) - 1)
        P = d.mp[idx] + bw.sigma_mp * rng.standard_normal((size, 3))
        Q = sample_vmf_quaternion(d.mq[idx], bw.sigma_mq, rng)
        return self.object_motions(P, Q)


def expert_log_conditional(model: MotionModel, m_b: Pose, c, h: Pose) -> float:
    e = Expert(model, c, h)
    if e.vetoed:
        raise UnsupportedCondition("the condition is unlike every kernel of the model")
    return float(e.log_likelihood(m_b.p, m_b.q)[0])


def expert_conditional(model: MotionModel, m_b: Pose, c, h: Pose) -> float:
    """``Σ w_j M(m_v|m_j) K(c|c_j) / Σ w_j K(c|c_j)`` at ``m_v = h ∘ m_b ∘ h⁻¹``."""
    return math.exp(expert_log_conditional(model, m_b, c, h))


def _as_experts(experts):
    return [e if isinstance(e, Expert) else Expert(*e) for e in experts]


def poe_scores(experts, P, Q):
    """Summed expert log-likelihoods for arrays of object motions."""
    experts = _as_experts(experts)
    if not experts:
        raise ValueError("need at least one expert")
    total = np.zeros(len(np.atleast_2d(P)))
    for e in experts:
        if e.vetoed:
            return np.full(len(total), -np.inf)
        total += e.log_likelihood(P, Q)
    return total


def poe_score(experts, m_b: Pose) -> float:
    """Product-of-experts log-likelihood; ``-inf`` when any expert vetoes."""
    return float(poe_scores(experts, m_b.p, m_b.q)[0])


@dataclass(frozen=True)
class PredictConfig:
    candidates: int = 500
    seeds: int = 100
    iterations: int = 100
    keep: int = 10
    # motion log-likelihoods are nearly flat near the mode (2 degrees costs
    # about 0.03 nats at the default bandwidths), so prediction runs cold
    T0: float = 0.01
    Tmin: float = 1e-5
    step_p: float = 0.01
    step_q: float = 0.05
    dedup_p: float = 0.001
    dedup_deg: float = 0.5

    @property
    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.iterations, self.T0, self.Tmin, self.step_p, self.step_q)


@dataclass(frozen=True, eq=False)
class Prediction:
    m_b: RigidMotion
    log_likelihood: float
    rank: int

    def as_dict(self) -> dict:
        return {"rank": self.rank, "log_likelihood": self.log_likelihood, "m_b": self.m_b.as_list()}


@dataclass
class PredictionTrace:
    """Best seed score per candidate, kept for monotonicity checks."""

    seed_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))


def predict(experts, action=None, cfg: PredictConfig | None = None, rng=None, trace: PredictionTrace | None = None):
    """Top ``cfg.keep`` distinct object motions under the product of experts.

    The first expert seeds the candidates (the robot-object expert in every
    predictor variant).  All candidates are refined together by annealing.
    """
    cfg = cfg or PredictConfig()
    rng = np.random.default_rng() if rng is None else rng
    experts = _as_experts(experts)
    if not experts:
        raise ValueError("need at least one expert")
    if action is not None:
        aid = getattr(action, "id", action)
        wrong = [e.model.action_id for e in experts if e.model.action_id != aid]
        if wrong:
            raise ValueError(f"experts learned for other actions: {sorted(set(wrong))}")
    if any(e.vetoed for e in experts):
        raise AllVetoed("an expert vetoes every candidate")
    seedP, seedQ = experts[0].sample_object_motions(rng, cfg.candidates * cfg.seeds)
    s = poe_scores(experts, seedP, seedQ).reshape(cfg.candidates, cfg.seeds)
    pick = np.argmax(s, axis=1)
    rows = np.arange(cfg.candidates) * cfg.seeds + pick
    X = np.concatenate([seedP[rows], seedQ[rows]], axis=1)
    seed_best = s[np.arange(cfg.candidates), pick]
    if trace is not None:
        trace.seed_scores = seed_best.copy()
    if not np.isfinite(seed_best).any():
        raise AllVetoed("every seed candidate was vetoed")

    def score(Y):
        return poe_scores(experts, Y[:, :3], Y[:, 3:])

    sched = cfg.schedule
    best, best_s = anneal_maximize_batch(score, X, sched, pose_proposal(sched), rng)
    order = np.argsort(-best_s, kind="stable")
    out = []
    for i in order:
        if not np.isfinite(best_s[i]):
            break
        p, q = best[i, :3], qcanonical(best[i, 3:] / np.linalg.norm(best[i, 3:]))
        dup = any(np.linalg.norm(p - o.m_b.p) < cfg.dedup_p
                  and math.degrees(float(qangle(q, o.m_b.q))) < cfg.dedup_deg for o in out)
        if dup:
            continue
        out.append(Prediction(RigidMotion(p, q), float(best_s[i]), len(out) + 1))
        if len(out) == cfg.keep:
            break
    if not out:
        raise AllVetoed("every refined candidate was vetoed")
    return out


__all__ = [
    "MotionKernel", "MotionModel", "Expert", "Prediction", "PredictConfig", "PredictionTrace",
    "record_rollout", "expert_conditional", "expert_log_conditional", "poe_score", "poe_scores",
    "predict", "ROBOT_OBJECT", "OBJECT_ENVIRONMENT",
]
