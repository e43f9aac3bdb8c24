"""Simulated-annealing maximisation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteScore
from .geom import compose_arrays, qfrom_axis_angle


@dataclass(frozen=True)
class AnnealSchedule:
    iterations: int = 100
    T0: float = 1.0
    Tmin: float = 1e-3
    step_p: float = 0.01
    step_q: float = 0.05

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (self.T0 >= self.Tmin > 0):
            raise ValueError("need T0 >= Tmin > 0")

    def temperature(self, k: int) -> float:
        """Geometric cooling from T0 (k=0) to Tmin (k=iterations)."""
        if self.iterations == 0:
            return self.T0
        return self.T0 * (self.Tmin / self.T0) ** (k / self.iterations)


def anneal_maximize(score, init, schedule: AnnealSchedule, proposal, rng):
    """Maximise ``score`` starting from ``init``.

    ``proposal(candidate, temperature, rng)`` returns a new candidate.  Worse
    moves are accepted with probability ``exp(delta / T)``.  Returns the best
    candidate seen and its score.
    """
    cur = init
    cur_s = float(score(init))
    if not math.isfinite(cur_s):
        raise NonFiniteScore(f"score at the initial candidate is {cur_s}")
    best, best_s = cur, cur_s
    for k in range(schedule.iterations):
        T = schedule.temperature(k)
        cand = proposal(cur, T, rng)
        s = float(score(cand))
        u = rng.uniform()
        if s >= cur_s or (math.isfinite(s) and u < math.exp((s - cur_s) / T)):
            cur, cur_s = cand, s
            if s > best_s:
                best, best_s = cand, s
    return best, best_s


def anneal_maximize_batch(score, init, schedule: AnnealSchedule, proposal, rng):
    """Independent annealing chains advanced in lock-step.

    ``score`` maps an (N, ...) candidate array to N scores and ``proposal``
    maps ``(candidates, T, rng)`` to new candidates.  Chains with a
    non-finite initial score stay where they are.
    """
    cur = np.array(init, dtype=float)
    cur_s = np.asarray(score(cur), dtype=float)
    best, best_s = cur.copy(), cur_s.copy()
    for k in range(schedule.iterations):
        T = schedule.temperature(k)
        cand = proposal(cur, T, rng)
        s = np.asarray(score(cand), dtype=float)
        u = rng.uniform(size=len(s))
        with np.errstate(invalid="ignore", over="ignore"):
            accept = (s >= cur_s) | (np.isfinite(s) & (u < np.exp(np.minimum((s - cur_s) / T, 0.0))))
        accept &= np.isfinite(cur_s)
        cur[accept] = cand[accept]
        cur_s[accept] = s[accept]
        better = cur_s > best_s
        best[better] = cur[better]
        best_s[better] = cur_s[better]
    return best, best_s


def perturb_poses(P, Q, scale_p, scale_q, rng):
    """Gaussian translation plus a random-axis rotation of angle ~ N(0, scale_q)."""
    n = len(P)
    dp = scale_p * rng.standard_normal((n, 3))
    axis = rng.standard_normal((n, 3))
    angle = scale_q * rng.standard_normal(n)
    dq = qfrom_axis_angle(axis, angle)
    _, q = compose_arrays(np.zeros((n, 3)), Q, np.zeros((n, 3)), dq)
    return P + dp, q


def pose_proposal(schedule: AnnealSchedule):
    """Proposal over stacked ``[p(3), q(4)]`` rows, scaled by T/T0."""

    def propose(X, T, rng):
        X = np.atleast_2d(X)
        f = T / schedule.T0
        p, q = perturb_poses(X[:, :3], X[:, 3:], f * schedule.step_p, f * schedule.step_q, rng)
        return np.concatenate([p, q], axis=1)

    return propose
