"""scikit-learn style wrappers around the feature, contact and motion learners.

Rows are plain float arrays so the estimators compose with sklearn tooling:

* a point row is ``(x, y, z)``;
* a feature row is ``(px, py, pz, qw, qx, qy, qz, r1, r2)``;
* a motion row is ``(px, py, pz, qw, qx, qy, qz)``.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .contact import OBJECT_ENVIRONMENT, ROBOT_OBJECT, learn_object_environment, learn_robot_object
from .density import Bandwidths, log_feature_kernel_matrix
from .errors import ConfigError
from .features import FeatureSet, PointCloud, build_feature_set
from .geom import Pose, qnormalize
from .motion import MotionKernel, MotionModel, PredictConfig, predict

FEATURE_WIDTH = 9
MOTION_WIDTH = 7


def check_feature_rows(X) -> np.ndarray:
    X = check_array(X, dtype=float)
    if X.shape[1] != FEATURE_WIDTH:
        raise ValueError(f"feature rows need {FEATURE_WIDTH} columns, got {X.shape[1]}")
    X = X.copy()
    X[:, 3:7] = qnormalize(X[:, 3:7])
    return X


def check_motion_rows(M) -> np.ndarray:
    M = check_array(M, dtype=float)
    if M.shape[1] != MOTION_WIDTH:
        raise ValueError(f"motion rows need {MOTION_WIDTH} columns, got {M.shape[1]}")
    M = M.copy()
    M[:, 3:] = qnormalize(M[:, 3:])
    return M


def _rows_to_features(X) -> FeatureSet:
    return FeatureSet(X[:, :3], X[:, 3:7], X[:, 7:9])


def _bandwidths(est) -> Bandwidths:
    return Bandwidths(est.sigma_p, est.sigma_q, est.sigma_r, est.sigma_mp, est.sigma_mq)


class SurfaceFeatureExtractor(TransformerMixin, BaseEstimator):
    """Point rows in, feature rows out.  Stateless apart from input checks."""

    def __init__(self, k=20, aniso_tol=2.0, view_origin=None):
        self.k = k
        self.aniso_tol = aniso_tol
        self.view_origin = view_origin

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        if X.shape[1] != 3:
            raise ValueError("point rows need 3 columns")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=float)
        fs = build_feature_set(PointCloud(X, self.view_origin), k=self.k, aniso_tol=self.aniso_tol)
        return np.concatenate([fs.p, fs.q, fs.r], axis=1)


class ContactModelEstimator(BaseEstimator):
    """Fit a robot-object or object-environment contact model on feature rows.

    ``fit(X, link_pose=..., link_surface=...)`` for ``kind="robot-object"``;
    environment models need no extra arguments.  ``score_samples`` gives
    the log density of feature rows treated as ``(u, r)`` queries.
    """

    def __init__(self, kind=ROBOT_OBJECT, cutoff=0.01, delta_E=0.05, n_samples=1000, ground_height=0.0,
                 sigma_p=0.01, sigma_q=100.0, sigma_r=10.0, sigma_mp=0.02, sigma_mq=200.0, random_state=None):
        self.kind = kind
        self.cutoff = cutoff
        self.delta_E = delta_E
        self.n_samples = n_samples
        self.ground_height = ground_height
        self.sigma_p = sigma_p
        self.sigma_q = sigma_q
        self.sigma_r = sigma_r
        self.sigma_mp = sigma_mp
        self.sigma_mq = sigma_mq
        self.random_state = random_state

    def fit(self, X, y=None, link_pose: Pose | None = None, link_surface=None):
        fs = _rows_to_features(check_feature_rows(X))
        bw = _bandwidths(self)
        if self.kind == ROBOT_OBJECT:
            if link_pose is None or link_surface is None:
                raise ConfigError("robot-object models need link_pose and link_surface")
            self.model_ = learn_robot_object(fs, link_pose, link_surface, self.cutoff, bw)
        elif self.kind == OBJECT_ENVIRONMENT:
            rng = check_random_state(self.random_state)
            gen = np.random.default_rng(rng.randint(0, 2**31 - 1))
            self.model_ = learn_object_environment(fs, self.ground_height, self.delta_E, self.n_samples, gen, bw)
        else:
            raise ConfigError(f"unknown contact kind {self.kind!r}")
        self.n_features_in_ = FEATURE_WIDTH
        return self

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        X = check_feature_rows(X)
        d = self.model_.density
        lk = log_feature_kernel_matrix(X[:, :3], X[:, 3:7], X[:, 7:9], d.p, d.q, d.r, d.bandwidths)
        return logsumexp(lk, b=d.weights[None, :], axis=1)


class MotionExpertRegressor(BaseEstimator):
    """Conditional motion model: condition rows ``(u, r)`` → local motion rows.

    ``predict`` returns the product-of-experts mode of the single expert
    with ``h`` the identity, i.e. the likeliest local motion.
    """

    def __init__(self, action_id="linear", kind=ROBOT_OBJECT, candidates=20, seeds=10, iterations=30,
                 sigma_p=0.01, sigma_q=100.0, sigma_r=10.0, sigma_mp=0.02, sigma_mq=200.0, random_state=None):
        self.action_id = action_id
        self.kind = kind
        self.candidates = candidates
        self.seeds = seeds
        self.iterations = iterations
        self.sigma_p = sigma_p
        self.sigma_q = sigma_q
        self.sigma_r = sigma_r
        self.sigma_mp = sigma_mp
        self.sigma_mq = sigma_mq
        self.random_state = random_state

    def fit(self, X, y):
        X = check_feature_rows(X)
        M = check_motion_rows(y)
        if len(X) != len(M):
            raise ValueError("X and y have different lengths")
        kernels = [MotionKernel(Pose(x[:3], x[3:7]), x[7:9], Pose(m[:3], m[3:])) for x, m in zip(X, M)]
        self.model_ = MotionModel.from_kernels(kernels, self.action_id, self.kind, _bandwidths(self))
        self.n_features_in_ = FEATURE_WIDTH
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_feature_rows(X)
        rng = np.random.default_rng(check_random_state(self.random_state).randint(0, 2**31 - 1))
        cfg = PredictConfig(self.candidates, self.seeds, self.iterations, keep=1)
        out = np.empty((len(X), MOTION_WIDTH))
        for i, x in enumerate(X):
            best = predict([(self.model_, (Pose(x[:3], x[3:7]), x[7:9]), Pose.identity())], None, cfg, rng)[0]
            out[i] = best.m_b.as_list()
        return out
