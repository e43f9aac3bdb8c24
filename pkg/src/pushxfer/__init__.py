"""Contact-based push forward models that transfer to objects of new shape."""
from .contact import ContactModel, learn_object_environment, learn_robot_object
from .density import Bandwidths, ParticleDensity, eval_density, eval_theta, sample_density
from .features import FeatureSet, PointCloud, SurfaceFeature, build_feature_set, build_features
from .geom import (
    Pose,
    RigidMotion,
    apply_motion,
    compose,
    inverse,
    local_to_object_motion,
    motion_between,
    object_to_local_motion,
    relative_pose,
)
from .motion import MotionModel, Prediction, PredictConfig, expert_conditional, poe_score, predict
from .optimize import AnnealSchedule, anneal_maximize
from .pipeline import ExperimentConfig, baseline_predict, d_ang, d_norm, run_evaluation, run_training
from .query import QueryDensity, build_query_density, sample_env_frames, sample_link_pose, select_contact_frame

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule", "Bandwidths", "ContactModel", "ExperimentConfig", "FeatureSet", "MotionModel",
    "ParticleDensity", "PointCloud", "Pose", "Prediction", "PredictConfig", "QueryDensity", "RigidMotion",
    "SurfaceFeature", "anneal_maximize", "apply_motion", "baseline_predict", "build_feature_set",
    "build_features", "build_query_density", "compose", "d_ang", "d_norm", "eval_density", "eval_theta",
    "expert_conditional", "inverse", "learn_object_environment", "learn_robot_object",
    "local_to_object_motion", "motion_between", "object_to_local_motion", "poe_score", "predict",
    "relative_pose", "run_evaluation", "run_training", "sample_density", "sample_env_frames",
    "sample_link_pose", "select_contact_frame",
]
