"""Training/evaluation protocol, baseline, metrics and reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import pushsim as ps
from .contact import OBJECT_ENVIRONMENT, ROBOT_OBJECT, ContactModel, learn_object_environment, learn_robot_object
from .density import Bandwidths
from .errors import ConfigError, LostContact, NonUnitQuaternion, PushXferError
from .features import build_feature_set
from .geom import IDENTITY_Q, Pose, RigidMotion, compose, qrot, qyaw, relative_pose, yaw_of
from .motion import Expert, MotionKernel, MotionModel, PredictConfig, predict, record_rollout
from .optimize import AnnealSchedule
from .query import (
    ContactFrame,
    Feasibility,
    build_query_density,
    sample_env_frames,
    sample_feasible_link_pose,
    select_contact_frame,
)

BUNDLE_FORMAT = "pushxfer/model-bundle"
PREDICTORS = ("ro", "ro3oe", "ro5oe")
N_ENV = {"ro": 0, "ro3oe": 3, "ro5oe": 5}
TEST_SHAPES = ("cube", "cuboid", "triangular-prism", "rounded-prism", "cylinder")


# ---------------------------------------------------------------- metrics

def d_ang(q_test, q_pred, tol: float = 1e-6) -> float:
    """``1 - <q_test, q_pred>²`` for unit quaternions."""
    a = np.asarray(q_test, dtype=float)
    b = np.asarray(q_pred, dtype=float)
    for q in (a, b):
        if abs(np.linalg.norm(q) - 1.0) > tol:
            raise NonUnitQuaternion(f"|q| = {np.linalg.norm(q)!r}")
    return float(1.0 - float(a @ b) ** 2)


def d_norm(d_lin: float, d_ang_value: float, L: float = 0.4) -> float:
    if not L > 0:
        raise ValueError("L must be positive")
    return 0.5 * d_ang_value + d_lin / (2.0 * L)


# ---------------------------------------------------------------- actions

def build_action_set(link: str | None = None, linear: float = 0.1, angular_deg: float = 10.0,
                     duration: float = 4.0):
    """Linear push plus the two angular pushes.

    With ``link="side"`` the push turning away from the contact surface is
    left out; the side plate faces left, so that is the clockwise one.
    """
    acts = [
        ps.Action("linear", (linear, 0.0, 0.0), 0.0, duration),
        ps.Action("angular+", (linear, 0.0, 0.0), angular_deg, duration),
        ps.Action("angular-", (linear, 0.0, 0.0), -angular_deg, duration),
    ]
    if link == "side":
        acts = acts[:2]
    return acts


def baseline_predict(action: ps.Action, com_pose: Pose, robot_pose: Pose, alpha_deg: float | None = None) -> RigidMotion:
    """World-frame translation ``b`` of the object's COM; rotation is identity.

    The translation is ``a·l`` rotated into the world by the robot base
    heading.  For angular pushes it is turned by ``alpha_deg`` (default
    ``|angular velocity|`` read as an angle in degrees) towards the turn.
    ``com_pose`` is accepted for symmetry with the other predictors; the
    translation does not depend on it.
    """
    t = np.array(action.linear, dtype=float) * action.duration
    alpha = 0.0
    if action.angular_z_deg != 0.0:
        a = abs(action.angular_z_deg) if alpha_deg is None else alpha_deg
        alpha = math.copysign(math.radians(a), action.angular_z_deg)
    heading = float(yaw_of(robot_pose.q)) + alpha
    return RigidMotion(qrot(qyaw(heading), t), IDENTITY_Q)


# ----------------------------------------------------------------- config

def _tuple(conv):
    def parse(text):
        if isinstance(text, (tuple, list)):
            return tuple(conv(v) for v in text)
        return tuple(conv(v.strip()) for v in str(text).split(",") if v.strip())

    return parse


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    scale: str = "paper"
    train_shape: str = "cube"
    test_shapes: tuple = TEST_SHAPES
    point_density: float = 1e4
    feature_k: int = 20
    contacts_per_model: int = 100
    rollouts: int = 5
    train_sizes: tuple = (100, 200, 500)
    query_poses: int = 50
    repeats: int = 4
    predictors: tuple = PREDICTORS
    K_Q: int = 200
    n_env: int = 5
    cutoff: float = 0.01
    delta_E: float = 0.05
    env_samples: int = 1000
    frame_smoothing: float = 4.0
    frame_iterations: int = 100
    candidates: int = 500
    seeds: int = 100
    iterations: int = 100
    keep: int = 10
    T0: float = 1.0
    predict_T0: float = 0.01
    sigma_p: float = 0.01
    sigma_q: float = 100.0
    sigma_r: float = 10.0
    sigma_mp: float = 0.02
    sigma_mq: float = 200.0
    friction_min: float = 0.15
    friction_max: float = 0.35
    linear_speed: float = 0.1
    angular_deg: float = 10.0
    duration: float = 4.0
    baseline_alpha_deg: float = 10.0
    score: str = "rank1"
    random_test_yaw: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.scale not in ("paper", "desk"):
            raise ConfigError(f"scale must be paper or desk, got {self.scale!r}")
        for name in ("contacts_per_model", "rollouts", "query_poses", "repeats", "K_Q", "candidates",
                     "seeds", "keep", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if any(n < 1 for n in self.train_sizes):
            raise ConfigError("training-set sizes must be positive")
        bad = set(self.predictors) - set(PREDICTORS)
        if bad:
            raise ConfigError(f"unknown predictor variants {sorted(bad)}")
        if self.score not in ("rank1", "best10"):
            raise ConfigError("score must be rank1 or best10")
        if self.n_env < max(N_ENV[p] for p in self.predictors):
            raise ConfigError("n_env is smaller than the largest environment-expert count")
        unknown = set(self.test_shapes + (self.train_shape,)) - set(ps.PRESET_SHAPES)
        if unknown:
            raise ConfigError(f"unknown shapes {sorted(unknown)}")

    # presets --------------------------------------------------------------
    @classmethod
    def preset(cls, scale: str = "paper", **overrides) -> "ExperimentConfig":
        if scale == "paper":
            base = {}
        elif scale == "desk":
            base = dict(contacts_per_model=20, query_poses=3, K_Q=1000, candidates=40, seeds=25,
                        iterations=40, frame_iterations=40)
        else:
            raise ConfigError(f"unknown scale {scale!r}")
        base.update(overrides)
        return cls(scale=scale, **base)

    # derived --------------------------------------------------------------
    @property
    def bandwidths(self) -> Bandwidths:
        return Bandwidths(self.sigma_p, self.sigma_q, self.sigma_r, self.sigma_mp, self.sigma_mq)

    @property
    def predict_config(self) -> PredictConfig:
        return PredictConfig(self.candidates, self.seeds, self.iterations, self.keep, self.predict_T0,
                             self.predict_T0 * 1e-3)

    @property
    def sim_config(self) -> ps.SimConfig:
        return ps.SimConfig(friction_range=(self.friction_min, self.friction_max))

    @property
    def push_length(self) -> float:
        return self.linear_speed * self.duration

    def actions(self, link: str):
        return build_action_set(link, self.linear_speed, self.angular_deg, self.duration)

    @property
    def n_training_pushes(self) -> int:
        return sum(self.contacts_per_model * len(self.actions(k)) * self.rollouts for k in ("front", "side"))

    # text format ----------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(float(v))
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        vals = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            vals[k] = v
        vals.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(vals)

    @classmethod
    def from_mapping(cls, vals: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls) if not f.name.startswith("_")}
        unknown = set(vals) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        scale = str(vals.get("scale", "paper"))
        defaults = cls.preset(scale)
        out = {}
        for k, v in vals.items():
            default = getattr(defaults, k)
            try:
                if isinstance(default, bool):
                    out[k] = _bool(v)
                elif isinstance(default, tuple):
                    conv = int if k == "train_sizes" else str
                    out[k] = _tuple(conv)(v)
                else:
                    out[k] = type(default)(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from None
        out.pop("scale", None)
        return cls.preset(scale, **out)

    def config_hash(self) -> str:
        text = self.to_text().replace(f"workers={self.workers}\n", "")
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path=None, scale=None, seed=None, **overrides) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    if scale is not None:
        overrides["scale"] = scale
    if seed is not None:
        overrides["seed"] = seed
    return ExperimentConfig.from_text(text, **overrides)


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Generator seeded by ``seed`` and a path of keys (strings hashed stably)."""
    ints = [int(seed)] + [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng(ints)


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ------------------------------------------------------------------ scene

@dataclass
class Scene:
    """An object resting on the ground plus its perceived cloud and features."""

    name: str
    shape: ps.GeneratedShape
    pose: Pose
    cloud: object
    features: object
    frame: Pose  # estimated object frame (cloud centroid + eigenframe)


def make_scene(name: str, cfg: ExperimentConfig, rng, yaw: float = 0.0) -> Scene:
    shape = ps.gen_shape(ps.preset_shape(name, cfg.point_density), rng)
    pose = shape.resting_pose(theta=yaw)
    cloud = shape.world_cloud(pose)
    fs = build_feature_set(cloud, k=cfg.feature_k)
    return Scene(name, shape, pose, cloud, fs, ps.estimate_pose_from_cloud(cloud))


def link_feasibility(link: ps.LinkSpec) -> Feasibility:
    return Feasibility(link_height=float(link.offset.p[2]), plate_width=link.width, plate_height=link.height)


@dataclass
class ContactSetup:
    """Where the link goes and which frames condition the experts."""

    link_pose: Pose
    robot_frame: ContactFrame
    env_frames: list


def sample_contact(scene: Scene, link: ps.LinkSpec, qL, qE, cfg: ExperimentConfig, rng) -> ContactSetup:
    lp = sample_feasible_link_pose(qL, scene.cloud, rng, link_feasibility(link))
    sched = AnnealSchedule(cfg.frame_iterations, cfg.T0)
    fL, _ = select_contact_frame(qL, sched, rng, link_pose=lp, smoothing=cfg.frame_smoothing)
    envs = sample_env_frames(qE, cfg.n_env, rng)
    return ContactSetup(lp, fL, envs)


def canonical_contact(scene: Scene, link: ps.LinkSpec) -> Pose:
    """Link flush against the object face on the −x side, centred, at link height."""
    x_min = float(scene.cloud.points[:, 0].min())
    return Pose.planar(x_min, float(scene.pose.p[1]), 0.0, z=float(link.offset.p[2]))


# --------------------------------------------------------------- training

@dataclass
class TrainingPush:
    link: str
    contact: int
    action: str
    rollout: int
    mu: float
    contact_lost: bool
    robot_kernel: MotionKernel | None
    env_kernels: list

    def to_dict(self) -> dict:
        def kd(k):
            return {"u": k.u.as_list(), "r": [float(x) for x in k.r], "m": k.m.as_list()}

        return {
            "link": self.link, "contact": self.contact, "action": self.action, "rollout": self.rollout,
            "mu": self.mu, "contact_lost": self.contact_lost,
            "robot_kernel": None if self.robot_kernel is None else kd(self.robot_kernel),
            "env_kernels": [kd(k) for k in self.env_kernels],
        }

    @classmethod
    def from_dict(cls, d) -> "TrainingPush":
        def kern(x):
            return MotionKernel(Pose.from_list(x["u"]), np.array(x["r"]), RigidMotion.from_list(x["m"]))

        rk = None if d["robot_kernel"] is None else kern(d["robot_kernel"])
        return cls(d["link"], d["contact"], d["action"], d["rollout"], d["mu"], d["contact_lost"], rk,
                   [kern(x) for x in d["env_kernels"]])


@dataclass
class ModelBundle:
    config: ExperimentConfig
    contact_models: dict
    pushes: list
    motion_models: dict = field(default_factory=dict)

    def models_for(self, size: int) -> dict:
        if size not in self.motion_models:
            self.motion_models[size] = build_motion_models(self.pushes, size, self.config)
        return self.motion_models[size]

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "format": BUNDLE_FORMAT,
            "version": 1,
            "provenance": {"seed": cfg.seed, "config_hash": cfg.config_hash(), "scale": cfg.scale,
                           "training_pushes": len(self.pushes)},
            # the worker count is an execution detail and must not change the file
            "config": "".join(ln for ln in cfg.to_text().splitlines(True) if not ln.startswith("workers=")),
            "contact_models": {k: m.to_dict() for k, m in sorted(self.contact_models.items())},
            "pushes": [p.to_dict() for p in self.pushes],
            "motion_models": {
                str(size): {f"{link}/{act}/{kind}": m.to_dict()
                            for (link, act), pair in sorted(models.items())
                            for kind, m in zip((ROBOT_OBJECT, OBJECT_ENVIRONMENT), pair)}
                for size, models in sorted(self.motion_models.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, doc) -> "ModelBundle":
        if doc.get("format") != BUNDLE_FORMAT:
            raise ValueError("not a model bundle")
        cfg = ExperimentConfig.from_text(doc["config"])
        cms = {k: ContactModel.from_dict(v) for k, v in doc["contact_models"].items()}
        pushes = [TrainingPush.from_dict(p) for p in doc["pushes"]]
        mm = {}
        for size, models in doc["motion_models"].items():
            grouped = {}
            for key, m in models.items():
                link, act, kind = key.split("/")
                grouped.setdefault((link, act), {})[kind] = MotionModel.from_dict(m)
            mm[int(size)] = {k: (v[ROBOT_OBJECT], v[OBJECT_ENVIRONMENT]) for k, v in grouped.items()}
        return cls(cfg, cms, pushes, mm)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))


def learn_contact_models(scene: Scene, cfg: ExperimentConfig, links: dict) -> dict:
    bw = cfg.bandwidths
    out = {}
    for name, link in links.items():
        lp = canonical_contact(scene, link)
        out[name] = learn_robot_object(scene.features, lp, lp.transform_points(link.surface_points()),
                                       cfg.cutoff, bw)
    out["environment"] = learn_object_environment(
        scene.features, ps.SimConfig().ground_height, cfg.delta_E, cfg.env_samples,
        rng_for(cfg.seed, "env-model"), bw)
    return out


def run_training(cfg: ExperimentConfig) -> ModelBundle:
    """Learn contact models on the training object and roll out every training push."""
    links = ps.default_links()
    scene = make_scene(cfg.train_shape, cfg, rng_for(cfg.seed, "train-shape"))
    cms = learn_contact_models(scene, cfg, links)
    qE = build_query_density(cms["environment"], scene.features, cfg.K_Q, rng_for(cfg.seed, "train-qE"))
    sim = cfg.sim_config

    jobs = []
    for name in ("front", "side"):
        qL = build_query_density(cms[name], scene.features, cfg.K_Q, rng_for(cfg.seed, "train-qL", name))
        jobs += [(name, c, qL) for c in range(cfg.contacts_per_model)]

    def run(job):
        name, c, qL = job
        link = links[name]
        setup = sample_contact(scene, link, qL, qE, cfg, rng_for(cfg.seed, "train-contact", name, c))
        frames = {"L": setup.robot_frame.v}
        frames.update({f"E{k}": e.v for k, e in enumerate(setup.env_frames)})
        out = []
        for act in cfg.actions(name):
            for r in range(cfg.rollouts):
                mu = ps.sample_friction(sim, rng_for(cfg.seed, "train-push", name, c, act.id, r))
                res = ps.simulate_push(scene.shape, scene.pose, setup.link_pose, link, act, mu, sim,
                                       frames=frames, require_contact=False)
                try:
                    rk = record_rollout(res, "L", setup.robot_frame, act, ROBOT_OBJECT)
                except LostContact:
                    rk = None
                eks = [record_rollout(res, f"E{k}", e, act, OBJECT_ENVIRONMENT)
                       for k, e in enumerate(setup.env_frames)]
                out.append(TrainingPush(name, c, act.id, r, mu, res.contact_lost or not res.contact_made, rk, eks))
        return out

    pushes = [p for chunk in _map(run, jobs, cfg.workers) for p in chunk]
    bundle = ModelBundle(cfg, cms, pushes)
    for size in cfg.train_sizes:
        bundle.models_for(size)
    return bundle


def training_subset(pushes: list, size: int, seed: int) -> list:
    """Deterministic subset of ``size`` pushes, stratified by (link, action)."""
    n = len(pushes)
    if size >= n:
        return list(range(n))
    groups = {}
    for i, p in enumerate(pushes):
        groups.setdefault((p.link, p.action), []).append(i)
    keys = sorted(groups)
    quota = {k: int(math.floor(size * len(groups[k]) / n)) for k in keys}
    rest = size - sum(quota.values())
    for k in sorted(keys, key=lambda k: -(size * len(groups[k]) / n - quota[k]))[:rest]:
        quota[k] += 1
    chosen = []
    for k in keys:
        perm = rng_for(seed, "subset", size, *k).permutation(len(groups[k]))
        chosen += [groups[k][i] for i in perm[:quota[k]]]
    return sorted(chosen)


def build_motion_models(pushes: list, size: int, cfg: ExperimentConfig) -> dict:
    """``{(link, action): (robot-object model, environment model)}`` from a subset."""
    bw = cfg.bandwidths
    idx = training_subset(pushes, size, cfg.seed)
    grouped = {}
    for i in idx:
        p = pushes[i]
        if p.contact_lost or p.robot_kernel is None:
            continue
        ro, oe = grouped.setdefault((p.link, p.action), ([], []))
        ro.append(p.robot_kernel)
        oe.extend(p.env_kernels)
    return {k: (MotionModel.from_kernels(ro, k[1], ROBOT_OBJECT, bw),
                MotionModel.from_kernels(oe, k[1], OBJECT_ENVIRONMENT, bw))
            for k, (ro, oe) in sorted(grouped.items())}


# ------------------------------------------------------------- prediction

def make_experts(models: tuple, setup: ContactSetup, object_frame: Pose, variant: str) -> list:
    ro, oe = models
    experts = [Expert(ro, setup.robot_frame, setup.robot_frame.h(object_frame))]
    experts += [Expert(oe, e, e.h(object_frame)) for e in setup.env_frames[:N_ENV[variant]]]
    return experts


def predicted_final_pose(object_pose: Pose, object_frame: Pose, m_b) -> Pose:
    """Final object pose implied by the body-frame motion ``m_b`` of ``object_frame``."""
    return compose(compose(object_frame, m_b), relative_pose(object_frame, object_pose))


# ------------------------------------------------------------- evaluation

ROW_FIELDS = ("object", "link", "pose", "action", "repeat", "mu", "predictor", "train_size",
              "d_lin", "d_ang", "d_norm", "contact_lost", "error")


@dataclass
class EvaluationReport:
    rows: list
    L: float = 0.4

    def ok_rows(self):
        return [r for r in self.rows if not r["error"]]

    def summary(self) -> dict:
        groups = {}
        for r in self.rows:
            for key in (
                (r["object"], r["predictor"], r["train_size"], r["action"]),
                (r["object"], r["predictor"], r["train_size"], "*"),
                ("*", r["predictor"], r["train_size"], "*"),
            ):
                groups.setdefault(key, []).append(r)
        out = []
        for key in sorted(groups):
            rows = groups[key]
            good = [r for r in rows if not r["error"]]
            entry = {"object": key[0], "predictor": key[1], "train_size": key[2], "action": key[3],
                     "n": len(rows), "errors": len(rows) - len(good)}
            for m in ("d_lin", "d_ang", "d_norm"):
                vals = np.array([r[m] for r in good], dtype=float)
                entry[f"{m}_mean"] = float(vals.mean()) if len(vals) else None
                entry[f"{m}_std"] = float(vals.std()) if len(vals) else None
            out.append(entry)
        return {"L": self.L, "groups": out}

    def mean_d_norm(self, predictor: str, train_size: int | None = None, obj: str = "*") -> float:
        for g in self.summary()["groups"]:
            if (g["object"] == obj and g["predictor"] == predictor and g["action"] == "*"
                    and (train_size is None or g["train_size"] == train_size)):
                return g["d_norm_mean"]
        raise KeyError((predictor, train_size, obj))

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in self.rows:
            w.writerow([repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in ROW_FIELDS])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=1) + "\n"

    def plot_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("object", "predictor", "train_size", "d_norm_mean", "d_norm_std", "n"))
        for g in self.summary()["groups"]:
            if g["action"] == "*":
                w.writerow((g["object"], g["predictor"], g["train_size"],
                            repr(float(g["d_norm_mean"])), repr(float(g["d_norm_std"])), g["n"] - g["errors"]))
        return buf.getvalue()

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"rows": out / "rows.csv", "summary": out / "summary.json", "plot": out / "plot.csv"}
        paths["rows"].write_text(self.rows_csv())
        paths["summary"].write_text(self.summary_json())
        paths["plot"].write_text(self.plot_csv())
        return paths

    @classmethod
    def read_rows(cls, path, L: float = 0.4) -> "EvaluationReport":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({
                    "object": r["object"], "link": r["link"], "pose": int(r["pose"]), "action": r["action"],
                    "repeat": int(r["repeat"]), "mu": float(r["mu"]), "predictor": r["predictor"],
                    "train_size": int(r["train_size"]),
                    "d_lin": float(r["d_lin"]), "d_ang": float(r["d_ang"]), "d_norm": float(r["d_norm"]),
                    "contact_lost": r["contact_lost"] == "True", "error": r["error"],
                })
        return cls(rows, L)


def _score(final_true: Pose, final_pred: Pose, L: float):
    dl = float(np.linalg.norm(final_true.p - final_pred.p))
    da = d_ang(final_true.q, final_pred.q)
    return dl, da, d_norm(dl, da, L)


def _error_code(exc) -> str:
    return getattr(exc, "code", type(exc).__name__)


def run_evaluation(cfg: ExperimentConfig, bundle: ModelBundle, predictors=None, sizes=None,
                   include_baseline: bool = True) -> EvaluationReport:
    """Ground-truth pushes on every test object, scored for each predictor."""
    predictors = cfg.predictors if predictors is None else tuple(predictors)
    sizes = cfg.train_sizes if sizes is None else tuple(sizes)
    links = ps.default_links()
    L = cfg.push_length
    sim = cfg.sim_config
    pcfg = cfg.predict_config
    model_sets = {s: bundle.models_for(s) for s in sizes}

    scenes = {}
    for name in cfg.test_shapes:
        rng = rng_for(cfg.seed, "test-shape", name)
        yaw = float(rng.uniform(-math.pi, math.pi)) if cfg.random_test_yaw else 0.0
        scenes[name] = make_scene(name, cfg, rng, yaw)

    units = []
    for name in cfg.test_shapes:
        sc = scenes[name]
        qE = build_query_density(bundle.contact_models["environment"], sc.features, cfg.K_Q,
                                 rng_for(cfg.seed, "test-qE", name))
        for lname in ("front", "side"):
            qL = build_query_density(bundle.contact_models[lname], sc.features, cfg.K_Q,
                                     rng_for(cfg.seed, "test-qL", name, lname))
            units += [(name, lname, k, qL, qE) for k in range(cfg.query_poses)]

    def run(unit):
        name, lname, k, qL, qE = unit
        sc = scenes[name]
        link = links[lname]
        rows = []

        def row(act, rep, mu, pred, size, score=(math.nan,) * 3, lost=False, err=""):
            rows.append({"object": name, "link": lname, "pose": k, "action": act.id, "repeat": rep,
                         "mu": mu, "predictor": pred, "train_size": size, "d_lin": score[0],
                         "d_ang": score[1], "d_norm": score[2], "contact_lost": lost, "error": err})

        try:
            setup = sample_contact(sc, link, qL, qE, cfg, rng_for(cfg.seed, "test-contact", name, lname, k))
        except PushXferError as exc:
            for act in cfg.actions(lname):
                for rep in range(cfg.repeats):
                    for pred in predictors:
                        for size in sizes:
                            row(act, rep, math.nan, pred, size, err=_error_code(exc))
                    if include_baseline:
                        row(act, rep, math.nan, "baseline", 0, err=_error_code(exc))
            return rows
        robot_pose = link.base_from_link(setup.link_pose)
        for act in cfg.actions(lname):
            finals = {}
            for pred in predictors:
                for size in sizes:
                    try:
                        experts = make_experts(model_sets[size][(lname, act.id)], setup, sc.frame, pred)
                        preds = predict(experts, act, pcfg, rng_for(cfg.seed, "predict", name, lname, k,
                                                                       act.id, size, pred))
                        finals[(pred, size)] = [predicted_final_pose(sc.pose, sc.frame, p.m_b) for p in preds]
                    except (PushXferError, KeyError) as exc:
                        finals[(pred, size)] = _error_code(exc) if isinstance(exc, PushXferError) else "no_model"
            for rep in range(cfg.repeats):
                mu = ps.sample_friction(sim, rng_for(cfg.seed, "test-push", name, lname, k, act.id, rep))
                try:
                    res = ps.simulate_push(sc.shape, sc.pose, setup.link_pose, link, act, mu, sim)
                except PushXferError as exc:
                    for (pred, size) in finals:
                        row(act, rep, mu, pred, size, err=_error_code(exc))
                    if include_baseline:
                        row(act, rep, mu, "baseline", 0, err=_error_code(exc))
                    continue
                truth = res.object_poses[-1]
                for (pred, size), fin in finals.items():
                    if isinstance(fin, str):
                        row(act, rep, mu, pred, size, lost=res.contact_lost, err=fin)
                        continue
                    scores = [_score(truth, f, L) for f in fin]
                    best = scores[0] if cfg.score == "rank1" else min(scores, key=lambda s: s[2])
                    row(act, rep, mu, pred, size, best, res.contact_lost)
                if include_baseline:
                    b = baseline_predict(act, sc.pose, robot_pose, cfg.baseline_alpha_deg)
                    fin = Pose(sc.pose.p + b.p, sc.pose.q)
                    row(act, rep, mu, "baseline", 0, _score(truth, fin, L), res.contact_lost)
        return rows

    rows = [r for chunk in _map(run, units, cfg.workers) for r in chunk]
    return EvaluationReport(rows, L)


# ---------------------------------------------------------------- tuning

def tune_bandwidths(cfg: ExperimentConfig, bundle: ModelBundle, params=("sigma_mp", "sigma_mq"),
                    factors=(0.5, 1.0, 2.0), predictor: str = "ro", size: int | None = None,
                    validation_seed_offset: int = 1_000_003):
    """Coordinate-wise grid search of bandwidth factors on a validation split.

    The validation pushes come from a disjoint seed.  Returns the chosen
    config and a list of ``(param, factor, mean d_norm)`` trials.
    """
    size = size or max(cfg.train_sizes)
    best_cfg = cfg
    trials = []
    for name in params:
        results = []
        for f in factors:
            trial = replace(best_cfg, **{name: getattr(cfg, name) * f})
            vcfg = replace(trial, seed=cfg.seed + validation_seed_offset)
            b = ModelBundle(trial, bundle.contact_models, bundle.pushes)
            b.motion_models = {size: {k: tuple(m.with_bandwidths(trial.bandwidths) for m in pair)
                                      for k, pair in bundle.models_for(size).items()}}
            rep = run_evaluation(vcfg, b, predictors=(predictor,), sizes=(size,), include_baseline=False)
            score = rep.mean_d_norm(predictor, size)
            results.append((score, f, trial))
            trials.append((name, f, score))
        best = min(results, key=lambda t: (t[0], abs(math.log(t[1]))))
        best_cfg = best[2]
    return best_cfg, trials


def run_pipeline(cfg: ExperimentConfig, out_dir) -> tuple:
    """Train, evaluate and write the bundle plus reports into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = run_training(cfg)
    bundle.save(out / "models.json")
    report = run_evaluation(cfg, bundle)
    report.write(out)
    return bundle, report


__all__ = [
    "ExperimentConfig", "ModelBundle", "EvaluationReport", "TrainingPush", "Scene", "ContactSetup",
    "build_action_set", "baseline_predict", "d_ang", "d_norm", "run_training", "run_evaluation",
    "run_pipeline", "load_config", "training_subset", "build_motion_models", "make_scene",
    "tune_bandwidths", "rng_for",
]
