"""Command line interface: ``pushxfer <command> [options]``."""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import pushsim as ps
from .contact import ContactModel
from .errors import ConfigError, PushXferError
from .features import build_feature_set, read_cloud, write_ply
from .geom import Pose
from .pipeline import (
    PREDICTORS,
    ContactSetup,
    EvaluationReport,
    ModelBundle,
    baseline_predict,
    link_feasibility,
    load_config,
    make_experts,
    rng_for,
    run_evaluation,
    run_training,
)
from .motion import predict
from .optimize import AnnealSchedule
from .query import build_query_density, sample_env_frames, sample_feasible_link_pose, select_contact_frame


def _common(p):
    p.add_argument("--config", help="key=value experiment config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", choices=("paper", "desk"))
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pushxfer", description="Push forward models that transfer across shapes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-shapes", help="write preset shapes as PLY clouds plus spec files")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--shapes", default=",".join(ps.PRESET_SHAPES))

    p = sub.add_parser("train", help="roll out training pushes and learn all models")
    _common(p)
    p.add_argument("--out", required=True, help="model bundle path (JSON)")

    p = sub.add_parser("query", help="sample link poses on a cloud from a contact model")
    _common(p)
    p.add_argument("--model", required=True, help="model bundle or contact-model JSON")
    p.add_argument("--cloud", required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--link", default="front", choices=("front", "side"))

    p = sub.add_parser("predict", help="predict the object motion for one push")
    _common(p)
    p.add_argument("--models", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--link", default="front", choices=("front", "side"))
    p.add_argument("--link-pose", help="x,y,yaw_deg of the link; sampled from the query density if omitted")
    p.add_argument("--action", default="linear")
    p.add_argument("--predictor", default="ro", choices=PREDICTORS + ("baseline",))
    p.add_argument("--train-size", type=int)

    p = sub.add_parser("evaluate", help="run the test protocol and write reports")
    _common(p)
    p.add_argument("--models", help="model bundle; trained on the fly when omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--predictor", choices=PREDICTORS + ("baseline",), action="append")

    p = sub.add_parser("report", help="summarise an evaluation directory")
    p.add_argument("--input", required=True)
    p.add_argument("--train-size", type=int)
    return parser


def _config(args):
    over = {}
    if getattr(args, "workers", None):
        over["workers"] = args.workers
    return load_config(args.config, args.scale, args.seed, **over)


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def cmd_gen_shapes(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in [s.strip() for s in args.shapes.split(",") if s.strip()]:
        spec = ps.preset_shape(name, cfg.point_density)
        shape = ps.gen_shape(spec, rng_for(cfg.seed, "gen-shape", name))
        cloud = shape.world_cloud(shape.resting_pose())
        write_ply(out / f"{name}.ply", cloud)
        (out / f"{name}.shape").write_text(spec.to_text())
        written.append({"shape": name, "points": len(cloud), "ply": str(out / f"{name}.ply")})
    _emit({"written": written})


def cmd_train(args):
    cfg = _config(args)
    bundle = run_training(cfg)
    bundle.save(args.out)
    _emit({"bundle": args.out, "training_pushes": len(bundle.pushes),
           "lost_contact": sum(p.contact_lost for p in bundle.pushes), "config_hash": cfg.config_hash()})


def _load_contact_model(path, link):
    doc = json.loads(Path(path).read_text())
    if "contact_models" in doc:
        return ContactModel.from_dict(doc["contact_models"][link])
    return ContactModel.from_dict(doc)


def cmd_query(args):
    cfg = _config(args)
    model = _load_contact_model(args.model, args.link)
    cloud = read_cloud(args.cloud)
    fs = build_feature_set(cloud, k=cfg.feature_k)
    q = build_query_density(model, fs, cfg.K_Q, rng_for(cfg.seed, "cli-query"))
    link = ps.default_links()[args.link]
    rng = rng_for(cfg.seed, "cli-query-samples")
    poses = [sample_feasible_link_pose(q, cloud, rng, link_feasibility(link)).as_list() for _ in range(args.samples)]
    _emit({"link": args.link, "K_Q": q.K_Q, "link_poses": poses})


def _scene_from_cloud(path, cfg):
    cloud = read_cloud(path)
    fs = build_feature_set(cloud, k=cfg.feature_k)
    return cloud, fs, ps.estimate_pose_from_cloud(cloud)


def cmd_predict(args):
    bundle = ModelBundle.load(args.models)
    cfg = bundle.config if args.seed is None else replace(bundle.config, seed=args.seed)
    cloud, fs, frame = _scene_from_cloud(args.cloud, cfg)
    link = ps.default_links()[args.link]
    acts = {a.id: a for a in cfg.actions(args.link)}
    if args.action not in acts:
        raise ConfigError(f"action {args.action!r} not available for the {args.link} link: {sorted(acts)}")
    act = acts[args.action]
    rng = rng_for(cfg.seed, "cli-predict")
    qL = build_query_density(bundle.contact_models[args.link], fs, cfg.K_Q, rng)
    qE = build_query_density(bundle.contact_models["environment"], fs, cfg.K_Q, rng)
    if args.link_pose:
        x, y, yaw = (float(v) for v in args.link_pose.split(","))
        lp = Pose.planar(x, y, math.radians(yaw), z=float(link.offset.p[2]))
    else:
        lp = sample_feasible_link_pose(qL, cloud, rng, link_feasibility(link))
    if args.predictor == "baseline":
        b = baseline_predict(act, frame, link.base_from_link(lp), cfg.baseline_alpha_deg)
        _emit({"predictor": "baseline", "link_pose": lp.as_list(), "translation": b.p.tolist()})
        return
    sched = AnnealSchedule(cfg.frame_iterations, cfg.T0)
    fL, _ = select_contact_frame(qL, sched, rng, link_pose=lp, smoothing=cfg.frame_smoothing)
    setup = ContactSetup(lp, fL, sample_env_frames(qE, cfg.n_env, rng))
    size = args.train_size or max(cfg.train_sizes)
    experts = make_experts(bundle.models_for(size)[(args.link, act.id)], setup, frame, args.predictor)
    preds = predict(experts, act, cfg.predict_config, rng)
    _emit({"predictor": args.predictor, "train_size": size, "link_pose": lp.as_list(),
           "object_frame": frame.as_list(), "predictions": [p.as_dict() for p in preds]})


def cmd_evaluate(args):
    cfg = _config(args)
    bundle = ModelBundle.load(args.models) if args.models else run_training(cfg)
    chosen = args.predictor or list(cfg.predictors) + ["baseline"]
    variants = tuple(p for p in chosen if p != "baseline")
    report = run_evaluation(cfg, bundle, predictors=variants, include_baseline="baseline" in chosen)
    paths = report.write(args.out)
    _emit({k: str(v) for k, v in paths.items()})


def cmd_report(args):
    src = Path(args.input)
    rows_path = src / "rows.csv" if src.is_dir() else src
    report = EvaluationReport.read_rows(rows_path)
    lines = [f"{'object':<18}{'predictor':<10}{'size':>6}{'n':>6}{'d_lin':>10}{'d_ang':>10}{'d_norm':>10}"]
    for g in report.summary()["groups"]:
        if g["action"] != "*" or (args.train_size and g["train_size"] not in (0, args.train_size)):
            continue
        fmt = lambda v: f"{v:10.4f}" if v is not None else f"{'-':>10}"  # noqa: E731
        lines.append(f"{g['object']:<18}{g['predictor']:<10}{g['train_size']:>6}{g['n'] - g['errors']:>6}"
                     f"{fmt(g['d_lin_mean'])}{fmt(g['d_ang_mean'])}{fmt(g['d_norm_mean'])}")
    sys.stdout.write("\n".join(lines) + "\n")


COMMANDS = {
    "gen-shapes": cmd_gen_shapes,
    "train": cmd_train,
    "query": cmd_query,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (PushXferError, OSError, ValueError, KeyError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        sys.stderr.write(json.dumps({"error": code, "message": str(exc), "command": args.command}) + "\n")
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
