"""Operator surface: dataset generation, prior training, shape calibration,
fitting, evaluation, and ablation grids.

Every command takes ``--config PATH`` (a JSON file with optional "body",
"camera", "noise", "flow", "train", and "fit" sections) and a set of flags
that override the config. Exit codes: 0 success, 2 validation error,
3 numeric failure. Environment: PHD_THREADS caps worker/torch threads,
PHD_LOG sets the logging level.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .body_model import BodyConfig, BodyModel, PoseState
from .camera import CameraIntrinsics, Keypoints2D, ProjectionError
from .fitting import (FitConfig, FitResult, FrameFit, fit_frame, fit_sequence,
                      load_poses, save_poses)
from .metrics import mpjpe, mve, pelvis_error, write_report
from .numerics import DivergenceError, SingularSystemError
from .point_fitter import fit_pose, ik_joints_only
from .prior import (CheckpointFormatError, FlowConfig, TrainSchedule,
                    build_angular_training_set, build_prior, build_training_set,
                    load_checkpoint, save_checkpoint, train_cfm)
from .shapify import CalibrationConfig, calibrate
from .synthdata import (DatasetFormatError, NoiseParams, make_ambiguous_frames,
                        make_calibration_frame, make_training_frames, read_dataset,
                        write_dataset)
from .body_model import subsample_points

log = logging.getLogger("phd")

_INIT_MAP = {"prior": "prior-sample", "external": "external", "rest-pose": "rest-pose"}


# --------------------------------------------------------------- config glue

def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _section(cfg: dict, name: str, cls, **overrides):
    data = dict(cfg.get(name, {}))
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**data)


def _body_model(args, cfg: dict) -> BodyModel:
    data = dict(cfg.get("body", {}))
    if getattr(args, "model", None):
        data.update(json.loads(Path(args.model).read_text()))
    return BodyModel(_section({"body": data}, "body", BodyConfig))


def _camera(cfg: dict) -> CameraIntrinsics:
    return _section(cfg, "camera", CameraIntrinsics)


def _read_frames(args, cfg: dict):
    """Dataset frames plus the camera/body they were rendered with.

    The dataset header wins over defaults; an explicit --config camera or
    body section (or --model) wins over the header.
    """
    header, it = read_dataset(args.frames)
    frames = list(it)
    cam_cfg = dict(header.get("camera", {}))
    cam_cfg.update(cfg.get("camera", {}))
    cam = _section({"camera": cam_cfg}, "camera", CameraIntrinsics)
    body_cfg = dict(header.get("body", {}))
    body_cfg.update(cfg.get("body", {}))
    if getattr(args, "model", None):
        body_cfg.update(json.loads(Path(args.model).read_text()))
    model = BodyModel(_section({"body": body_cfg}, "body", BodyConfig))
    return frames, cam, model


def _measurements(arg: str | None) -> tuple[float | None, float | None]:
    if arg is None:
        return None, None
    parts = arg.split(",")
    if len(parts) != 2:
        raise ValueError("--measurements expects 'HEIGHT_M,WEIGHT_KG'")
    return float(parts[0]), float(parts[1])


def _setup(args) -> None:
    level = os.environ.get("PHD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("PHD_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    if getattr(args, "deterministic", False):
        torch.manual_seed(int(getattr(args, "seed", 0) or 0))
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _workers(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    return max(1, int(os.environ.get("PHD_THREADS", "1")))


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    model = _body_model(args, cfg)
    cam = _camera(cfg)
    noise = _section(cfg, "noise", NoiseParams)
    seed = int(args.seed or 0)
    rng = np.random.default_rng(seed)
    if args.kind == "train":
        records = list(make_training_frames(model, cam, seed=seed, count=args.count,
                                            noise=noise))
    elif args.kind == "ambiguity":
        records = []
        for rec, init in make_ambiguous_frames(model, cam, rng, count=args.count):
            rec.extra.update({
                "init_theta": [float(v) for v in init.theta.reshape(-1)],
                "init_phi": [float(v) for v in init.phi],
                "init_p": [float(v) for v in init.p],
            })
            records.append(rec)
    elif args.kind == "calibration":
        records = [make_calibration_frame(model, cam, rng, scene_id=i)
                   for i in range(args.count)]
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown kind {args.kind!r}")
    write_dataset(args.out, records, cam, model, noise)
    log.info("wrote %d frames to %s", len(records), args.out)
    print(f"{args.kind}: {len(records)} frames -> {args.out}")
    return 0


def cmd_train_prior(args) -> int:
    cfg = _load_config(args.config)
    flow = _section(cfg, "flow", FlowConfig)
    sched = _section(cfg, "train", TrainSchedule, seed=args.seed)
    frames, cam, model = _read_frames(args, cfg)
    if flow.representation == "angular6d":
        dataset = build_angular_training_set(model, cam, frames)
    else:
        dataset = build_training_set(model, cam, frames)
    prior = build_prior(flow, dataset.norm, seed=int(args.seed or 0))
    trace = train_cfm(prior, dataset, sched)
    prior.meta["loss_trace"] = [[int(s), float(l)] for s, l in trace]
    save_checkpoint(prior, args.out)
    first, last = trace[0][1], trace[-1][1]
    print(f"trained {sched.stage1_steps + sched.stage2_steps} steps on "
          f"{len(dataset)} records: loss {first:.4f} -> {last:.4f}; "
          f"checkpoint {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config)
    calib_cfg = _section(cfg, "calibration", CalibrationConfig)
    frames, cam, model = _read_frames(args, cfg)
    if not frames:
        raise ValueError("calibration dataset is empty")
    rec = frames[int(args.frame_index)]
    height, weight = _measurements(args.measurements)
    if height is None and "height_m" in rec.extra and not args.no_measurements:
        height = float(rec.extra["height_m"])
        weight = float(rec.extra["weight_kg"])
    if args.no_measurements:
        height = weight = None
    result = calibrate(model, cam, rec.keypoints(), height_m=height,
                       weight_kg=weight, cfg=calib_cfg)
    out = {
        "beta": [float(v) for v in result.beta],
        "height_m": height,
        "weight_kg": weight,
        "frame_id": rec.frame_id,
    }
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    print(f"calibrated shape from {rec.frame_id} "
          f"(measured={'yes' if height is not None else 'no'}) -> {args.out}")
    return 0


def _resolve_shape(shape_arg: str | None, rec) -> np.ndarray:
    if shape_arg in (None, "gt"):
        return np.asarray(rec.beta, dtype=np.float64)
    if shape_arg == "zero":
        return np.zeros_like(np.asarray(rec.beta, dtype=np.float64))
    data = json.loads(Path(shape_arg).read_text())
    return np.asarray(data["beta"], dtype=np.float64)


def _frame_init(rec) -> PoseState | None:
    if "init_theta" not in rec.extra:
        return None
    return PoseState(
        theta=np.asarray(rec.extra["init_theta"], dtype=np.float64).reshape(-1, 3),
        phi=np.asarray(rec.extra["init_phi"], dtype=np.float64),
        p=np.asarray(rec.extra["init_p"], dtype=np.float64),
    )


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    fit_cfg = _section(cfg, "fit", FitConfig, seed=args.seed,
                       init=_INIT_MAP.get(args.init) if args.init else None)
    if args.no_prior:
        fit_cfg = dataclasses.replace(fit_cfg, lambda_prior=0.0)
    prior = None
    if fit_cfg.lambda_prior > 0 or fit_cfg.init == "prior-sample":
        if not args.prior:
            raise ValueError("--prior is required unless --no-prior is given")
        prior = load_checkpoint(args.prior)
    frames, cam, model = _read_frames(args, cfg)
    if not frames:
        raise ValueError("no frames to fit")
    external = load_poses(args.external_init) if args.external_init else {}

    jobs = []
    for rec in frames:
        init = None
        if fit_cfg.init == "external":
            init = external.get(rec.frame_id) or _frame_init(rec)
            if init is None:
                raise ValueError(f"no external init for frame {rec.frame_id}")
        beta = _resolve_shape(args.shape, rec)
        jobs.append((rec, beta, init))

    def run_one(rec, beta, init) -> FrameFit:
        # one diverging frame degrades to a failed entry instead of killing
        # the batch; the command only fails when nothing fits at all
        try:
            return fit_frame(model, prior, cam, rec.keypoints(), beta, fit_cfg,
                             init, rec.frame_id)
        except DivergenceError as exc:
            log.warning("frame %s diverged: %s", rec.frame_id, exc)
            return FrameFit(frame_id=rec.frame_id, state=PoseState.rest(), ok=False,
                            note=f"diverged at iteration {exc.iteration}")

    workers = _workers(args)
    if workers > 1 and not fit_cfg.warm_start:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_one, rec, beta, init)
                       for rec, beta, init in jobs]
            entries = [f.result() for f in futures]  # submit order, not completion
    else:
        entries = []
        previous = None
        for rec, beta, init in jobs:
            if init is None and fit_cfg.warm_start and previous is not None:
                init = previous
            entry = run_one(rec, beta, init)
            entries.append(entry)
            if entry.ok:
                previous = entry.state
    result = FitResult(entries=entries)
    result.save(args.out)
    summary = {
        "frames": len(entries),
        "fitted": sum(e.ok for e in entries),
        "seconds": round(sum(e.seconds for e in entries), 3),
        "prior": bool(prior) and fit_cfg.lambda_prior > 0,
        "init": fit_cfg.init,
    }
    Path(args.out).with_suffix(".summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"fit {summary['fitted']}/{summary['frames']} frames -> {args.out}")
    if summary["fitted"] == 0:
        print("numeric failure: no frame could be fitted", file=sys.stderr)
        return 3
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    preds = load_poses(args.pred)
    frames, _cam, model = _read_frames(args, cfg)
    rows, skipped = [], 0
    acc = {m: [] for m in ("mpjpe_abs", "mpjpe_pa", "mpjpe_proc", "mve_pa", "pelvis_mm")}
    for rec in frames:
        state = preds.get(rec.frame_id)
        if state is None:
            skipped += 1
            continue
        beta = _resolve_shape(args.shape, rec)
        with torch.no_grad():
            jp = model.joints3d(beta, state.theta, state.phi, state.p).numpy()
            jg = model.joints3d(rec.beta, rec.theta, rec.phi, rec.p).numpy()
            vp = model.skin(beta, state.theta, state.phi, state.p).vertices.numpy()
            vg = model.skin(rec.beta, rec.theta, rec.phi, rec.p).vertices.numpy()
        row = {
            "frame_id": rec.frame_id,
            "mpjpe_abs": mpjpe(jp, jg, mode="camera-absolute"),
            "mpjpe_pa": mpjpe(jp, jg, mode="pelvis-aligned"),
            "mpjpe_proc": mpjpe(jp, jg, mode="procrustes"),
            "mve_pa": mve(vp, vg, mode="pelvis-aligned",
                          pred_pelvis=jp[:1], gt_pelvis=jg[:1]),
            "pelvis_mm": pelvis_error(state.p, rec.p),
        }
        rows.append(row)
        for k in acc:
            acc[k].append(row[k])
    if not rows:
        raise ValueError("no overlapping frames between predictions and dataset")
    summary = {f"mean_{k}": float(np.mean(v)) for k, v in acc.items()}
    summary["frames"] = len(rows)
    summary["skipped"] = skipped
    write_report(args.out, rows, summary)
    print("  ".join(f"{k}={v:.2f}" for k, v in summary.items() if k.startswith("mean")))
    print(f"report -> {args.out}")
    return 0


# ----------------------------------------------------------------- ablations

def _ablate_points(args, model, rng) -> tuple[list[dict], dict]:
    sigma = 0.005
    fractions = (0.25, 0.5, 1.0)
    errs = {f: [] for f in fractions}
    errs_ik = []
    for _ in range(args.count):
        beta = rng.normal(0.0, 1.0, model.config.num_betas).clip(-2, 2)
        theta = rng.uniform(model.theta_lower, model.theta_upper) * rng.uniform(0.3, 1.0)
        phi = rng.normal(0.0, 0.8, 3)
        clean = model.extract_points(beta, theta, phi, np.zeros(3)).numpy()
        gt_j = clean[model.num_surface : model.num_surface + 24]
        gt_j = gt_j - gt_j[0]
        noisy = clean + rng.normal(0.0, sigma, clean.shape)
        for frac in fractions:
            _, mask = subsample_points(model, noisy, frac)
            fit = fit_pose(model, noisy, beta, mask=mask)
            j = model.joints3d(beta, fit.theta, fit.phi, np.zeros(3)).numpy()
            errs[frac].append(float(np.linalg.norm((j - j[0]) - gt_j, axis=1).mean() * 1e3))
        ik = ik_joints_only(model, noisy[model.num_surface : model.num_surface + 24], beta)
        j = model.joints3d(beta, ik.theta, ik.phi, np.zeros(3)).numpy()
        errs_ik.append(float(np.linalg.norm((j - j[0]) - gt_j, axis=1).mean() * 1e3))
    rows = [{"variant": f"points-{int(f * 100)}pct", "mpjpe_pa": float(np.mean(errs[f]))}
            for f in fractions]
    rows.append({"variant": "ik-joints-only", "mpjpe_pa": float(np.mean(errs_ik))})
    m = {f: np.mean(errs[f]) for f in fractions}
    summary = {
        "ordering_25_50_100": bool(m[0.25] >= m[0.5] >= m[1.0]),
        "ik_worse_than_full": bool(np.mean(errs_ik) >= m[1.0]),
        "sigma_mm": sigma * 1000.0,
        "poses": args.count,
    }
    return rows, summary


def _ablate_prior(args, model, cam, rng) -> tuple[list[dict], dict]:
    if not args.prior:
        raise ValueError("--grid prior requires --prior CHECKPOINT")
    prior = load_checkpoint(args.prior)
    base = _load_config(args.config)
    if args.frames:
        frames, cam, model = _read_frames(args, base)
        pairs = [(rec, _frame_init(rec)) for rec in frames]
        if any(init is None for _, init in pairs):
            raise ValueError("ambiguity dataset rows need init_* extras")
    else:
        pairs = make_ambiguous_frames(model, cam, rng, count=args.count)
    fit_cfg = _section(base, "fit", FitConfig, seed=args.seed, init="external")
    rows, wins = [], 0
    for rec, init in pairs:
        guided = fit_frame(model, prior, cam, rec.keypoints(), rec.beta, fit_cfg,
                           init=init, frame_id=rec.frame_id)
        plain = fit_frame(model, None, cam, rec.keypoints(), rec.beta,
                          dataclasses.replace(fit_cfg, lambda_prior=0.0),
                          init=init, frame_id=rec.frame_id)
        jg = model.joints3d(rec.beta, rec.theta, rec.phi, rec.p).numpy()
        e_guided = mpjpe(model.joints3d(rec.beta, guided.state.theta, guided.state.phi,
                                        guided.state.p).numpy(), jg, "camera-absolute")
        e_plain = mpjpe(model.joints3d(rec.beta, plain.state.theta, plain.state.phi,
                                       plain.state.p).numpy(), jg, "camera-absolute")
        wins += e_guided < e_plain
        rows.append({"frame_id": rec.frame_id, "mpjpe_guided": e_guided,
                     "mpjpe_2d_only": e_plain})
    summary = {
        "frames": len(rows),
        "prior_wins": wins,
        "mean_guided": float(np.mean([r["mpjpe_guided"] for r in rows])),
        "mean_2d_only": float(np.mean([r["mpjpe_2d_only"] for r in rows])),
    }
    return rows, summary


def _ablate_shape(args, model, cam, rng) -> tuple[list[dict], dict]:
    base = _load_config(args.config)
    fit_cfg = _section(base, "fit", FitConfig, seed=args.seed, init="rest-pose")
    fit_cfg = dataclasses.replace(fit_cfg, lambda_prior=0.0)
    noise = NoiseParams(sigma_px=0.0, dropout=0.0, swap_prob=0.0)
    results = {"gt": [], "calibrated": [], "zero": []}
    pelvis = {"gt": [], "calibrated": [], "zero": []}
    for i in range(args.count):
        calib_rec = make_calibration_frame(model, cam, rng, scene_id=i, noise=noise)
        beta_gt = np.asarray(calib_rec.beta)
        calib = calibrate(model, cam, calib_rec.keypoints(),
                          height_m=float(calib_rec.extra["height_m"]),
                          weight_kg=float(calib_rec.extra["weight_kg"]))
        frames = list(make_training_frames(model, cam, seed=9000 + i, count=2,
                                           noise=noise))
        for rec in frames:
            rec.beta = beta_gt  # same subject as the calibration frame
            kp = Keypoints2D(*_reproject(model, cam, rec))
            jg = model.joints3d(beta_gt, rec.theta, rec.phi, rec.p).numpy()
            for name, beta in (("gt", beta_gt), ("calibrated", calib.beta),
                               ("zero", np.zeros_like(beta_gt))):
                entry = fit_frame(model, None, cam, kp, beta, fit_cfg,
                                  frame_id=rec.frame_id)
                jp = model.joints3d(beta, entry.state.theta, entry.state.phi,
                                    entry.state.p).numpy()
                results[name].append(mpjpe(jp, jg, "camera-absolute"))
                pelvis[name].append(pelvis_error(entry.state.p, rec.p))
    rows = [{"shape": k, "mpjpe_abs": float(np.mean(v)),
             "pelvis_mm": float(np.mean(pelvis[k]))} for k, v in results.items()]
    summary = {
        "ordering_mpjpe": bool(np.mean(results["gt"]) <= np.mean(results["calibrated"])
                               <= np.mean(results["zero"])),
        "ordering_pelvis": bool(np.mean(pelvis["gt"]) <= np.mean(pelvis["calibrated"])
                                <= np.mean(pelvis["zero"])),
        "subjects": args.count,
    }
    return rows, summary


def _reproject(model, cam, rec):
    from .camera import project
    with torch.no_grad():
        joints = model.joints3d(rec.beta, rec.theta, rec.phi, rec.p)
        uv = project(cam, joints[list(model.keypoint_joints)]).numpy()
    return uv, np.ones(len(uv))


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    model = _body_model(args, cfg)
    cam = _camera(cfg)
    rng = np.random.default_rng(int(args.seed or 0))
    if args.grid == "points":
        rows, summary = _ablate_points(args, model, rng)
    elif args.grid == "prior":
        rows, summary = _ablate_prior(args, model, cam, rng)
    elif args.grid == "shape":
        rows, summary = _ablate_shape(args, model, cam, rng)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown grid {args.grid!r}")
    write_report(args.out, rows, summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"report -> {args.out}")
    return 0


# ------------------------------------------------------------------- parser

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--seed", type=int, default=None, help="master RNG seed")
    common.add_argument("--model", help="JSON body-model config")
    common.add_argument("--prior", help="prior checkpoint path")
    common.add_argument("--out", help="output path", required=False)
    common.add_argument("--frames", help="dataset path")
    common.add_argument("--measurements", help="subject HEIGHT_M,WEIGHT_KG")
    common.add_argument("--no-prior", action="store_true",
                        help="fit with the prior terms disabled")
    common.add_argument("--init", choices=sorted(_INIT_MAP),
                        help="pose initialization mode")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, deterministic kernels")

    parser = argparse.ArgumentParser(prog="phd",
                                     description="shape-calibrated point-prior "
                                                 "body fitting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--kind", choices=("train", "ambiguity", "calibration"),
                   default="train")
    p.add_argument("--count", type=int, default=1000, help="frames (or subjects)")
    p.set_defaults(func=cmd_gen_data, needs_out=True)

    p = sub.add_parser("train-prior", parents=[common], help="train the flow prior")
    p.set_defaults(func=cmd_train_prior, needs_out=True, needs_frames=True)

    p = sub.add_parser("calibrate", parents=[common], help="shape from a rest frame")
    p.add_argument("--frame-index", type=int, default=0)
    p.add_argument("--no-measurements", action="store_true",
                   help="ignore stored measurements (fallback priors)")
    p.set_defaults(func=cmd_calibrate, needs_out=True, needs_frames=True)

    p = sub.add_parser("fit", parents=[common], help="fit poses to 2D keypoints")
    p.add_argument("--shape", help="'gt', 'zero', or a calibrate output JSON")
    p.add_argument("--external-init", help="pose JSONL for --init external")
    p.set_defaults(func=cmd_fit, needs_out=True, needs_frames=True)

    p = sub.add_parser("eval", parents=[common], help="score predictions against GT")
    p.add_argument("--pred", required=True, help="pose JSONL to evaluate")
    p.add_argument("--shape", help="'gt', 'zero', or a calibrate output JSON")
    p.set_defaults(func=cmd_eval, needs_out=True, needs_frames=True)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--grid", choices=("points", "prior", "shape"), required=True)
    p.add_argument("--count", type=int, default=10)
    p.set_defaults(func=cmd_ablate, needs_out=True)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "needs_out", False) and not args.out:
            raise ValueError(f"{args.command} requires --out")
        if getattr(args, "needs_frames", False) and not args.frames:
            raise ValueError(f"{args.command} requires --frames")
        _setup(args)
        return args.func(args)
    except (DivergenceError, SingularSystemError, FloatingPointError,
            ProjectionError) as exc:
        log.error("numeric failure: %s", exc)
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError, DatasetFormatError,
            CheckpointFormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
