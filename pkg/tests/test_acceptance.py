"""Acceptance suite: the shipped guarantees, one test per criterion.

Each test prints one `CRITERION n: PASS/FAIL (...)` line with its measured
numbers and pinned tolerances. The two expensive criteria (prior training
and distillation efficacy) share one full-scale prior trained per session
with the library's default configuration.
"""

import json
import sys
import time

import numpy as np
import pytest
import torch

from phd.body_model import BodyModel, PoseState, subsample_points
from phd.camera import CameraIntrinsics, Keypoints2D, project
from phd.fitting import FitConfig, fit_frame, loss_angle, loss_data, loss_point
from phd.metrics import mpjpe, mve, pelvis_error
from phd.point_fitter import PoseFit, fit_pose, ik_joints_only
from phd.prior import (
    ConditionTokens,
    FlowConfig,
    TrainSchedule,
    build_prior,
    build_training_set,
    cfm_loss,
    condition_features,
    flow_target,
    load_checkpoint,
    noise_forward,
    sample,
    save_checkpoint,
    train_cfm,
)
from phd.rotations import rodrigues
from phd.shapify import calibrate, reprojection_l1, shape_error, shape_regularizer
from phd.synthdata import (
    NoiseParams,
    make_ambiguous_frames,
    make_calibration_frame,
    make_training_frames,
    read_dataset,
    write_dataset,
)

from conftest import random_pose


def report(num: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {num}: {'PASS' if ok else 'FAIL'} ({detail})"
    # the real stderr so the verdict survives pytest's output capture
    sys.__stderr__.write(line + "\n")
    sys.__stderr__.flush()
    assert ok, line


# ------------------------------------------------- shared full-scale prior

TRAIN_RECORDS = 10_000
HELD_OUT = 100


@pytest.fixture(scope="session")
def trained_prior(model, cam):
    """Default-configuration prior on 10k records; held-out frames ride along."""
    t0 = time.perf_counter()
    frames = list(make_training_frames(model, cam, seed=0,
                                       count=TRAIN_RECORDS + HELD_OUT))
    train, held = frames[:TRAIN_RECORDS], frames[TRAIN_RECORDS:]
    dataset = build_training_set(model, cam, train)
    prior = build_prior(FlowConfig(), dataset.norm, seed=0)
    trace = train_cfm(prior, dataset, TrainSchedule())
    seconds = time.perf_counter() - t0
    return {"prior": prior, "trace": trace, "held": held, "seconds": seconds}


# ---------------------------------------------------------- 1: derivatives


def _directional_error(fn, arrays, rng) -> float:
    """Autograd directional derivative vs central finite differences."""
    tensors = [torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
               for a in arrays]
    out = fn(*tensors)
    w = None
    if out.ndim:  # vector-valued op: fixed random projection to a scalar
        w = torch.tensor(rng.standard_normal(tuple(out.shape)))
    scalar = (out * w).sum() if w is not None else out
    grads = torch.autograd.grad(scalar, tensors, allow_unused=True)
    dirs = [rng.standard_normal(np.shape(a)) for a in arrays]
    norm = np.sqrt(sum((d ** 2).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(
        0.0 if g is None else float((g * torch.tensor(d)).sum())
        for g, d in zip(grads, dirs)
    )
    h = 1e-5

    def value(sign: float) -> float:
        shifted = [torch.tensor(np.asarray(a, dtype=np.float64) + sign * h * d)
                   for a, d in zip(arrays, dirs)]
        o = fn(*shifted)
        return float((o * w).sum()) if w is not None else float(o)

    fd = (value(+1.0) - value(-1.0)) / (2.0 * h)
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-12)


def test_criterion_1_gradient_suite(model, cam):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = {}
    for _ in range(20):
        beta = rng.normal(0.0, 0.8, 10).clip(-2, 2)
        state = random_pose(model, rng)
        other = random_pose(model, rng)
        with torch.no_grad():
            uv = project(cam, model.joints3d(beta, other.theta, other.phi,
                                             other.p)[list(model.keypoint_joints)])
        kp = Keypoints2D(uv.numpy(), rng.uniform(0.5, 1.0, len(uv)))
        target = model.extract_points(beta, other.theta, other.phi, other.p).numpy()
        fitted = PoseFit(phi=other.phi, theta=other.theta, residual_rmse=0.0)
        pts3 = rng.normal(0, 1, (12, 3)) + np.array([0, 0, 4.0])
        cfg = FitConfig()
        ops = {
            "project": (lambda P: project(cam, P), [pts3]),
            "skin-vertices": (lambda b, t, f, p: model.skin(b, t, f, p).vertices,
                              [beta, state.theta, state.phi, state.p]),
            "extract-points": (model.extract_points,
                               [beta, state.theta, state.phi, state.p]),
            "height": (model.height, [beta]),
            "weight": (model.weight, [beta]),
            "rodrigues": (rodrigues, [state.theta]),
            "reprojection-l1": (
                lambda b, t, f, p: reprojection_l1(model, cam, kp, b, t, f, p),
                [beta, state.theta, state.phi, state.p]),
            "shape-regularizer": (
                lambda b: shape_regularizer(model, b, 1.72, 68.0), [beta]),
            "data-term": (
                lambda t, f, p: loss_data(model, cam, (t, f, p), beta, kp),
                [state.theta, state.phi, state.p]),
            "point-term": (
                lambda t, f, p: loss_point(target, model, (t, f, p), beta, cfg),
                [state.theta, state.phi, state.p]),
            "angle-term": (
                lambda t, f: loss_angle(None, model, (t, f, state.p), beta, cfg,
                                        fitted=fitted),
                [state.theta, state.phi]),
        }
        for name, (fn, arrays) in ops.items():
            err = _directional_error(fn, arrays, rng)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    peak = max(worst.values())
    ok = peak <= 1e-4 and elapsed <= 60.0
    detail = (f"max rel err {peak:.2e} over {len(worst)} ops x 20 configs, "
              f"tol 1e-4, {elapsed:.1f}s <= 60s; worst op "
              f"{max(worst, key=worst.get)}")
    report(1, ok, detail)


# ------------------------------------------------------- 2: flow exactness


def test_criterion_2_flow_exactness(model, cam):
    cfg = FlowConfig(blocks=1, width=16, heads=2)
    prior = build_prior(cfg, seed=0)
    prior.norm.scale = 0.5
    gen = torch.Generator().manual_seed(3)
    x0 = torch.randn((cfg.num_points, 3), generator=gen, dtype=torch.float64)
    oracle = lambda x, s: (x - x0) / s  # noqa: E731 - exact velocity field
    worst = 0.0
    for T in (1, 2, 5, 17):
        pts = sample(prior, None, t_steps=T, seed=9, flow_fn=oracle)
        worst = max(worst, float(np.abs(pts / prior.norm.scale - x0.numpy()).max()))
    for s_init in (0.25, 0.6, 1.0):
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        x_s = noise_forward(x0, eps, s_init)
        pts = sample(prior, None, t_steps=4, x_init=x_s, s_init=s_init,
                     flow_fn=oracle)
        worst = max(worst, float(np.abs(pts / prior.norm.scale - x0.numpy()).max()))
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    oracle_loss = float(cfm_loss(flow_target(x0, eps), x0, eps))
    ok = worst <= 1e-6 and oracle_loss == 0.0
    report(2, ok, f"max recovery err {worst:.2e} <= 1e-6 over T in {{1,2,5,17}} "
                  f"and start levels {{0.25,0.6,1.0}}; oracle CFM loss "
                  f"{oracle_loss}")


# -------------------------------------------------- 3: fitter round trip


def test_criterion_3_fitter_round_trip(model):
    t0 = time.perf_counter()
    rng = np.random.default_rng(23)
    worst = 0.0
    for _ in range(100):
        beta = rng.normal(0.0, 0.8, 10).clip(-2, 2)
        state = random_pose(model, rng)
        with torch.no_grad():
            cloud = model.extract_points(beta, state.theta, state.phi,
                                         state.p).numpy()
        fit = fit_pose(model, cloud, beta, refine_steps=0)
        worst = max(worst, fit.residual_rmse)
    sigma = 0.005
    fractions = (0.25, 0.5, 1.0)
    errs = {f: [] for f in fractions}
    errs_ik = []
    for _ in range(16):
        beta = rng.normal(0.0, 0.8, 10).clip(-2, 2)
        state = random_pose(model, rng, scale=0.5)
        clean = model.extract_points(beta, state.theta, state.phi,
                                     np.zeros(3)).numpy()
        gt_j = clean[model.num_surface:model.num_surface + 24]
        gt_j = gt_j - gt_j[0]
        noisy = clean + rng.normal(0.0, sigma, clean.shape)
        for frac in fractions:
            _, mask = subsample_points(model, noisy, frac)
            fit = fit_pose(model, noisy, beta, mask=mask)
            j = model.joints3d(beta, fit.theta, fit.phi, np.zeros(3)).numpy()
            errs[frac].append(np.linalg.norm((j - j[0]) - gt_j, axis=1).mean() * 1e3)
        ik = ik_joints_only(model, noisy[model.num_surface:model.num_surface + 24],
                            beta)
        j = model.joints3d(beta, ik.theta, ik.phi, np.zeros(3)).numpy()
        errs_ik.append(np.linalg.norm((j - j[0]) - gt_j, axis=1).mean() * 1e3)
    m = {f: float(np.mean(errs[f])) for f in fractions}
    m_ik = float(np.mean(errs_ik))
    ordering = m[0.25] >= m[0.5] >= m[1.0] and m_ik >= m[1.0]
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and ordering and elapsed <= 300.0
    report(3, ok, f"noiseless residual max {worst:.2e}m <= 1e-6 on 100 poses; "
                  f"5mm-noise MPJPE 25/50/100% = {m[0.25]:.1f}/{m[0.5]:.1f}/"
                  f"{m[1.0]:.1f}mm, joints-only {m_ik:.1f}mm; {elapsed:.0f}s <= 300s")


# ---------------------------------------------------- 4: shape calibration


def test_criterion_4_shape_calibration(model, cam):
    t0 = time.perf_counter()
    rng = np.random.default_rng(31)
    # oracle run: starting at the truth must sit far inside the threshold,
    # which validates 5 mm as a meaningful bound for the cold solver
    oracle_rec = make_calibration_frame(model, cam, rng, scene_id=99)
    oracle = calibrate(model, cam, oracle_rec.keypoints(),
                       height_m=float(oracle_rec.extra["height_m"]),
                       weight_kg=float(oracle_rec.extra["weight_kg"]),
                       beta_init=oracle_rec.beta, phi_init=oracle_rec.phi,
                       p_init=oracle_rec.p)
    oracle_mm = shape_error(model, oracle.beta, oracle_rec.beta)["vertex_mean_mm"]

    errs, better = [], 0
    for i in range(10):
        rec = make_calibration_frame(model, cam, rng, scene_id=i)
        height = float(rec.extra["height_m"])
        weight = float(rec.extra["weight_kg"])
        with_m = calibrate(model, cam, rec.keypoints(), height_m=height,
                           weight_kg=weight)
        without = calibrate(model, cam, rec.keypoints())
        e_with = shape_error(model, with_m.beta, rec.beta)["vertex_mean_mm"]
        e_without = shape_error(model, without.beta, rec.beta)["vertex_mean_mm"]
        errs.append(e_with)
        better += e_with <= e_without
    elapsed = time.perf_counter() - t0
    ok = (oracle_mm <= 1.0 and max(errs) <= 5.0 and better >= 8
          and elapsed <= 300.0)
    report(4, ok, f"oracle-start {oracle_mm:.2f}mm; cold vertex error mean "
                  f"{np.mean(errs):.2f}mm max {max(errs):.2f}mm <= 5mm on 10 "
                  f"subjects; measured <= unmeasured on {better}/10 (need 8); "
                  f"{elapsed:.0f}s <= 300s")


# ------------------------------------------------------ 5: prior training


def test_criterion_5_prior_training(model, cam, trained_prior):
    prior = trained_prior["prior"]
    trace = trained_prior["trace"]
    held = trained_prior["held"]
    first = float(np.mean([l for _, l in trace[:5]]))
    last = float(np.mean([l for _, l in trace[-5:]]))
    J0 = model.num_surface
    wins, sampler_mm, template_mm = 0, [], []
    for i, rec in enumerate(held):
        with torch.no_grad():
            gt = model.extract_points(rec.beta, rec.theta, rec.phi, rec.p).numpy()
            tmpl = model.extract_points(rec.beta, np.zeros((23, 3)), np.zeros(3),
                                        np.zeros(3)).numpy()
        gt, tmpl = gt - gt[J0], tmpl - tmpl[J0]
        cond = ConditionTokens(condition_features(cam, rec.keypoints()), rec.beta)
        pts = sample(prior, cond, seed=1000 + i)
        a = mpjpe(pts[J0:], gt[J0:], "pelvis-aligned", 0)
        b = mpjpe(tmpl[J0:], gt[J0:], "pelvis-aligned", 0)
        sampler_mm.append(a)
        template_mm.append(b)
        wins += a < b
    seconds = trained_prior["seconds"]
    halved = last <= 0.5 * first
    ok = halved and wins >= 90 and seconds <= 1800.0
    report(5, ok, f"smoothed CFM loss {first:.3f} -> {last:.3f} "
                  f"({'>=50% drop' if halved else '<50% drop'}); sampler beats "
                  f"rest template on {wins}/100 held-out frames (need 90), "
                  f"sampler {np.mean(sampler_mm):.0f}mm vs template "
                  f"{np.mean(template_mm):.0f}mm; train+data {seconds:.0f}s <= 1800s")


def test_trained_prior_uses_shape(trained_prior):
    """Two different shapes under identical noise/keypoints must disagree."""
    prior = trained_prior["prior"]
    cfg = prior.config
    gen = torch.Generator().manual_seed(5)
    x_s = torch.randn((cfg.num_points, 3), generator=gen, dtype=torch.float64)
    kp = np.zeros((cfg.num_cond, cfg.cond_feat_dim))
    beta_a, beta_b = np.zeros(10), np.zeros(10)
    beta_b[0] = 2.0
    from phd.prior import predict_flow

    out_a = predict_flow(prior, x_s, 0.6, ConditionTokens(kp, beta_a))
    out_b = predict_flow(prior, x_s, 0.6, ConditionTokens(kp, beta_b))
    diff = float((out_a - out_b).abs().max())
    assert diff > 1e-4, f"shape embedding inert: max output diff {diff:.2e}"


# --------------------------------------------- 6: distillation efficacy


def test_criterion_6_distillation_efficacy(model, cam, trained_prior):
    t0 = time.perf_counter()
    prior = trained_prior["prior"]
    rng = np.random.default_rng(41)
    pairs = make_ambiguous_frames(model, cam, rng, count=50)
    guided_cfg = FitConfig(init="external", seed=0)
    plain_cfg = FitConfig(init="external", seed=0, lambda_prior=0.0)
    wins, reductions = 0, []
    for rec, init in pairs:
        jg = model.joints3d(rec.beta, rec.theta, rec.phi, rec.p).numpy()
        guided = fit_frame(model, prior, cam, rec.keypoints(), rec.beta,
                           guided_cfg, init=init, frame_id=rec.frame_id)
        plain = fit_frame(model, None, cam, rec.keypoints(), rec.beta,
                          plain_cfg, init=init, frame_id=rec.frame_id)
        e_g = mpjpe(model.joints3d(rec.beta, guided.state.theta, guided.state.phi,
                                   guided.state.p).numpy(), jg, "camera-absolute")
        e_p = mpjpe(model.joints3d(rec.beta, plain.state.theta, plain.state.phi,
                                   plain.state.p).numpy(), jg, "camera-absolute")
        wins += e_g < e_p
        reductions.append((e_p - e_g) / e_p)
    med = float(np.median(reductions))
    elapsed = time.perf_counter() - t0
    ok = wins >= 40 and med >= 0.30 and elapsed <= 1200.0
    report(6, ok, f"prior-guided strictly better on {wins}/50 ambiguous frames "
                  f"(need 40); median relative error reduction {med:.1%} "
                  f"(need 30%); {elapsed:.0f}s <= 1200s")


# ------------------------------------------------ 7: shape conditioning


def test_criterion_7_shape_conditioning(model, cam):
    rng = np.random.default_rng(53)
    clean = NoiseParams(sigma_px=0.0, dropout=0.0, swap_prob=0.0)
    calib_noise = NoiseParams(sigma_px=2.0, dropout=0.0, swap_prob=0.0)
    from phd.synthdata import make_scene

    # each fit starts at the true pose: the converged residual then measures
    # the shape mismatch alone instead of initialization scatter
    cfg = FitConfig(lambda_prior=0.0, init="external", seed=0)
    errs = {"gt": [], "calibrated": [], "zero": []}
    pel = {"gt": [], "calibrated": [], "zero": []}
    for i in range(6):
        calib_rec = make_calibration_frame(model, cam, rng, scene_id=i,
                                           noise=calib_noise)
        beta_gt = np.asarray(calib_rec.beta)
        calib = calibrate(model, cam, calib_rec.keypoints(),
                          height_m=float(calib_rec.extra["height_m"]),
                          weight_kg=float(calib_rec.extra["weight_kg"]))
        frames = make_scene(model, cam, np.random.default_rng(700 + i), i,
                            length=2, noise=clean)
        for rec in frames:
            with torch.no_grad():
                joints = model.joints3d(beta_gt, rec.theta, rec.phi, rec.p)
                uv = project(cam, joints[list(model.keypoint_joints)]).numpy()
            kp = Keypoints2D(uv, np.ones(len(uv)))
            jg = model.joints3d(beta_gt, rec.theta, rec.phi, rec.p).numpy()
            for name, beta in (("gt", beta_gt), ("calibrated", calib.beta),
                               ("zero", np.zeros_like(beta_gt))):
                entry = fit_frame(model, None, cam, kp, beta, cfg,
                                  init=rec.pose(), frame_id=rec.frame_id)
                jp = model.joints3d(beta, entry.state.theta, entry.state.phi,
                                    entry.state.p).numpy()
                errs[name].append(mpjpe(jp, jg, "camera-absolute"))
                pel[name].append(pelvis_error(entry.state.p, rec.p))
    mj = {k: float(np.mean(v)) for k, v in errs.items()}
    mp = {k: float(np.mean(v)) for k, v in pel.items()}
    ok = (mj["gt"] <= mj["calibrated"] <= mj["zero"]
          and mp["gt"] <= mp["calibrated"] <= mp["zero"])
    report(7, ok, "MPJPE gt/calibrated/zero = "
                  f"{mj['gt']:.1f}/{mj['calibrated']:.1f}/{mj['zero']:.1f}mm, "
                  "pelvis = "
                  f"{mp['gt']:.1f}/{mp['calibrated']:.1f}/{mp['zero']:.1f}mm; "
                  "both must be nondecreasing")


# ------------------------------------------------------- 8: metric algebra


def test_criterion_8_metric_algebra(rng):
    worst_inv, worst_tri = 0.0, 0.0
    for _ in range(100):
        a = rng.normal(0.0, 0.5, (24, 3))
        b = rng.normal(0.0, 0.5, (24, 3))
        aa = rodrigues(torch.tensor(rng.normal(0, 1, 3))).numpy()
        s = float(rng.uniform(0.5, 2.0))
        t = rng.normal(0.0, 1.0, 3)
        transformed = s * (a @ aa.T) + t
        base = mpjpe(a, b, "procrustes")
        moved = mpjpe(transformed, b, "procrustes")
        worst_inv = max(worst_inv, abs(base - moved))
        lhs = mpjpe(a, b, "pelvis-aligned", 0)
        rhs = mpjpe(a, b, "camera-absolute") + pelvis_error(a[0], b[0])
        worst_tri = max(worst_tri, lhs - rhs)
    x = rng.normal(0.0, 0.5, (24, 3))
    v = rng.normal(0.0, 0.5, (100, 3))
    zeros = (
        mpjpe(x, x, "camera-absolute"),
        mpjpe(x, x, "pelvis-aligned", 0),
        mpjpe(x, x, "procrustes"),
        mve(v, v, "pelvis-aligned", pred_pelvis=x[:1], gt_pelvis=x[:1]),
        pelvis_error(x[0], x[0]),
    )
    worst_zero = max(abs(z) for z in zeros)
    ok = worst_inv <= 1e-9 and worst_tri <= 1e-9 and worst_zero <= 1e-9
    report(8, ok, f"similarity invariance {worst_inv:.2e} <= 1e-9; triangle "
                  f"slack {worst_tri:.2e} <= 1e-9 on 100 cases; identical-input "
                  f"metrics max {worst_zero:.2e}")


# -------------------------------------------------- 9: determinism and IO


def test_criterion_9_determinism_and_io(model, cam, tmp_path):
    from phd.cli import main

    # dataset round trip: bytes stable under write -> read -> write
    frames = list(make_training_frames(model, cam, seed=5, count=4))
    d1, d2 = tmp_path / "a.phd", tmp_path / "b.phd"
    write_dataset(d1, frames, cam, model, NoiseParams())
    _, back = read_dataset(d1)
    write_dataset(d2, list(back), cam, model, NoiseParams())
    dataset_exact = d1.read_bytes() == d2.read_bytes()

    # checkpoint round trip: bytes stable under save -> load -> save
    cfg = FlowConfig(blocks=1, width=16, heads=2)
    prior = build_prior(cfg, seed=0)
    c1, c2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(prior, c1)
    save_checkpoint(load_checkpoint(c1), c2)
    ckpt_exact = c1.read_bytes() == c2.read_bytes()

    # CLI determinism: identical bytes across two deterministic invocations
    tiny = {
        "body": {"num_surface_points": 60, "ring_segments": 6, "seed": 0},
        "flow": {"blocks": 1, "width": 32, "heads": 2, "num_points": 105,
                 "num_surface": 60, "t_inference": 2},
        "train": {"stage1_steps": 2, "stage2_steps": 4, "batch": 4,
                  "use_compile": False, "warmup_steps": 0},
        "fit": {"iterations": 3, "sampler_steps": 2, "fitter_steps": 4,
                "resample_every": 2},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny))
    data = tmp_path / "tiny.phd"
    ckpt = tmp_path / "tiny.ckpt"
    try:
        assert main(["gen-data", "--kind", "train", "--count", "3", "--seed", "1",
                     "--out", str(data), "--config", str(cfg_path)]) == 0
        assert main(["train-prior", "--frames", str(data), "--seed", "0",
                     "--out", str(ckpt), "--config", str(cfg_path)]) == 0
        outs = []
        for name in ("p1.jsonl", "p2.jsonl"):
            out = tmp_path / name
            rc = main(["fit", "--frames", str(data), "--prior", str(ckpt),
                       "--shape", "gt", "--seed", "3", "--deterministic",
                       "--out", str(out), "--config", str(cfg_path)])
            assert rc == 0
            outs.append(out.read_bytes())
        cli_exact = outs[0] == outs[1]
    finally:
        torch.use_deterministic_algorithms(False)
    ok = dataset_exact and ckpt_exact and cli_exact
    report(9, ok, f"dataset round trip exact: {dataset_exact}; checkpoint "
                  f"round trip exact: {ckpt_exact}; deterministic CLI fits "
                  f"bit-identical: {cli_exact}")
