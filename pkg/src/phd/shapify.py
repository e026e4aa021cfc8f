"""Shape calibration from a single rest-pose frame.

Given one frame of 2D keypoints of a person standing in a known rest pose,
jointly optimize shape, pose, orientation and pelvis position against the
confidence-weighted L1 reprojection of the model joints, with shape
regularized toward the population mean and, when available, toward measured
height and weight. Without measurements, population averages stand in and
the regularizer weights shift accordingly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .body_model import BodyModel, NUM_JOINTS
from .camera import CameraIntrinsics, Keypoints2D, backproject_pixel, init_pelvis_depth, project
from .numerics import OptimizerConfig, ParamVector, optimize

# (lambda_beta, lambda_h, lambda_w): strong measurement terms when real
# measurements exist, uniform mild pull toward the average person otherwise
MEASURED_WEIGHTS = (0.1, 100.0, 10.0)
FALLBACK_WEIGHTS = (1.0, 1.0, 1.0)
FALLBACK_HEIGHT_M = 1.70
FALLBACK_WEIGHT_KG = 70.0


@dataclass
class CalibrationConfig:
    iterations: int = 300
    lr_beta: float = 1e-2
    lr_phi: float = 1e-2
    lr_theta: float = 1e-3
    lr_p: float = 1e-3
    rest: str = "T"
    # the calibration protocol has the subject hold the rest pose, so the
    # nuisance pose is penalized toward it; with one frame a free pose can
    # absorb shape error entirely
    lambda_rest: float = 25.0
    fallback_height: float = FALLBACK_HEIGHT_M
    fallback_weight: float = FALLBACK_WEIGHT_KG


@dataclass
class CalibrationResult:
    beta: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    p: np.ndarray
    history: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else float("nan")


def reprojection_l1(model: BodyModel, cam: CameraIntrinsics, kp: Keypoints2D,
                    beta, theta, phi, p) -> torch.Tensor:
    """Confidence-weighted L1 distance between projected joints and keypoints."""
    joints = model.joints3d(beta, theta, phi, p)
    uv = project(cam, joints[list(model.keypoint_joints)])
    target = torch.as_tensor(kp.uv)
    conf = torch.as_tensor(kp.conf)
    return (conf[:, None] * (uv - target).abs()).sum()


def shape_regularizer(model: BodyModel, beta, height_m: float | None, weight_kg: float | None,
                      cfg: CalibrationConfig | None = None) -> torch.Tensor:
    """lambda_b ||beta||^2 + lambda_h |H(beta) - h| + lambda_w |W(beta) - w|."""
    cfg = cfg or CalibrationConfig()
    measured = height_m is not None and weight_kg is not None
    lam_b, lam_h, lam_w = MEASURED_WEIGHTS if measured else FALLBACK_WEIGHTS
    h = height_m if height_m is not None else cfg.fallback_height
    w = weight_kg if weight_kg is not None else cfg.fallback_weight
    beta_t = beta if isinstance(beta, torch.Tensor) else torch.as_tensor(np.asarray(beta, dtype=np.float64))
    return (
        lam_b * (beta_t * beta_t).sum()
        + lam_h * (model.height(beta_t) - h).abs()
        + lam_w * (model.weight(beta_t) - w).abs()
    )


def _initial_pelvis(
    model: BodyModel,
    cam: CameraIntrinsics,
    kp: Keypoints2D,
    height_m: float | None = None,
) -> np.ndarray:
    """Backprojected pelvis pixel at an estimated depth.

    The base depth comes from the template shoulder width; when the height
    is measured, the vertical keypoint extent gives a much tighter estimate
    (the template shoulders can be far from the subject's), so it wins.
    """
    with torch.no_grad():
        sw = float(model.shoulder_width(np.zeros(model.config.num_betas)))
    z = init_pelvis_depth(cam, kp, sw, model.shoulder_joint_pair)
    ok = kp.conf > 0.0
    if height_m is not None:
        with torch.no_grad():
            j0 = model.shaped_joints(np.zeros(model.config.num_betas)).numpy()
            h0 = float(model.height(np.zeros(model.config.num_betas)))
        kp_j = list(model.keypoint_joints)
        extent = (j0[kp_j, 1].max() - j0[kp_j, 1].min()) * (height_m / h0)
        px = kp.uv[ok, 1].max() - kp.uv[ok, 1].min()
        if px > 1.0:
            z = cam.f * extent / px
    anchor = kp.uv[0] if kp.conf[0] > 0.0 else kp.uv[ok].mean(axis=0)
    return backproject_pixel(cam, anchor, z)


def _linear_shape_presolve(
    model: BodyModel,
    cam: CameraIntrinsics,
    kp: Keypoints2D,
    height_m: float | None,
    p0: np.ndarray,
    beta0: np.ndarray,
):
    """Closed-form (beta, p, pitch) estimate from a rest-pose frame.

    With theta held at the rest pose and pitch fixed, the exact projection
    constraint f (X_x + p_x) = (u - cx)(X_z + p_z) is linear in beta and p
    jointly, because rest joints are linear in beta. A small grid over the
    pelvis pitch picks the rotation; the optimizer then only polishes.
    """
    B = model.config.num_betas
    kp_j = list(model.keypoint_joints)
    with torch.no_grad():
        Jreg = model.joint_regressor.numpy()
        T = model.template.numpy()
        basis = model.shape_basis.numpy()
        h0 = float(model.height(np.zeros(B)))
        lm = model.named_landmarks
    D = (Jreg[kp_j] - Jreg[0]) @ T                      # (17, 3)
    C = np.einsum("kv,bvi->kbi", Jreg[kp_j] - Jreg[0], basis)  # (17, B, 3)

    # height is linear in beta as well
    hrow = basis[:, lm["head_top"], 1] - 0.5 * (
        basis[:, lm["foot_bottom_l"], 1] + basis[:, lm["foot_bottom_r"], 1]
    )
    ridge = 0.5

    def solve(pitch: float):
        ca, sa = np.cos(pitch), np.sin(pitch)
        R = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
        Dp = D @ R.T
        Cp = np.einsum("kbi,ji->kbj", C, R)
        rows, rhs = [], []
        for i in range(len(kp_j)):
            c = kp.conf[i]
            if c <= 0.0:
                continue
            u, v = kp.uv[i]
            du, dv = u - cam.cx, v - cam.cy
            ru = np.concatenate([cam.f * Cp[i, :, 0] - du * Cp[i, :, 2], [cam.f, 0.0, -du]])
            rv = np.concatenate([cam.f * Cp[i, :, 1] - dv * Cp[i, :, 2], [0.0, cam.f, -dv]])
            rows += [c * ru, c * rv]
            rhs += [c * (-cam.f * Dp[i, 0] + du * Dp[i, 2]), c * (-cam.f * Dp[i, 1] + dv * Dp[i, 2])]
        if height_m is not None:
            wh = 2.0 * cam.f
            rows.append(wh * np.concatenate([hrow, np.zeros(3)]))
            rhs.append(wh * (height_m - h0))
        for b in range(B):
            e = np.zeros(B + 3)
            e[b] = ridge
            rows.append(e)
            rhs.append(ridge * beta0[b])
        A = np.stack(rows)
        y = np.asarray(rhs)
        x, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = A[: -(B)] @ x - y[: -(B)]
        return x, float(resid @ resid)

    best_x, best_r, best_a = None, np.inf, 0.0
    for pitch in np.linspace(-0.22, 0.22, 23):
        x, r = solve(float(pitch))
        if r < best_r:
            best_x, best_r, best_a = x, r, float(pitch)
    beta = best_x[:B]
    p = best_x[B:]
    if p[2] < 0.5:  # implausible solve, fall back to the coarse init
        return beta0, p0, 0.0
    return beta, p, best_a


def calibrate(
    model: BodyModel,
    cam: CameraIntrinsics,
    kp: Keypoints2D,
    height_m: float | None = None,
    weight_kg: float | None = None,
    cfg: CalibrationConfig | None = None,
    beta_init: np.ndarray | None = None,
    phi_init: np.ndarray | None = None,
    p_init: np.ndarray | None = None,
) -> CalibrationResult:
    """Recover shape (and the nuisance rest pose) from one calibration frame.

    The pelvis starts at the keypoint-pelvis backprojection of the
    shoulder-width depth estimate; orientation starts at zero roll/yaw.
    The *_init arguments are exposed for oracle runs that start at the truth.
    """
    cfg = cfg or CalibrationConfig()
    if len(kp.uv) != len(model.keypoint_joints):
        raise ValueError("keypoints do not match the model keypoint set")
    if (kp.conf > 0.0).sum() < 6:
        raise ValueError("too few confident keypoints for calibration")

    B = model.config.num_betas
    p0 = _initial_pelvis(model, cam, kp, height_m)
    phi0 = np.zeros(3)
    if beta_init is None:
        beta0 = np.zeros(B)
        if height_m is not None:
            # start on the uniform-scale axis at the measured stature
            with torch.no_grad():
                beta0 = model.scale_beta(height_m / float(model.height(np.zeros(B))))
        beta0, p0, pitch = _linear_shape_presolve(model, cam, kp, height_m, p0, beta0)
        phi0 = np.array([pitch, 0.0, 0.0])
    else:
        beta0 = np.asarray(beta_init, dtype=np.float64)
    if phi_init is not None:
        phi0 = np.asarray(phi_init, dtype=np.float64)
    if p_init is not None:
        p0 = np.asarray(p_init, dtype=np.float64)
    rest = model.rest_pose(cfg.rest)
    x0 = ParamVector.from_groups(
        {
            "beta": beta0,
            "theta": rest,
            "phi": phi0,
            "p": p0,
        }
    )
    rest_t = torch.as_tensor(rest.reshape(-1))

    def objective(params: dict[str, torch.Tensor]) -> torch.Tensor:
        rep = reprojection_l1(
            model, cam, kp, params["beta"],
            params["theta"].reshape(NUM_JOINTS - 1, 3), params["phi"], params["p"],
        )
        hold_still = cfg.lambda_rest * ((params["theta"] - rest_t) ** 2).sum()
        return rep + hold_still + shape_regularizer(model, params["beta"], height_m, weight_kg, cfg)

    opt_cfg = OptimizerConfig(
        lr={"beta": cfg.lr_beta, "theta": cfg.lr_theta, "phi": cfg.lr_phi, "p": cfg.lr_p},
        iterations=cfg.iterations,
    )
    res = optimize(objective, x0, opt_cfg)
    return CalibrationResult(
        beta=res.x.group("beta").copy(),
        theta=res.x.group("theta").reshape(NUM_JOINTS - 1, 3).copy(),
        phi=res.x.group("phi").copy(),
        p=res.x.group("p").copy(),
        history=res.history,
    )


def shape_error(model: BodyModel, beta_a, beta_b) -> dict[str, float]:
    """Pelvis-aligned rest-pose discrepancies between two shapes, in mm."""
    with torch.no_grad():
        va = model.shaped_vertices(beta_a).numpy()
        vb = model.shaped_vertices(beta_b).numpy()
        ja = model.shaped_joints(beta_a).numpy()
        jb = model.shaped_joints(beta_b).numpy()
    va, ja = va - ja[0], ja - ja[0]
    vb, jb = vb - jb[0], jb - jb[0]
    vd = np.linalg.norm(va - vb, axis=1) * 1000.0
    jd = np.linalg.norm(ja - jb, axis=1) * 1000.0
    return {
        "vertex_mean_mm": float(vd.mean()),
        "vertex_max_mm": float(vd.max()),
        "joint_mean_mm": float(jd.mean()),
        "joint_max_mm": float(jd.max()),
    }
