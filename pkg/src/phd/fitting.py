"""Prior-guided per-frame body fitting from 2D keypoints.

The objective combines a confidence-weighted L1 reprojection term with two
distillation terms measured against a point cloud sampled from the flow
prior: a pelvis-aligned point distance and a parameter distance to the pose
the point fitter reads off the sampled cloud. Every few iterations the
current estimate's own points are re-noised to a mid schedule level and
re-denoised, refreshing the guidance cloud; sampling and parameter updates
alternate strictly, so a resample never moves the parameters within the
iteration it happens.
"""

from __future__ import annotations

import json
import time
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .body_model import NUM_JOINTS, BodyModel, PoseState
from .camera import (CameraIntrinsics, Keypoints2D, ProjectionError,
                     backproject_pixel, init_pelvis_position)
from .numerics import DivergenceError, SingularSystemError
from .point_fitter import PoseFit, fit_pose
from .prior import ConditionTokens, FlowPrior, condition_features, noise_forward, sample
from .shapify import reprojection_l1

__all__ = [
    "FitConfig", "FrameFit", "FitResult",
    "loss_data", "loss_point", "loss_angle",
    "fit_frame", "fit_sequence", "save_poses", "load_poses",
]

INIT_MODES = ("prior-sample", "external", "rest-pose")


@dataclass
class FitConfig:
    iterations: int = 100
    lr_theta: float = 3e-3
    lr_phi_p: float = 1e-3
    lambda_data: float = 1.0
    lambda_prior: float = 100.0
    lambda_p: float = 0.1
    lambda_phi: float = 0.1
    lambda_theta: float = 1.0
    resample_every: int = 10     # guidance refresh period, iterations
    resample_level: float = 0.75  # noise level s the estimate is pushed back to
    sampler_steps: int = 5
    init: str = "prior-sample"   # or "external" / "rest-pose"
    warm_start: bool = False     # sequences only; per-frame independence when off
    seed: int = 0
    fitter_steps: int = 50       # refinement budget inside the pose readout
    min_confidence: float = 0.1  # below this on every keypoint, frame is unfittable
    keep_clouds: bool = False    # snapshot each guidance cloud in the result
    snapshot_every: int = 0      # 0 = off; >0 also snapshots (theta, phi, p)

    def __post_init__(self):
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.resample_every < 1:
            raise ValueError("resample_every must be >= 1")
        for name in ("lambda_data", "lambda_prior", "lambda_p", "lambda_phi", "lambda_theta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class FrameFit:
    frame_id: str
    state: PoseState
    ok: bool
    trace: list[dict] = field(default_factory=list)
    clouds: list[np.ndarray] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    note: str = ""


@dataclass
class FitResult:
    entries: list[FrameFit]

    def states(self) -> dict[str, PoseState]:
        return {e.frame_id: e.state for e in self.entries if e.ok}

    def save(self, path) -> None:
        save_poses(path, [(e.frame_id, e.state) for e in self.entries if e.ok])


# ------------------------------------------------------------------ loss terms

def _state_tensors(state) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if isinstance(state, PoseState):
        return (torch.as_tensor(state.theta), torch.as_tensor(state.phi),
                torch.as_tensor(state.p))
    theta, phi, p = state
    return torch.as_tensor(theta), torch.as_tensor(phi), torch.as_tensor(p)


def _soft_norm(diff: torch.Tensor) -> torch.Tensor:
    # plain L2 norm; the epsilon only keeps the gradient finite at zero
    return torch.sqrt((diff * diff).sum() + 1e-24)


def loss_data(model: BodyModel, cam: CameraIntrinsics, state, beta_star,
              kp: Keypoints2D) -> torch.Tensor:
    """Confidence-weighted L1 reprojection error of the keypoint joints."""
    conf = np.asarray(kp.conf, dtype=np.float64)
    if not (conf > 0).any():
        raise ValueError("all keypoint confidences are zero")
    theta, phi, p = _state_tensors(state)
    return reprojection_l1(model, cam, kp, beta_star, theta, phi, p)


def loss_point(cloud_sample, model: BodyModel, state, beta_star,
               cfg: FitConfig | None = None) -> torch.Tensor:
    """Pelvis-aligned L2 distance between the sampled and the posed cloud."""
    cfg = cfg or FitConfig()
    theta, phi, p = _state_tensors(state)
    pts = model.extract_points(beta_star, theta, phi, p)
    pts = pts - pts[model.num_surface]
    target = torch.as_tensor(np.asarray(cloud_sample, dtype=np.float64))
    target = target - target[model.num_surface]
    return cfg.lambda_p * _soft_norm(pts - target)


def loss_angle(cloud_sample, model: BodyModel, state, beta_star,
               cfg: FitConfig | None = None, fitted: PoseFit | None = None) -> torch.Tensor:
    """Parameter distance to the pose read off the sampled cloud.

    The readout is a constant for the optimizer: no gradient flows through
    the point fitter. A fitter failure skips the term for this iteration.
    """
    cfg = cfg or FitConfig()
    theta, phi, p = _state_tensors(state)
    if cfg.lambda_phi == 0 and cfg.lambda_theta == 0:
        return torch.zeros((), dtype=torch.float64)
    if fitted is None:
        try:
            fitted = fit_pose(model, cloud_sample, beta_star, refine_steps=cfg.fitter_steps)
        except Exception as exc:  # noqa: BLE001 - degraded guidance, not fatal
            warnings.warn(f"pose readout failed ({exc}); skipping angle term", stacklevel=2)
            return torch.zeros((), dtype=torch.float64)
    phi_g = torch.as_tensor(fitted.phi)
    theta_g = torch.as_tensor(fitted.theta)
    return (cfg.lambda_phi * _soft_norm(phi_g - phi)
            + cfg.lambda_theta * _soft_norm(theta_g - theta))


# ------------------------------------------------------------------ fitting

def _frame_seed(base: int, frame_id: str) -> int:
    return (int(base) * 1000003 + zlib.crc32(frame_id.encode("utf-8"))) % (2**63)


def _initial_pose(model, prior, cam, kp, beta_star, cfg, init, gen_seed) -> PoseState:
    if cfg.init == "external" or (init is not None and cfg.init != "prior-sample"):
        if init is None:
            raise ValueError("init mode 'external' requires an initial PoseState")
        return PoseState(theta=init.theta.copy(), phi=init.phi.copy(), p=init.p.copy())
    if init is not None:
        return PoseState(theta=init.theta.copy(), phi=init.phi.copy(), p=init.p.copy())
    if cfg.init == "rest-pose" or prior is None:  # prior-free runs fall back to rest
        return PoseState.rest()
    cond = ConditionTokens(kp_feats=condition_features(cam, kp),
                           beta=np.asarray(beta_star, dtype=np.float64))
    cloud = sample(prior, cond, t_steps=cfg.sampler_steps, seed=gen_seed)
    try:
        fit = fit_pose(model, cloud, beta_star, refine_steps=cfg.fitter_steps)
    except Exception as exc:  # noqa: BLE001 - degraded init, not fatal
        warnings.warn(f"initial pose readout failed ({exc}); starting from rest",
                      stacklevel=2)
        return PoseState.rest()
    return PoseState(theta=fit.theta, phi=fit.phi, p=np.zeros(3))


def fit_frame(
    model: BodyModel,
    prior: FlowPrior | None,
    cam: CameraIntrinsics,
    kp: Keypoints2D,
    beta_star,
    cfg: FitConfig | None = None,
    init: PoseState | None = None,
    frame_id: str = "00000/0000",
) -> FrameFit:
    """Fit (theta, phi, p) of one frame to its 2D keypoints.

    With lambda_prior = 0 this is plain 2D reprojection fitting under the
    identical schedule; otherwise the flow prior supplies a guidance cloud
    that is refreshed from the current estimate every resample period.
    """
    cfg = cfg or FitConfig()
    t_start = time.perf_counter()
    beta_arr = np.asarray(beta_star, dtype=np.float64).reshape(-1)
    conf = np.asarray(kp.conf, dtype=np.float64)
    if (conf < cfg.min_confidence).all():
        return FrameFit(frame_id=frame_id, state=PoseState.rest(), ok=False,
                        note="all keypoint confidences below threshold")

    use_prior = cfg.lambda_prior > 0
    if use_prior and prior is None:
        raise ValueError("lambda_prior > 0 requires a prior")
    seed = _frame_seed(cfg.seed, frame_id)
    start = _initial_pose(model, prior, cam, kp, beta_arr, cfg, init, seed)

    # pelvis from the keypoint lateration around the initial pose; a bad
    # initial pose can laterate outside the visible frustum, so the depth is
    # clamped and a failed solve falls back to the mean keypoint ray
    with torch.no_grad():
        j0 = model.joints3d(beta_arr, start.theta, start.phi, np.zeros(3)).numpy()
    try:
        p0 = init_pelvis_position(cam, kp, (j0 - j0[0])[list(model.keypoint_joints)])
        if not 0.5 <= p0[2] <= 50.0:  # untrustworthy solve, e.g. off a bad init pose
            raise ProjectionError(f"laterated depth {p0[2]:.2f}m is implausible")
    except (ProjectionError, SingularSystemError):
        mean_uv = (conf[:, None] * kp.uv).sum(0) / conf.sum()
        p0 = backproject_pixel(cam, mean_uv, 3.0)

    theta = torch.as_tensor(start.theta.copy()).requires_grad_(True)
    phi = torch.as_tensor(start.phi.copy()).requires_grad_(True)
    p = torch.as_tensor(np.asarray(p0, dtype=np.float64)).requires_grad_(True)
    opt = torch.optim.Adam(
        [{"params": [theta], "lr": cfg.lr_theta},
         {"params": [phi, p], "lr": cfg.lr_phi_p}]
    )
    cond = None
    if use_prior:
        cond = ConditionTokens(kp_feats=condition_features(cam, kp), beta=beta_arr)
    gen = torch.Generator().manual_seed(seed)

    entry = FrameFit(frame_id=frame_id, state=start, ok=True)
    guidance_cloud: np.ndarray | None = None
    guidance_fit: PoseFit | None = None

    for k in range(cfg.iterations):
        if use_prior and k % cfg.resample_every == 0:
            with torch.no_grad():
                pts = model.extract_points(beta_arr, theta, phi, torch.zeros(3))
                pts = pts - pts[model.num_surface]
                x_norm = (pts / prior.norm.scale).to(torch.float64)
                eps = torch.randn(x_norm.shape, generator=gen, dtype=torch.float64)
                x_s = noise_forward(x_norm, eps, cfg.resample_level)
            guidance_cloud = sample(prior, cond, t_steps=cfg.sampler_steps,
                                    x_init=x_s, s_init=cfg.resample_level)
            guidance_fit = None
            try:
                current = PoseState(theta=theta.detach().numpy().copy(),
                                    phi=phi.detach().numpy().copy(), p=np.zeros(3))
                guidance_fit = fit_pose(model, guidance_cloud, beta_arr, init=current,
                                        refine_steps=cfg.fitter_steps)
            except Exception as exc:  # noqa: BLE001
                warnings.warn(f"pose readout failed ({exc}); angle term off this cycle",
                              stacklevel=2)
            if cfg.keep_clouds:
                entry.clouds.append(guidance_cloud.copy())

        try:
            l_data = loss_data(model, cam, (theta, phi, p), beta_arr, kp)
        except ProjectionError as exc:  # estimate left the camera frustum
            raise DivergenceError(k, float("inf")) from exc
        if use_prior:
            l_point = loss_point(guidance_cloud, model, (theta, phi, p), beta_arr, cfg)
            l_angle = loss_angle(guidance_cloud, model, (theta, phi, p), beta_arr, cfg,
                                 fitted=guidance_fit) if guidance_fit is not None \
                else torch.zeros((), dtype=torch.float64)
        else:
            l_point = torch.zeros((), dtype=torch.float64)
            l_angle = torch.zeros((), dtype=torch.float64)
        total = cfg.lambda_data * l_data + cfg.lambda_prior * (l_point + l_angle)
        if not torch.isfinite(total):
            raise DivergenceError(k, float(total.detach()))

        opt.zero_grad()
        total.backward()
        opt.step()

        entry.trace.append({
            "iter": k,
            "total": float(total.detach()),
            "data": float(l_data.detach()),
            "point": float(l_point.detach()),
            "angle": float(l_angle.detach()),
        })
        if cfg.snapshot_every and k % cfg.snapshot_every == 0:
            entry.snapshots.append({
                "iter": k,
                "theta": theta.detach().numpy().copy(),
                "phi": phi.detach().numpy().copy(),
                "p": p.detach().numpy().copy(),
                "cloud": None if guidance_cloud is None else guidance_cloud.copy(),
            })

    entry.state = PoseState(theta=theta.detach().numpy(), phi=phi.detach().numpy(),
                            p=p.detach().numpy())
    entry.seconds = time.perf_counter() - t_start
    return entry


def fit_sequence(
    model: BodyModel,
    prior: FlowPrior | None,
    frames,
    beta_star,
    cfg: FitConfig | None = None,
    cam: CameraIntrinsics | None = None,
    inits: dict[str, PoseState] | None = None,
) -> FitResult:
    """Fit each frame independently (warm starting is opt-in via cfg)."""
    cfg = cfg or FitConfig()
    cam = cam or CameraIntrinsics()
    entries: list[FrameFit] = []
    previous: PoseState | None = None
    for rec in frames:
        init = (inits or {}).get(rec.frame_id)
        if init is None and cfg.warm_start and previous is not None:
            init = previous
        try:
            entry = fit_frame(model, prior, cam, rec.keypoints(), beta_star, cfg,
                              init=init, frame_id=rec.frame_id)
        except DivergenceError as exc:
            entry = FrameFit(frame_id=rec.frame_id, state=PoseState.rest(), ok=False,
                             note=f"diverged at iteration {exc.iteration}")
        entries.append(entry)
        if entry.ok:
            previous = entry.state
    return FitResult(entries=entries)


# ---------------------------------------------------------------- pose files

def save_poses(path, entries) -> None:
    """JSON-lines pose file: {frame_id, theta: 69, phi: 3, p: 3} per row."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for frame_id, state in entries:
            row = {
                "frame_id": frame_id,
                "theta": [float(v) for v in np.asarray(state.theta).reshape(-1)],
                "phi": [float(v) for v in np.asarray(state.phi).reshape(-1)],
                "p": [float(v) for v in np.asarray(state.p).reshape(-1)],
            }
            fh.write(json.dumps(row) + "\n")


def load_poses(path) -> dict[str, PoseState]:
    """Read a pose file back into PoseStates keyed by frame id."""
    out: dict[str, PoseState] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            theta = np.asarray(row["theta"], dtype=np.float64)
            if theta.size != (NUM_JOINTS - 1) * 3:
                raise ValueError(f"pose row for {row.get('frame_id')!r} has "
                                 f"{theta.size} theta values")
            out[str(row["frame_id"])] = PoseState(
                theta=theta.reshape(NUM_JOINTS - 1, 3),
                phi=np.asarray(row["phi"], dtype=np.float64),
                p=np.asarray(row["p"], dtype=np.float64),
            )
    return out
