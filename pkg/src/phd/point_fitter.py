"""Recover pose parameters from a body point cloud with known shape.

Two-phase solve. Phase one walks the kinematic tree root to leaves and
estimates each joint's global rotation in closed form (weighted orthogonal
Procrustes over its descendant point group). Joint translations are read
directly off the cloud's joint block, so a skin point blended between two
bones can be un-mixed exactly once the partner bone's rotation is known;
a second sweep resolves points whose partner is solved later than their
own bone. Phase two refines (phi, theta) with a monotone backtracking
gradient descent on the pelvis-aligned point residual.

The pelvis position is never estimated here: the input cloud is centered
on its own pelvis row, which makes the result invariant to translating
the cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .body_model import NUM_JOINTS, PARENTS, BodyModel, PointCloud, PoseState
from .rotations import kabsch_rotation, minimal_rotation, rotation_to_axis_angle

__all__ = ["PoseFit", "fit_pose", "ik_joints_only"]

_RANK_TOL = 1e-8      # rest-offset collinearity threshold (scale-relative)
_MIN_STEP = 1e-12     # refinement terminates once backtracking reaches this
_GROW = 1.5


@dataclass
class PoseFit:
    """Pose recovered from a point cloud; positions are not estimated."""

    phi: np.ndarray            # (3,) root orientation, axis-angle
    theta: np.ndarray          # (23, 3) joint rotations, axis-angle
    residual_rmse: float       # meters, over the retained rows
    trace: list[float] = field(default_factory=list)  # RMSE per refinement step

    def pose(self, p=(0.0, 0.0, 0.0)) -> PoseState:
        return PoseState(theta=self.theta, phi=self.phi, p=np.asarray(p, dtype=np.float64))


# ----------------------------------------------------------------- chain data

def _chain_data(model: BodyModel):
    """Children lists and per-point driver pairs, cached on the model."""
    cache = getattr(model, "_fitter_chain", None)
    if cache is not None:
        return cache
    children: list[list[int]] = [[] for _ in range(NUM_JOINTS)]
    for j, par in enumerate(PARENTS):
        if par >= 0:
            children[par].append(j)
    sel = model._select_idx.numpy()
    weights = model.skin_weights.numpy()[sel]  # (S + L, 24)
    drivers: list[list[tuple[int, float]]] = []
    for row in weights:
        nz = np.nonzero(row > 0.0)[0]
        order = nz[np.argsort(-row[nz])]
        drivers.append([(int(k), float(row[k])) for k in order])
    cache = (children, drivers)
    model._fitter_chain = cache
    return cache


def _cloud_row(model: BodyModel, sel_i: int) -> int:
    """Row of extracted vertex sel_i in the S + joints + landmarks layout."""
    return sel_i if sel_i < model.num_surface else sel_i + NUM_JOINTS


def _normalize_mask(model: BodyModel, mask) -> np.ndarray:
    keep = np.ones(model.num_points, dtype=bool)
    if mask is not None:
        m = np.asarray(mask)
        if m.dtype == bool:
            if m.shape != (model.num_points,):
                raise ValueError(f"boolean mask must have shape ({model.num_points},)")
            keep = m.copy()
        else:
            keep = np.zeros(model.num_points, dtype=bool)
            keep[m.astype(np.int64)] = True
    keep[model.num_surface : model.num_surface + NUM_JOINTS] = True  # tree joints stay
    return keep


# ------------------------------------------------------------ closed-form IK

def _solve_chain(
    model: BodyModel,
    rest_pts: np.ndarray,     # (S + L, 3) shaped rest positions of extracted vertices
    rest_joints: np.ndarray,  # (24, 3) shaped rest joints
    obs: np.ndarray,          # (num_points, 3) pelvis-centered observed cloud
    keep: np.ndarray,         # (num_points,) retained rows
    passes: int,
) -> tuple[np.ndarray, np.ndarray]:
    children, drivers = _chain_data(model)
    j0 = model.num_surface
    obs_joints = obs[j0 : j0 + NUM_JOINTS]

    # For each joint, the skin points it drives along with the partner bone
    # whose contribution must be subtracted before the point turns rigid.
    per_joint: list[list[tuple[int, int, float, float]]] = [[] for _ in range(NUM_JOINTS)]
    for i, ds in enumerate(drivers):
        if not keep[_cloud_row(model, i)] or len(ds) < 2:
            continue
        (a, wa), (b, wb) = ds[0], ds[1]
        per_joint[a].append((i, b, wa, wb))
        per_joint[b].append((i, a, wb, wa))

    rot: list[np.ndarray | None] = [None] * NUM_JOINTS
    for _ in range(max(1, passes)):
        for j in range(NUM_JOINTS):
            src, dst, wts = [], [], []
            for c in children[j]:
                src.append(rest_joints[c] - rest_joints[j])
                dst.append(obs_joints[c] - obs_joints[j])
                wts.append(1.0)
            for i, other, w_self, w_other in per_joint[j]:
                partner_rot = rot[other]
                if partner_rot is None:
                    continue
                row = obs[_cloud_row(model, i)]
                partner = partner_rot @ (rest_pts[i] - rest_joints[other]) + obs_joints[other]
                src.append(rest_pts[i] - rest_joints[j])
                dst.append((row - w_other * partner) / w_self - obs_joints[j])
                wts.append(w_self * w_self)  # un-mixing amplifies noise by 1/w
            parent_rot = np.eye(3) if j == 0 else rot[PARENTS[j]]
            if not src:
                rot[j] = parent_rot.copy()
                continue
            s = np.asarray(src)
            d = np.asarray(dst)
            w = np.asarray(wts)
            u_mat, sv, vt = np.linalg.svd(s * np.sqrt(w)[:, None], full_matrices=False)
            degenerate = sv[0] < 1e-12 or len(sv) < 2 or sv[1] <= _RANK_TOL * sv[0]
            if degenerate:
                # Single rest direction: align it, leaving zero local twist.
                axis = vt[0]
                image = ((w * (s @ axis))[:, None] * d).sum(axis=0)
                rot[j] = parent_rot @ minimal_rotation(axis, parent_rot.T @ image)
            else:
                rot[j] = kabsch_rotation(s, d, w, center=False)

    phi = rotation_to_axis_angle(rot[0])
    theta = np.zeros((NUM_JOINTS - 1, 3))
    for j in range(1, NUM_JOINTS):
        theta[j - 1] = rotation_to_axis_angle(rot[PARENTS[j]].T @ rot[j])
    return phi, theta


# -------------------------------------------------------------- refinement

def _residual(model: BodyModel, beta_t, theta_t, phi_t, idx_t, target_t) -> torch.Tensor:
    pts = model.extract_points(beta_t, theta_t, phi_t, torch.zeros(3, dtype=torch.float64))
    diff = pts[idx_t] - target_t
    return (diff * diff).sum(-1).mean()


def _refine(
    model: BodyModel,
    beta: np.ndarray,
    phi0: np.ndarray,
    theta0: np.ndarray,
    keep: np.ndarray,
    target: np.ndarray,
    steps: int,
    step0: float = 0.05,
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    beta_t = torch.as_tensor(np.asarray(beta, dtype=np.float64))
    idx_t = torch.as_tensor(np.nonzero(keep)[0])
    target_t = torch.as_tensor(target[keep])

    x = torch.as_tensor(np.concatenate([phi0, theta0.reshape(-1)])).clone()

    def objective(xv: torch.Tensor) -> torch.Tensor:
        return _residual(model, beta_t, xv[3:].reshape(NUM_JOINTS - 1, 3), xv[:3], idx_t, target_t)

    with torch.no_grad():
        loss = float(objective(x))
    trace = [float(np.sqrt(loss))]
    step = step0
    for _ in range(max(0, steps)):
        leaf = x.clone().requires_grad_(True)
        value = objective(leaf)
        value.backward()
        grad = leaf.grad
        gnorm = float(torch.linalg.norm(grad))
        if not np.isfinite(gnorm) or gnorm < 1e-12:
            break
        direction = grad / gnorm
        accepted = False
        with torch.no_grad():
            while step >= _MIN_STEP:
                cand = x - step * direction
                cand_loss = float(objective(cand))
                if cand_loss < loss:
                    x, loss, accepted = cand, cand_loss, True
                    break
                step *= 0.5
        if not accepted:
            break
        trace.append(float(np.sqrt(loss)))
        step = min(step * _GROW, 1.0)
    phi = x[:3].numpy().copy()
    theta = x[3:].reshape(NUM_JOINTS - 1, 3).numpy().copy()
    return phi, theta, float(np.sqrt(loss)), trace


# ------------------------------------------------------------------ frontend

def fit_pose(
    model: BodyModel,
    cloud,
    beta,
    init: PoseState | None = None,
    mask=None,
    refine_steps: int = 50,
    passes: int = 2,
) -> PoseFit:
    """Fit (phi, theta) so the model's point cloud matches ``cloud``.

    ``cloud`` is a PointCloud or (num_points, 3) array in any frame; only
    its shape relative to its own pelvis row matters. ``mask`` retains a
    subset of rows (boolean or indices); tree joints are always kept.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.shape != (model.num_points, 3):
        raise ValueError(f"cloud must have shape ({model.num_points}, 3), got {pts.shape}")
    keep = _normalize_mask(model, mask)
    obs = pts - pts[model.num_surface]

    beta_arr = np.asarray(beta, dtype=np.float64).reshape(-1)
    with torch.no_grad():
        rest_v = model.shaped_vertices(beta_arr)
        rest_joints = (model.joint_regressor @ rest_v).numpy()
        rest_pts = rest_v[model._select_idx].numpy()

    phi, theta = _solve_chain(model, rest_pts, rest_joints, obs, keep, passes)

    if init is not None:
        beta_t = torch.as_tensor(beta_arr)
        idx_t = torch.as_tensor(np.nonzero(keep)[0])
        target_t = torch.as_tensor(obs[keep])
        with torch.no_grad():
            closed = float(_residual(model, beta_t, torch.as_tensor(theta),
                                     torch.as_tensor(phi), idx_t, target_t))
            warm = float(_residual(model, beta_t, torch.as_tensor(init.theta),
                                   torch.as_tensor(init.phi), idx_t, target_t))
        if warm < closed:
            phi, theta = init.phi.copy(), init.theta.copy()

    phi, theta, rmse, trace = _refine(model, beta_arr, phi, theta, keep, obs, refine_steps)
    return PoseFit(phi=phi, theta=theta, residual_rmse=rmse, trace=trace)


def ik_joints_only(
    model: BodyModel,
    joints,
    beta,
    init: PoseState | None = None,
    refine_steps: int = 50,
) -> PoseFit:
    """Fit (phi, theta) from the 24 tree joints alone.

    Bones observed only through a single child direction keep zero local
    twist, which is exactly what the full-cloud fitter improves on.
    """
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape != (NUM_JOINTS, 3):
        raise ValueError(f"joints must have shape ({NUM_JOINTS}, 3), got {joints.shape}")
    obs = np.zeros((model.num_points, 3))
    keep = np.zeros(model.num_points, dtype=bool)
    sl = slice(model.num_surface, model.num_surface + NUM_JOINTS)
    obs[sl] = joints - joints[0]
    keep[sl] = True

    beta_arr = np.asarray(beta, dtype=np.float64).reshape(-1)
    with torch.no_grad():
        rest_v = model.shaped_vertices(beta_arr)
        rest_joints = (model.joint_regressor @ rest_v).numpy()
        rest_pts = rest_v[model._select_idx].numpy()

    # keep[] is False on every surface row, so the chain solve sees joints only
    phi, theta = _solve_chain(model, rest_pts, rest_joints, obs, keep, passes=1)

    if init is not None:
        beta_t = torch.as_tensor(beta_arr)
        idx_t = torch.as_tensor(np.nonzero(keep)[0])
        target_t = torch.as_tensor(obs[keep])
        with torch.no_grad():
            closed = float(_residual(model, beta_t, torch.as_tensor(theta),
                                     torch.as_tensor(phi), idx_t, target_t))
            warm = float(_residual(model, beta_t, torch.as_tensor(init.theta),
                                   torch.as_tensor(init.phi), idx_t, target_t))
        if warm < closed:
            phi, theta = init.phi.copy(), init.theta.copy()

    phi, theta, rmse, trace = _refine(model, beta_arr, phi, theta, keep, obs, refine_steps)
    return PoseFit(phi=phi, theta=theta, residual_rmse=rmse, trace=trace)
