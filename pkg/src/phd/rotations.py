"""Rotation helpers shared by the body model, the fitters, and the metrics.

Axis-angle vectors are plain 3-vectors whose norm is the rotation angle in
radians. Everything that has to sit inside an optimization graph is written
in torch; the closed-form fitter pieces that never need gradients use numpy.
"""
from __future__ import annotations

import numpy as np
import torch


def rodrigues(aa: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Differentiable everywhere including the identity: a Taylor branch covers
    small angles, and the sqrt input is sanitized so the unused branch cannot
    poison gradients with NaNs.
    """
    if aa.shape[-1] != 3:
        raise ValueError(f"axis-angle vectors must have last dim 3, got {tuple(aa.shape)}")
    sq = (aa * aa).sum(-1)
    small = sq < 1e-14
    safe_sq = torch.where(small, torch.ones_like(sq), sq)
    angle = torch.sqrt(safe_sq)
    sin_term = torch.where(small, 1.0 - sq / 6.0, torch.sin(angle) / angle)
    cos_term = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(angle)) / safe_sq)

    zeros = torch.zeros_like(sq)
    kx, ky, kz = aa[..., 0], aa[..., 1], aa[..., 2]
    K = torch.stack(
        [
            torch.stack([zeros, -kz, ky], dim=-1),
            torch.stack([kz, zeros, -kx], dim=-1),
            torch.stack([-ky, kx, zeros], dim=-1),
        ],
        dim=-2,
    )
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(K.shape)
    return eye + sin_term[..., None, None] * K + cos_term[..., None, None] * (K @ K)


def rodrigues_np(aa: np.ndarray) -> np.ndarray:
    """Numpy twin of :func:`rodrigues` for a single 3-vector."""
    return rodrigues(torch.as_tensor(np.asarray(aa, dtype=np.float64))).numpy()


def rotation_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Matrix log of a single rotation, angle in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(tr))
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-8:
        return skew / 2.0
    if np.pi - angle < 1e-6:
        # near pi the skew part vanishes; recover the axis from R + I
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        if axis[k] < 1e-12:
            return np.array([np.pi, 0.0, 0.0])
        axis = B[:, k] / axis[k]
        axis = axis / np.linalg.norm(axis)
        return angle * axis
    return angle * skew / (2.0 * np.sin(angle))


def kabsch_rotation(
    src: np.ndarray,
    dst: np.ndarray,
    weights: np.ndarray | None = None,
    center: bool = True,
) -> np.ndarray:
    """Rotation R minimizing sum_i w_i ||dst_i - R src_i||^2.

    With center=False the rotation is taken about the origin (used for joints
    pinned at a known pivot). Reflections are removed by flipping the sign of
    the smallest singular direction.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if weights is None:
        weights = np.ones(len(src))
    w = np.asarray(weights, dtype=np.float64)[:, None]
    if center:
        src = src - (w * src).sum(0) / w.sum()
        dst = dst - (w * dst).sum(0) / w.sum()
    H = (w * src).T @ dst
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    return Vt.T @ D @ U.T


def similarity_align(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Align src to dst with the best similarity transform (R, s, t)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    sc, dc = src - mu_s, dst - mu_d
    R = kabsch_rotation(sc, dc, center=False)
    denom = (sc * sc).sum()
    scale = 1.0 if denom < 1e-18 else float((dc * (sc @ R.T)).sum() / denom)
    return scale * sc @ R.T + mu_d


def minimal_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation carrying direction a onto direction b (no twist)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return np.eye(3)
    a, b = a / na, b / nb
    c = np.cross(a, b)
    s = np.linalg.norm(c)
    d = float(a @ b)
    if s < 1e-12:
        if d > 0.0:
            return np.eye(3)
        # antiparallel: pick any perpendicular axis
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        perp = perp / np.linalg.norm(perp)
        return rodrigues_np(np.pi * perp)
    axis = c / s
    angle = np.arctan2(s, d)
    return rodrigues_np(angle * axis)


def rot6d_to_matrix(x: torch.Tensor) -> torch.Tensor:
    """Continuous 6D rotation parameterization (first two columns) to SO(3)."""
    a1, a2 = x[..., 0:3], x[..., 3:6]
    b1 = torch.nn.functional.normalize(a1, dim=-1, eps=1e-8)
    a2p = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = torch.nn.functional.normalize(a2p, dim=-1, eps=1e-8)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d(R: torch.Tensor) -> torch.Tensor:
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)
