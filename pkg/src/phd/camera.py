"""Pinhole camera, keypoint containers, and pelvis initialization.

The camera is intrinsics-only: everything upstream lives directly in the
camera frame (z forward, x right, y down in pixel convention). Projection
is differentiable; the two pelvis initializers are closed-form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .numerics import least_squares_linear


class ProjectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float = 1000.0
    cx: float = 512.0
    cy: float = 512.0
    width: int = 1024
    height: int = 1024

    def to_dict(self) -> dict:
        return {"f": self.f, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(f=float(d["f"]), cx=float(d["cx"]), cy=float(d["cy"]),
                                width=int(d["width"]), height=int(d["height"]))


@dataclass
class Keypoints2D:
    """Detected 2D joints: uv (N, 2) pixels and per-point confidence (N,).

    Row i corresponds to tree joint i (the keypoint set is the first N
    joints of the kinematic tree)."""

    uv: np.ndarray
    conf: np.ndarray

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        self.conf = np.asarray(self.conf, dtype=np.float64).reshape(-1)
        if len(self.uv) != len(self.conf):
            raise ValueError("uv and conf lengths disagree")


def project(cam: CameraIntrinsics, points):
    """Perspective projection of (..., 3) camera-frame points to pixels.

    Torch in, torch out (differentiable); numpy in, numpy out. Points at or
    behind the camera raise with the offending index.
    """
    is_np = not isinstance(points, torch.Tensor)
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64)) if is_np else points
    z = pts[..., 2]
    bad = (z <= 1e-6).nonzero()
    if len(bad):
        raise ProjectionError(f"point {bad[0].tolist()} is at or behind the camera")
    u = cam.f * pts[..., 0] / z + cam.cx
    v = cam.f * pts[..., 1] / z + cam.cy
    uv = torch.stack([u, v], dim=-1)
    return uv.numpy() if is_np else uv


def backproject_pixel(cam: CameraIntrinsics, uv, depth: float) -> np.ndarray:
    """Pixel plus depth to a camera-frame point."""
    u, v = float(uv[0]), float(uv[1])
    return np.array([(u - cam.cx) / cam.f * depth, (v - cam.cy) / cam.f * depth, depth])


def init_pelvis_depth(
    cam: CameraIntrinsics,
    kp: Keypoints2D,
    model_shoulder_width: float,
    shoulder_pair: tuple[int, int] = (13, 14),
) -> float:
    """Depth guess from the shoulder-width ratio: Z = f * SW_model / SW_px.

    Assumes the shoulder segment is roughly parallel to the image plane;
    a yawed subject foreshortens SW_px and overestimates Z.
    """
    a, b = shoulder_pair
    if max(a, b) >= len(kp.uv):
        raise ValueError("keypoints do not include the shoulder pair")
    if kp.conf[a] <= 0.0 or kp.conf[b] <= 0.0:
        raise ProjectionError("shoulder keypoints are missing (zero confidence)")
    sw_px = float(np.linalg.norm(kp.uv[a] - kp.uv[b]))
    if sw_px < 1.0:
        raise ProjectionError(f"projected shoulder width {sw_px:.3f}px is degenerate")
    return cam.f * float(model_shoulder_width) / sw_px


def init_pelvis_position(
    cam: CameraIntrinsics,
    kp: Keypoints2D,
    joints_pelvis_relative: np.ndarray,
) -> np.ndarray:
    """Closed-form pelvis position from posed pelvis-relative joints.

    Each confident keypoint (u_i, v_i) with pelvis-relative joint X_i gives
    two linear rows in p from u_i = f (X_i + p)_x / (X_i + p)_z + cx and the
    v analog. Solved by confidence-weighted linear least squares.
    """
    X = np.asarray(joints_pelvis_relative, dtype=np.float64)
    if X.shape != (len(kp.uv), 3):
        raise ValueError("need one pelvis-relative joint per keypoint")
    rows, rhs, w = [], [], []
    for i in range(len(X)):
        if kp.conf[i] <= 0.0:
            continue
        u, v = kp.uv[i]
        x, y, z = X[i]
        rows.append([cam.f, 0.0, cam.cx - u])
        rhs.append(-(cam.f * x + (cam.cx - u) * z))
        rows.append([0.0, cam.f, cam.cy - v])
        rhs.append(-(cam.f * y + (cam.cy - v) * z))
        w.extend([kp.conf[i], kp.conf[i]])
    if len(rows) < 6:
        raise ProjectionError("too few confident keypoints to initialize the pelvis")
    return least_squares_linear(np.asarray(rows), np.asarray(rhs), np.asarray(w))
