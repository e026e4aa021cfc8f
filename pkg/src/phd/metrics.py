"""Evaluation metrics and report writers.

All errors are reported in millimeters. Alignment modes follow the usual
3D pose protocol names: "camera-absolute" compares raw camera-frame
coordinates, "pelvis-aligned" subtracts the pelvis (or centroid, for bare
vertex sets), "procrustes" applies the best per-frame similarity transform
including scale.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .rotations import similarity_align

MODES = ("camera-absolute", "pelvis-aligned", "procrustes")


def _frames(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return x
    raise ValueError(f"expected (K, 3) or (F, K, 3), got {x.shape}")


def _aligned_error_mm(pred, gt, mode, pred_center, gt_center) -> float:
    errs = []
    for P, Q, cp, cq in zip(pred, gt, pred_center, gt_center):
        if mode == "pelvis-aligned":
            P, Q = P - cp, Q - cq
        elif mode == "procrustes":
            P = similarity_align(P, Q)
        elif mode != "camera-absolute":
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        errs.append(np.linalg.norm(P - Q, axis=-1).mean())
    return float(np.mean(errs) * 1000.0)


def mpjpe(pred, gt, mode: str = "pelvis-aligned", pelvis_index: int = 0) -> float:
    """Mean per-joint position error in mm over (F, K, 3) or (K, 3) joints."""
    P, Q = _frames(pred), _frames(gt)
    if P.shape != Q.shape:
        raise ValueError("prediction and ground truth shapes disagree")
    return _aligned_error_mm(P, Q, mode, P[:, pelvis_index], Q[:, pelvis_index])


def mve(pred, gt, mode: str = "pelvis-aligned", pred_pelvis=None, gt_pelvis=None) -> float:
    """Mean vertex error in mm; same contract as mpjpe over mesh vertices.

    Pelvis positions may be passed explicitly; otherwise the centroid stands
    in for the pelvis in "pelvis-aligned" mode.
    """
    P, Q = _frames(pred), _frames(gt)
    if P.shape != Q.shape:
        raise ValueError("prediction and ground truth shapes disagree")
    cp = P.mean(1) if pred_pelvis is None else _frames(pred_pelvis)[..., 0, :]
    cq = Q.mean(1) if gt_pelvis is None else _frames(gt_pelvis)[..., 0, :]
    c_pred = np.broadcast_to(np.asarray(cp, dtype=np.float64).reshape(-1, 3), (len(P), 3))
    c_gt = np.broadcast_to(np.asarray(cq, dtype=np.float64).reshape(-1, 3), (len(Q), 3))
    return _aligned_error_mm(P, Q, mode, c_pred, c_gt)


def pelvis_error(pred_p, gt_p) -> float:
    """Euclidean pelvis position error in mm (frame-averaged if batched)."""
    P = np.asarray(pred_p, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(gt_p, dtype=np.float64).reshape(-1, 3)
    if P.shape != Q.shape:
        raise ValueError("prediction and ground truth shapes disagree")
    return float(np.linalg.norm(P - Q, axis=-1).mean() * 1000.0)


def write_report(path, rows: list[dict], summary: dict | None = None):
    """TSV table plus a JSON summary sidecar (path with .json suffix)."""
    path = Path(path)
    if not rows:
        raise ValueError("no rows to report")
    cols = list(rows[0].keys())
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(_fmt(row[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")
    if summary is not None:
        path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
