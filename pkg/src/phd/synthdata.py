"""Synthetic scene generation: subjects, pose sequences, keypoint rendering.

All training, calibration, and evaluation data is self-generated from the
procedural body model, so ground truth is available everywhere. Datasets
are stored as versioned JSON lines (one header line, then one frame per
line) and read back as a stream.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch

from .body_model import BodyModel, PoseState
from .camera import CameraIntrinsics, Keypoints2D, project

FORMAT_NAME = "phd-dataset"
FORMAT_VERSION = 1

# symmetric keypoint pairs inside the 17-joint set, for left-right swaps
SWAP_PAIRS = ((1, 2), (4, 5), (7, 8), (10, 11), (13, 14))


class DatasetFormatError(RuntimeError):
    pass


@dataclass
class NoiseParams:
    sigma_px: float = 2.0
    dropout: float = 0.03
    swap_prob: float = 0.02

    def to_dict(self) -> dict:
        return {"sigma_px": self.sigma_px, "dropout": self.dropout, "swap_prob": self.swap_prob}

    @staticmethod
    def from_dict(d: dict) -> "NoiseParams":
        return NoiseParams(**d)


@dataclass
class FrameRecord:
    """One rendered frame with full ground truth."""

    scene: int
    frame: int
    beta: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    p: np.ndarray
    kp_uv: np.ndarray
    kp_conf: np.ndarray
    kp_clean: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def frame_id(self) -> str:
        return f"{self.scene:05d}/{self.frame:04d}"

    def pose(self) -> PoseState:
        return PoseState(self.theta, self.phi, self.p)

    def keypoints(self) -> Keypoints2D:
        return Keypoints2D(self.kp_uv, self.kp_conf)


def sample_subject(rng: np.random.Generator, num_betas: int = 10) -> np.ndarray:
    """beta ~ N(0, I), truncated coordinate-wise to |beta_i| <= 3."""
    beta = rng.normal(size=num_betas)
    while (np.abs(beta) > 3.0).any():
        bad = np.abs(beta) > 3.0
        beta[bad] = rng.normal(size=bad.sum())
    return beta


def _band_limited(rng, length, n_waves=3, max_freq=0.03):
    t = np.arange(length)
    amps = rng.uniform(0.3, 1.0, size=n_waves)
    freqs = rng.uniform(0.005, max_freq, size=n_waves)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
    sig = sum(a * np.sin(2.0 * np.pi * f * t + ph) for a, f, ph in zip(amps, freqs, phases))
    return sig / amps.sum()


def _limit_step(arr: np.ndarray, max_step: float) -> np.ndarray:
    # moving averages preserve per-dof bounds and shrink frame-to-frame deltas
    while len(arr) > 2 and np.abs(np.diff(arr, axis=0)).max() > max_step:
        arr = np.concatenate([arr[:1], (arr[:-1] + arr[1:]) / 2.0])
    return arr


def sample_pose_sequence(
    model: BodyModel,
    rng: np.random.Generator,
    length: int,
    style: str = "random-smooth",
    max_step: float = 0.12,
    depth_range: tuple[float, float] = (2.4, 5.2),
):
    """(thetas (F,23,3), phis (F,3), ps (F,3)) for one of three styles."""
    lo, hi = model.theta_lower, model.theta_upper
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    t = np.arange(length)

    if style == "static":
        theta = mid + rng.uniform(-1.0, 1.0, size=lo.shape) * half * 0.6
        thetas = np.repeat(theta[None], length, axis=0)
    elif style == "random-smooth":
        sig = np.stack(
            [_band_limited(rng, length) for _ in range(lo.size)], axis=1
        ).reshape(length, *lo.shape)
        amp = rng.uniform(0.25, 0.95, size=lo.shape)
        thetas = mid + sig * half * amp
    elif style == "walk":
        thetas = np.repeat(mid[None] * 0.0, length, axis=0).reshape(length, *lo.shape)
        phase = 2.0 * np.pi * rng.uniform(0.035, 0.07) * t + rng.uniform(0.0, 2 * np.pi)
        swing = rng.uniform(0.35, 0.55)
        thetas[:, 0, 0] = swing * np.sin(phase)            # hip_l
        thetas[:, 1, 0] = -swing * np.sin(phase)           # hip_r
        thetas[:, 3, 0] = np.clip(0.9 * np.sin(phase - 0.6), 0.0, None) * 0.9   # knee_l
        thetas[:, 4, 0] = np.clip(-0.9 * np.sin(phase - 0.6 + np.pi), 0.0, None) * 0.9
        thetas[:, 6, 0] = 0.25 * np.maximum(np.sin(phase), 0.0)  # ankles
        thetas[:, 7, 0] = 0.25 * np.maximum(np.sin(phase + np.pi), 0.0)
        thetas[:, 15, 0] = -0.35 * np.sin(phase)           # shoulders counter-swing
        thetas[:, 16, 0] = 0.35 * np.sin(phase)
        thetas[:, 15, 2] = -0.9                            # arms part-way down
        thetas[:, 16, 2] = 0.9
        thetas[:, 2, 0] = 0.06 * np.sin(2 * phase)         # spine bob
        thetas = np.clip(thetas, lo, hi)
    else:
        raise ValueError(f"unknown sequence style {style!r}")

    thetas = _limit_step(np.clip(thetas, lo, hi), max_step)
    length = len(thetas)

    phis = np.stack(
        [
            0.12 * _band_limited(rng, length),
            rng.uniform(-0.5, 0.5) + 0.25 * _band_limited(rng, length),
            0.08 * _band_limited(rng, length),
        ],
        axis=1,
    )
    mid_z = rng.uniform(*depth_range)
    ps = np.stack(
        [
            0.25 * _band_limited(rng, length),
            0.12 * _band_limited(rng, length),
            np.clip(mid_z + 0.5 * _band_limited(rng, length), 1.5, 6.0),
        ],
        axis=1,
    )
    return thetas, _limit_step(phis, max_step), _limit_step(ps, max_step)


def render_keypoints(
    model: BodyModel,
    cam: CameraIntrinsics,
    beta: np.ndarray,
    pose: PoseState,
    noise: NoiseParams,
    rng: np.random.Generator,
):
    """(noisy uv, confidences, clean uv) for the first-17-joints keypoint set."""
    with torch.no_grad():
        joints = model.joints3d(beta, pose.theta, pose.phi, pose.p).numpy()
    clean = project(cam, joints[list(model.keypoint_joints)])
    uv = clean + rng.normal(scale=noise.sigma_px, size=clean.shape)
    conf = rng.uniform(0.6, 1.0, size=len(clean))
    drop = rng.uniform(size=len(clean)) < noise.dropout
    conf[drop] = 0.0
    if rng.uniform() < noise.swap_prob:
        a, b = SWAP_PAIRS[rng.integers(len(SWAP_PAIRS))]
        uv[[a, b]] = uv[[b, a]]
    return uv, conf, clean


def make_scene(
    model: BodyModel,
    cam: CameraIntrinsics,
    rng: np.random.Generator,
    scene_id: int,
    length: int,
    style: str = "random-smooth",
    noise: NoiseParams | None = None,
    margin: float = 12.0,
) -> list[FrameRecord]:
    """One subject, one sequence; every clean keypoint lands inside the image."""
    noise = noise or NoiseParams()
    beta = sample_subject(rng, model.config.num_betas)
    for attempt in range(40):
        thetas, phis, ps = sample_pose_sequence(model, rng, length, style)
        ps[:, 2] += 0.35 * attempt
        if ps[:, 2].max() > 6.0:
            continue
        frames = []
        ok = True
        for f in range(len(thetas)):
            pose = PoseState(thetas[f], phis[f], ps[f])
            uv, conf, clean = render_keypoints(model, cam, beta, pose, noise, rng)
            if (
                clean[:, 0].min() < margin
                or clean[:, 1].min() < margin
                or clean[:, 0].max() > cam.width - margin
                or clean[:, 1].max() > cam.height - margin
            ):
                ok = False
                break
            frames.append(
                FrameRecord(scene_id, f, beta.copy(), thetas[f], phis[f], ps[f], uv, conf, clean)
            )
        if ok:
            return frames
    raise RuntimeError("could not place the sequence inside the image")


def make_calibration_frame(
    model: BodyModel,
    cam: CameraIntrinsics,
    rng: np.random.Generator,
    scene_id: int = 0,
    beta: np.ndarray | None = None,
    noise: NoiseParams | None = None,
    rest: str = "T",
) -> FrameRecord:
    """Rest-pose frame with a small random pelvis pitch, facing the camera."""
    noise = noise or NoiseParams(sigma_px=0.0, dropout=0.0, swap_prob=0.0)
    if beta is None:
        beta = sample_subject(rng, model.config.num_betas)
    theta = model.rest_pose(rest)
    phi = np.array([rng.uniform(-np.pi / 18.0, np.pi / 18.0), 0.0, 0.0])
    with torch.no_grad():
        height = float(model.height(beta))
        weight = float(model.weight(beta))
    p = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(2.8, 4.0)])
    pose = PoseState(theta, phi, p)
    uv, conf, clean = render_keypoints(model, cam, beta, pose, noise, rng)
    return FrameRecord(
        scene_id, 0, np.asarray(beta, dtype=np.float64), theta, phi, p, uv, conf, clean,
        extra={"height_m": height, "weight_kg": weight},
    )


def reprojection_nullspace_perturbation(
    model: BodyModel,
    cam: CameraIntrinsics,
    beta: np.ndarray,
    pose: PoseState,
    rng: np.random.Generator,
    n_null: int = 8,
    n_trials: int = 32,
    max_px: float = 1.5,
) -> PoseState:
    """Perturb a pose along near-null directions of the keypoint reprojection.

    The Jacobian of all keypoint pixels is taken with respect to the theta
    rows of keypoint-ancestor joints plus (phi, p); distal arm joints are
    excluded so the bottom singular directions are genuine depth ambiguities
    rather than trivially unobserved limbs. Among random combinations of the
    bottom directions, the one that moves pelvis-aligned joints the most while
    keeping the mean reprojection shift under max_px wins.
    """
    rows = [j - 1 for j in range(1, 17)]  # theta rows of joints 1..16

    def flat_uv(x: torch.Tensor) -> torch.Tensor:
        theta = torch.as_tensor(pose.theta).clone()
        theta[rows] = x[: len(rows) * 3].reshape(len(rows), 3)
        phi = x[len(rows) * 3 : len(rows) * 3 + 3]
        p = x[len(rows) * 3 + 3 :]
        joints = model.joints3d(torch.as_tensor(beta), theta, phi, p)
        return project(cam, joints[list(model.keypoint_joints)]).reshape(-1)

    x0 = torch.cat(
        [
            torch.as_tensor(pose.theta[rows].reshape(-1)),
            torch.as_tensor(pose.phi),
            torch.as_tensor(pose.p),
        ]
    )
    J = torch.autograd.functional.jacobian(flat_uv, x0, vectorize=True).numpy()
    _, _, Vt = np.linalg.svd(J, full_matrices=True)
    null_dirs = Vt[-n_null:]

    with torch.no_grad():
        uv0 = flat_uv(x0).numpy()
        j0 = model.joints3d(beta, pose.theta, pose.phi, pose.p).numpy()
    j0 = j0 - j0[0]

    def apply(dx: np.ndarray) -> PoseState:
        x = x0.numpy() + dx
        theta = pose.theta.copy()
        theta[rows] = x[: len(rows) * 3].reshape(len(rows), 3)
        return PoseState(theta, x[-6:-3], x[-3:])

    def acceptable(cand: PoseState) -> float | None:
        if np.abs(cand.theta).max() >= np.pi - 0.05 or cand.p[2] < 1.2:
            return None
        with torch.no_grad():
            uv = flat_uv(torch.as_tensor(np.concatenate(
                [cand.theta[rows].reshape(-1), cand.phi, cand.p]))).numpy()
        px = np.abs(uv - uv0).reshape(-1, 2).sum(axis=1).mean()
        if px > max_px:
            return None
        with torch.no_grad():
            j = model.joints3d(beta, cand.theta, cand.phi, cand.p).numpy()
        return float(np.linalg.norm((j - j[0]) - j0, axis=1).mean())

    best, best_gap = None, -1.0
    for _ in range(n_trials):
        combo = rng.normal(size=n_null) @ null_dirs
        combo /= np.linalg.norm(combo)
        # grow the step until reprojection consistency breaks, keep the last good one
        scale, good, good_gap = 0.25, None, -1.0
        for _ in range(10):
            cand = apply(scale * combo)
            gap = acceptable(cand)
            if gap is None:
                break
            good, good_gap = cand, gap
            scale *= 1.5
        if good is not None and good_gap > best_gap:
            best, best_gap = good, good_gap
    if best is None:
        raise RuntimeError("no acceptable null-space perturbation found")
    return best


def make_ambiguous_frames(
    model: BodyModel,
    cam: CameraIntrinsics,
    rng: np.random.Generator,
    count: int,
    sigma_px: float = 1.0,
) -> list[tuple[FrameRecord, PoseState]]:
    """Fitting stress suite: true frames plus depth-corrupted initializations."""
    noise = NoiseParams(sigma_px=sigma_px, dropout=0.0, swap_prob=0.0)
    out = []
    scene = 0
    while len(out) < count:
        frames = make_scene(model, cam, rng, scene, length=6, style="random-smooth", noise=noise)
        rec = frames[rng.integers(len(frames))]
        rec = FrameRecord(
            scene, 0, rec.beta, rec.theta, rec.phi, rec.p, rec.kp_uv, rec.kp_conf, rec.kp_clean
        )
        init = reprojection_nullspace_perturbation(model, cam, rec.beta, rec.pose(), rng)
        out.append((rec, init))
        scene += 1
    return out


# ----------------------------------------------------------------- file io

def write_dataset(
    path,
    records: Iterable[FrameRecord],
    cam: CameraIntrinsics,
    model: BodyModel,
    noise: NoiseParams | None = None,
) -> int:
    path = Path(path)
    n = 0
    with path.open("w") as fh:
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "camera": cam.to_dict(),
            "body": model.config.to_dict(),
            "noise": (noise or NoiseParams()).to_dict(),
        }
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            line = {
                "scene": rec.scene,
                "frame": rec.frame,
                "beta": rec.beta.tolist(),
                "theta": rec.theta.reshape(-1).tolist(),
                "phi": rec.phi.tolist(),
                "p": rec.p.tolist(),
                "kp": rec.kp_uv.tolist(),
                "conf": rec.kp_conf.tolist(),
                "kp_clean": rec.kp_clean.tolist(),
            }
            line.update(rec.extra)
            fh.write(json.dumps(line) + "\n")
            n += 1
    return n


def read_dataset(path) -> tuple[dict, Iterator[FrameRecord]]:
    """Header dict plus a lazy frame iterator (constant memory)."""
    path = Path(path)
    fh = path.open("r")
    try:
        header = json.loads(fh.readline())
    except json.JSONDecodeError as e:
        fh.close()
        raise DatasetFormatError(f"unreadable dataset header: {e}") from e
    if header.get("format") != FORMAT_NAME:
        fh.close()
        raise DatasetFormatError(f"not a {FORMAT_NAME} file: {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        fh.close()
        raise DatasetFormatError(f"unsupported dataset version {header.get('version')!r}")

    def frames() -> Iterator[FrameRecord]:
        known = {"scene", "frame", "beta", "theta", "phi", "p", "kp", "conf", "kp_clean"}
        with fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                yield FrameRecord(
                    scene=int(d["scene"]),
                    frame=int(d["frame"]),
                    beta=np.asarray(d["beta"], dtype=np.float64),
                    theta=np.asarray(d["theta"], dtype=np.float64).reshape(-1, 3),
                    phi=np.asarray(d["phi"], dtype=np.float64),
                    p=np.asarray(d["p"], dtype=np.float64),
                    kp_uv=np.asarray(d["kp"], dtype=np.float64),
                    kp_conf=np.asarray(d["conf"], dtype=np.float64),
                    kp_clean=np.asarray(d["kp_clean"], dtype=np.float64),
                    extra={k: v for k, v in d.items() if k not in known},
                )

    return header, frames()


def make_training_frames(
    model: BodyModel,
    cam: CameraIntrinsics,
    seed: int,
    count: int,
    scene_length: int = 24,
    noise: NoiseParams | None = None,
) -> Iterator[FrameRecord]:
    """Mixed-style stream of frames for prior training."""
    rng = np.random.default_rng(seed)
    styles = ["random-smooth", "random-smooth", "walk", "static"]
    produced = 0
    scene = 0
    while produced < count:
        style = styles[scene % len(styles)]
        frames = make_scene(model, cam, rng, scene, scene_length, style, noise)
        for rec in frames:
            if produced == count:
                break
            produced += 1
            yield rec
        scene += 1
