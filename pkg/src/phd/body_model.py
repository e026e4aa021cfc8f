"""Procedural articulated body model.

A capsule-based body is generated at construction time: 24 joints in a
fixed kinematic tree, a watertight triangle mesh built from one capsule per
bone (plus terminal capsules for head, feet and hands), linear blend
skinning weights, an exact joint regressor, and an orthonormal 10-direction
shape basis. The template stands along +y, faces +z, pelvis at the origin,
arms out along x (theta = 0 is the T-pose). Units are meters.

theta rows parameterize joints 1..23 as axis-angle; the pelvis orientation
phi and the pelvis position p (camera frame) are separate parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .rotations import rodrigues

JOINT_DEFS = [
    # name, parent, template position (x left, y up, z forward)
    ("pelvis", -1, (0.000, 0.000, 0.000)),
    ("hip_l", 0, (0.095, -0.075, 0.000)),
    ("hip_r", 0, (-0.095, -0.075, 0.000)),
    ("spine1", 0, (0.000, 0.120, 0.000)),
    ("knee_l", 1, (0.105, -0.490, 0.000)),
    ("knee_r", 2, (-0.105, -0.490, 0.000)),
    ("spine2", 3, (0.000, 0.250, 0.000)),
    ("ankle_l", 4, (0.110, -0.870, 0.000)),
    ("ankle_r", 5, (-0.110, -0.870, 0.000)),
    ("spine3", 6, (0.000, 0.360, 0.000)),
    ("foot_l", 7, (0.115, -0.930, 0.125)),
    ("foot_r", 8, (-0.115, -0.930, 0.125)),
    ("neck", 9, (0.000, 0.465, 0.000)),
    ("collar_l", 9, (0.165, 0.430, 0.000)),
    ("collar_r", 9, (-0.165, 0.430, 0.000)),
    ("head", 12, (0.000, 0.560, 0.000)),
    ("shoulder_l", 13, (0.220, 0.445, 0.000)),
    ("shoulder_r", 14, (-0.220, 0.445, 0.000)),
    ("elbow_l", 16, (0.480, 0.445, 0.000)),
    ("elbow_r", 17, (-0.480, 0.445, 0.000)),
    ("wrist_l", 18, (0.720, 0.445, 0.000)),
    ("wrist_r", 19, (-0.720, 0.445, 0.000)),
    ("hand_l", 20, (0.810, 0.445, 0.000)),
    ("hand_r", 21, (-0.810, 0.445, 0.000)),
]

JOINT_NAMES = [d[0] for d in JOINT_DEFS]
PARENTS = [d[1] for d in JOINT_DEFS]
NUM_JOINTS = len(JOINT_DEFS)

# bone capsule radii, keyed by child joint: (proximal, distal)
BONE_RADII = {
    1: (0.078, 0.075), 2: (0.078, 0.075),          # pelvis block
    3: (0.115, 0.132),                              # belly
    4: (0.086, 0.060), 5: (0.086, 0.060),           # thighs
    6: (0.134, 0.134),                              # lower chest
    7: (0.058, 0.042), 8: (0.058, 0.042),           # calves
    9: (0.134, 0.112),                              # chest
    10: (0.044, 0.040), 11: (0.044, 0.040),         # feet
    12: (0.046, 0.043),                             # neck
    13: (0.052, 0.048), 14: (0.052, 0.048),         # collars
    15: (0.046, 0.058),                             # neck -> head base
    16: (0.050, 0.048), 17: (0.050, 0.048),         # shoulder girdle
    18: (0.048, 0.038), 19: (0.048, 0.038),         # upper arms
    20: (0.037, 0.030), 21: (0.037, 0.030),         # forearms
    22: (0.030, 0.026), 23: (0.030, 0.026),         # hands
}

# terminal capsules: leaf joint -> (tip position, proximal r, distal r)
TERMINALS = {
    15: ((0.000, 0.730, 0.012), 0.082, 0.064),      # skull
    10: ((0.115, -0.945, 0.205), 0.038, 0.028),     # toes
    11: ((-0.115, -0.945, 0.205), 0.038, 0.028),
    22: ((0.885, 0.445, 0.000), 0.026, 0.020),      # fingers
    23: ((-0.885, 0.445, 0.000), 0.026, 0.020),
}

# sampling bounds for theta rows (joints 1..23), radians
_LIM = {
    "hip": ((-0.9, -0.35, -0.5), (0.9, 0.35, 0.5)),
    "spine": ((-0.3, -0.3, -0.3), (0.3, 0.3, 0.3)),
    "knee": ((0.0, -0.08, -0.08), (1.9, 0.08, 0.08)),
    "ankle": ((-0.4, -0.2, -0.2), (0.4, 0.2, 0.2)),
    "foot": ((-0.3, -0.05, -0.05), (0.3, 0.05, 0.05)),
    "neck": ((-0.4, -0.4, -0.3), (0.4, 0.4, 0.3)),
    "collar": ((-0.1, -0.15, -0.2), (0.1, 0.15, 0.2)),
    "shoulder": ((-0.8, -0.8, -0.9), (0.8, 0.8, 0.9)),
    "elbow_l": ((-0.5, -2.0, -0.25), (0.5, 0.1, 0.25)),
    "elbow_r": ((-0.5, -0.1, -0.25), (0.5, 2.0, 0.25)),
    "wrist": ((-0.4, -0.4, -0.4), (0.4, 0.4, 0.4)),
    "hand": ((-0.25, -0.25, -0.25), (0.25, 0.25, 0.25)),
}
_LIMIT_KINDS = [
    "hip", "hip", "spine", "knee", "knee", "spine", "ankle", "ankle", "spine",
    "foot", "foot", "neck", "collar", "collar", "neck", "shoulder", "shoulder",
    "elbow_l", "elbow_r", "wrist", "wrist", "hand", "hand",
]

MESH_DENSITY = 985.0  # kg / m^3, whole-body average


class ModelConstructionError(RuntimeError):
    pass


@dataclass
class BodyConfig:
    num_betas: int = 10
    ring_segments: int = 8
    rings_per_bone: int = 4
    num_surface_points: int = 238
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "num_betas": self.num_betas,
            "ring_segments": self.ring_segments,
            "rings_per_bone": self.rings_per_bone,
            "num_surface_points": self.num_surface_points,
            "seed": self.seed,
        }


@dataclass
class ShapeParams:
    beta: np.ndarray  # (num_betas,)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)


@dataclass
class PoseState:
    theta: np.ndarray  # (23, 3) axis-angle, joints 1..23
    phi: np.ndarray    # (3,) pelvis orientation
    p: np.ndarray      # (3,) pelvis position, camera frame

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(NUM_JOINTS - 1, 3)
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(3)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)

    @staticmethod
    def rest(p: Sequence[float] = (0.0, 0.0, 0.0)) -> "PoseState":
        return PoseState(np.zeros((NUM_JOINTS - 1, 3)), np.zeros(3), np.asarray(p, dtype=np.float64))


@dataclass
class PointCloud:
    """Ordered body points: a surface block followed by a joint block.

    The joint block holds the 24 tree joints first, then the landmark
    vertices, so ``points[num_surface]`` is always the pelvis.
    """

    points: np.ndarray
    num_surface: int
    num_joints: int

    def __post_init__(self):
        if self.points.shape[0] != self.num_surface + self.num_joints:
            raise ValueError("point count does not match block sizes")

    @property
    def surface(self) -> np.ndarray:
        return self.points[: self.num_surface]

    @property
    def joints(self) -> np.ndarray:
        return self.points[self.num_surface :]

    @property
    def pelvis(self) -> np.ndarray:
        return self.points[self.num_surface]


@dataclass
class SkinResult:
    vertices: torch.Tensor   # (V, 3)
    joints: torch.Tensor     # (24, 3) posed tree joints
    points: torch.Tensor     # (S + J, 3) surface block then joint block


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _perp_frame(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return e1, e2


class _CapsuleBuilder:
    """Accumulates capsule geometry and the bookkeeping the model needs."""

    def __init__(self, rings: int, segs: int):
        self.rings = rings
        self.segs = segs
        self.verts: list[np.ndarray] = []
        self.faces: list[tuple[int, int, int]] = []
        self.capsules: list[dict] = []

    def add(self, name: str, driver: int, a: np.ndarray, b: np.ndarray, ra: float, rb: float):
        base = sum(len(v) for v in self.verts)
        axis = b - a
        length = np.linalg.norm(axis)
        if length < 1e-9:
            raise ModelConstructionError(f"degenerate capsule {name}")
        u = axis / length
        e1, e2 = _perp_frame(u)
        verts = []
        ring_idx = []
        for i in range(self.rings):
            t = i / (self.rings - 1)
            c = a + axis * t
            r = ra + (rb - ra) * t
            row = []
            for k in range(self.segs):
                ang = 2.0 * np.pi * k / self.segs
                verts.append(c + r * (np.cos(ang) * e1 + np.sin(ang) * e2))
                row.append(base + len(verts) - 1)
            ring_idx.append(row)
        apex_a = base + len(verts)
        verts.append(a - 0.7 * ra * u)
        apex_b = base + len(verts)
        verts.append(b + 0.7 * rb * u)

        faces = []
        n = self.segs
        for i in range(self.rings - 1):
            for k in range(n):
                k2 = (k + 1) % n
                v00, v01 = ring_idx[i][k], ring_idx[i][k2]
                v10, v11 = ring_idx[i + 1][k], ring_idx[i + 1][k2]
                faces.append((v00, v01, v11))
                faces.append((v00, v11, v10))
        for k in range(n):
            k2 = (k + 1) % n
            faces.append((apex_a, ring_idx[0][k2], ring_idx[0][k]))
            faces.append((apex_b, ring_idx[-1][k], ring_idx[-1][k2]))

        varr = np.asarray(verts)
        vol = _signed_volume(varr - varr.mean(0), np.asarray(faces) - base)
        if vol < 0:
            faces = [(f[0], f[2], f[1]) for f in faces]

        self.verts.append(varr)
        self.faces.extend(faces)
        self.capsules.append(
            {
                "name": name,
                "driver": driver,
                "start": base,
                "count": len(verts),
                "rings": ring_idx,
                "apex_a": apex_a,
                "apex_b": apex_b,
                "a": a.copy(),
                "b": b.copy(),
            }
        )


def _signed_volume(verts: np.ndarray, faces: np.ndarray) -> float:
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def _check_closed(faces: np.ndarray, num_verts: int):
    edges: dict[tuple[int, int], int] = {}
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(a, b), max(a, b))
            edges[key] = edges.get(key, 0) + 1
    bad = [e for e, c in edges.items() if c != 2]
    if bad:
        raise ModelConstructionError(f"mesh is not watertight: {len(bad)} boundary edges")


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    t = np.clip(((p - a) @ ab) / max(denom, 1e-12), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(p - proj, axis=1)


class BodyModel:
    """Shape-parametric skinned body built procedurally at construction."""

    def __init__(self, config: BodyConfig | None = None):
        self.config = config or BodyConfig()
        self._build()

    # ---------------------------------------------------------------- build
    def _build(self):
        cfg = self.config
        joints = np.array([d[2] for d in JOINT_DEFS], dtype=np.float64)
        builder = _CapsuleBuilder(cfg.rings_per_bone, cfg.ring_segments)
        for j in range(1, NUM_JOINTS):
            ra, rb = BONE_RADII[j]
            builder.add(JOINT_NAMES[j], PARENTS[j], joints[PARENTS[j]], joints[j], ra, rb)
        for leaf, (tip, ra, rb) in TERMINALS.items():
            builder.add(f"{JOINT_NAMES[leaf]}_tip", leaf, joints[leaf], np.asarray(tip), ra, rb)

        template = np.concatenate(builder.verts, axis=0)
        faces = np.asarray(builder.faces, dtype=np.int64)
        _check_closed(faces, len(template))
        if _signed_volume(template, faces) <= 0:
            raise ModelConstructionError("template volume is not positive")

        self._capsules = builder.capsules
        self._by_name = {c["name"]: c for c in builder.capsules}

        # exact joint regressor: ring of the owning capsule centered at each joint
        regressor = np.zeros((NUM_JOINTS, len(template)))
        pelvis_ring = self._by_name["spine1"]["rings"][0]
        regressor[0, pelvis_ring] = 1.0 / len(pelvis_ring)
        for j in range(1, NUM_JOINTS):
            ring = self._by_name[JOINT_NAMES[j]]["rings"][-1]
            regressor[j, ring] = 1.0 / len(ring)
        err = np.abs(regressor @ template - joints).max()
        if err > 1e-9:
            raise ModelConstructionError(f"joint regressor inexact: {err:.3e}")

        weights = self._skin_weights(template)
        basis = self._shape_basis(template)
        self._landmarks(template)

        self.parents = list(PARENTS)
        self.joint_names = list(JOINT_NAMES)
        self.num_vertices = len(template)
        self.faces = torch.as_tensor(faces)
        self.template = torch.as_tensor(template)
        self.joint_regressor = torch.as_tensor(regressor)
        self.skin_weights = torch.as_tensor(weights)
        self.shape_basis = torch.as_tensor(basis)  # (B, V, 3)
        self.uniform_scale_norm = float(np.linalg.norm(template))

        lo = np.array([_LIM[k][0] for k in _LIMIT_KINDS])
        hi = np.array([_LIM[k][1] for k in _LIMIT_KINDS])
        self.theta_lower, self.theta_upper = lo, hi

        self.keypoint_joints = tuple(range(17))
        self.shoulder_joint_pair = (13, 14)

        self._surface_points(template)
        sel = np.concatenate([self.surface_vertex_idx, self.landmark_vertex_idx])
        self._select_idx = torch.as_tensor(np.asarray(sel, dtype=np.int64))
        self.num_surface = len(self.surface_vertex_idx)
        self.num_pointcloud_joints = NUM_JOINTS + len(self.landmark_vertex_idx)
        self.num_points = self.num_surface + self.num_pointcloud_joints

    def _skin_weights(self, template: np.ndarray) -> np.ndarray:
        dists = np.full((len(template), NUM_JOINTS), np.inf)
        for cap in self._capsules:
            d = _point_segment_distance(template, cap["a"], cap["b"])
            dists[:, cap["driver"]] = np.minimum(dists[:, cap["driver"]], d)
        order = np.argsort(dists, axis=1)
        w = np.zeros((len(template), NUM_JOINTS))
        rows = np.arange(len(template))
        for col in (0, 1):
            j = order[:, col]
            w[rows, j] = 1.0 / (dists[rows, j] ** 2 + 1e-4)
        return w / w.sum(1, keepdims=True)

    def _shape_basis(self, template: np.ndarray) -> np.ndarray:
        x, y, z = template[:, 0], template[:, 1], template[:, 2]
        zeros = np.zeros_like(x)
        fields = [template.copy()]  # uniform scale about the pelvis
        girth = np.exp(-(((y - 0.10) / 0.24) ** 2))
        fields.append(np.stack([x * girth, zeros, z * girth], axis=1))
        leg = _sigmoid(-y / 0.06)
        arm = _sigmoid((np.abs(x) - 0.22) / 0.04)
        fields.append(np.stack([x * arm, y * leg, zeros], axis=1))
        gird = np.exp(-(((y - 0.44) / 0.10) ** 2)) * _sigmoid((np.abs(x) - 0.05) / 0.06)
        fields.append(np.stack([np.sign(x) * gird, zeros, zeros], axis=1))

        rng = np.random.default_rng(self.config.seed + 7)
        while len(fields) < self.config.num_betas:
            f = np.zeros_like(template)
            for _ in range(6):
                k = rng.normal(scale=2.0 * np.pi / 0.9, size=3)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                amp = rng.normal(size=3)
                amp[2] *= 0.15  # keep the field visible to image-plane keypoints
                f += np.outer(np.sin(template @ k + phase), amp)
            fields.append(f)

        basis = []
        for f in fields:
            g = f.reshape(-1).astype(np.float64)
            for prev in basis:
                g = g - (g @ prev) * prev
            n = np.linalg.norm(g)
            if n < 1e-8:
                raise ModelConstructionError("shape basis fields are linearly dependent")
            basis.append(g / n)
        return np.stack(basis).reshape(self.config.num_betas, -1, 3)

    def _landmarks(self, template: np.ndarray):
        def ring(cap_name, i):
            return self._by_name[cap_name]["rings"][i]

        def extreme(idxs, axis, sign=1.0):
            vals = sign * template[idxs, axis]
            return idxs[int(np.argmax(vals))]

        head = self._by_name["head_tip"]
        lm = {
            "head_top": head["apex_b"],
            "foot_bottom_l": extreme(ring("foot_l_tip", 0) + ring("foot_l", 0), 1, -1.0),
            "foot_bottom_r": extreme(ring("foot_r_tip", 0) + ring("foot_r", 0), 1, -1.0),
            "shoulder_surface_l": extreme(ring("shoulder_l", 3), 1),
            "shoulder_surface_r": extreme(ring("shoulder_r", 3), 1),
        }
        self.named_landmarks = lm

        face0 = extreme(ring("head_tip", 1), 2)
        face1 = extreme(ring("head_tip", 2), 2)
        face2 = extreme([i for i in ring("head_tip", 1) if i != face0], 2)
        face3 = extreme([i for i in ring("head_tip", 2) if i != face1], 2)
        extended = [
            lm["head_top"],
            face0, face1, face2, face3,
            extreme(ring("head_tip", 1), 0), extreme(ring("head_tip", 1), 0, -1.0),  # ears
            self._by_name["hand_l_tip"]["apex_b"], self._by_name["hand_r_tip"]["apex_b"],
            ring("hand_l_tip", 1)[0], ring("hand_r_tip", 1)[0],
            self._by_name["foot_l_tip"]["apex_b"], self._by_name["foot_r_tip"]["apex_b"],
            extreme(ring("foot_l", 0), 2, -1.0), extreme(ring("foot_r", 0), 2, -1.0),  # heels
            lm["shoulder_surface_l"], lm["shoulder_surface_r"],
            extreme(ring("knee_l", 3), 2), extreme(ring("knee_r", 3), 2),  # kneecaps
            extreme(ring("spine3", 1), 2),  # sternum
            extreme(ring("spine1", 1), 2),  # belly
        ]
        if len(extended) != len(set(extended)):
            raise ModelConstructionError("duplicate landmark vertices")
        self.landmark_vertex_idx = np.asarray(extended, dtype=np.int64)

    def _surface_points(self, template: np.ndarray):
        target = self.config.num_surface_points
        counts = np.array([c["count"] for c in self._capsules], dtype=np.float64)
        quota = counts / counts.sum() * target
        take = np.maximum(1, np.floor(quota).astype(int))
        rema = quota - np.floor(quota)
        while take.sum() < target:
            i = int(np.argmax(rema))
            take[i] += 1
            rema[i] = -1
        while take.sum() > target:
            i = int(np.argmax(take))
            take[i] -= 1
        idx, groups = [], []
        for cap, k in zip(self._capsules, take):
            local = np.linspace(0, cap["count"] - 1, int(k)).round().astype(int)
            local = np.unique(local)
            start = len(idx)
            idx.extend((cap["start"] + local).tolist())
            groups.append(np.arange(start, len(idx)))
        self.surface_vertex_idx = np.asarray(idx, dtype=np.int64)
        self.surface_groups = groups
        if len(self.surface_vertex_idx) != target:
            raise ModelConstructionError("surface point stratification failed")

    # ------------------------------------------------------------- forwards
    def _as_t(self, x, shape, name) -> torch.Tensor:
        t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))
        t = t.to(torch.float64)
        if tuple(t.shape) != shape:
            raise ValueError(f"{name} must have shape {shape}, got {tuple(t.shape)}")
        return t

    def shaped_vertices(self, beta) -> torch.Tensor:
        """Rest-pose mesh for shape coefficients beta."""
        beta = self._as_t(beta, (self.config.num_betas,), "beta")
        return self.template + torch.einsum("b,bvi->vi", beta, self.shape_basis)

    def shaped_joints(self, beta) -> torch.Tensor:
        return self.joint_regressor @ self.shaped_vertices(beta)

    def _global_transforms(self, rest_joints: torch.Tensor, theta, phi):
        theta = self._as_t(theta, (NUM_JOINTS - 1, 3), "theta")
        phi = self._as_t(phi, (3,), "phi")
        locals_aa = torch.cat([phi[None], theta], dim=0)
        R = rodrigues(locals_aa)  # (24, 3, 3)
        Rg: list[torch.Tensor] = [R[0]]
        tg: list[torch.Tensor] = [rest_joints[0]]
        for j in range(1, NUM_JOINTS):
            par = PARENTS[j]
            off = rest_joints[j] - rest_joints[par]
            Rg.append(Rg[par] @ R[j])
            tg.append(tg[par] + Rg[par] @ off)
        return torch.stack(Rg), torch.stack(tg)

    def _lbs(self, beta, theta, phi, p, vertex_idx: torch.Tensor | None):
        beta = self._as_t(beta, (self.config.num_betas,), "beta")
        p = self._as_t(p, (3,), "p")
        verts = self.shaped_vertices(beta)
        rest_j = self.joint_regressor @ verts
        Rg, tg = self._global_transforms(rest_j, theta, phi)
        shift = p - rest_j[0]  # report pelvis position in the camera frame
        if vertex_idx is None:
            V, W = verts, self.skin_weights
        else:
            V, W = verts[vertex_idx], self.skin_weights[vertex_idx]
        trans = tg - torch.einsum("kij,kj->ki", Rg, rest_j)
        posed = torch.einsum("vk,kij,vj->vi", W, Rg, V) + W @ trans
        return posed + shift, tg + shift

    def skin(self, beta, theta, phi, p) -> SkinResult:
        """Pose the full mesh; returns vertices, tree joints and the point cloud."""
        posed, joints = self._lbs(beta, theta, phi, p, None)
        sel = posed[self._select_idx]
        pts = torch.cat([sel[: self.num_surface], joints, sel[self.num_surface :]], dim=0)
        return SkinResult(vertices=posed, joints=joints, points=pts)

    def extract_points(self, beta, theta, phi, p) -> torch.Tensor:
        """Posed (S + J, 3) point cloud, skinning only the needed vertices."""
        posed, joints = self._lbs(beta, theta, phi, p, self._select_idx)
        return torch.cat([posed[: self.num_surface], joints, posed[self.num_surface :]], dim=0)

    def points_to_cloud(self, points) -> PointCloud:
        pts = points.detach().numpy() if isinstance(points, torch.Tensor) else np.asarray(points)
        return PointCloud(pts.astype(np.float64), self.num_surface, self.num_pointcloud_joints)

    def joints3d(self, beta, theta, phi, p) -> torch.Tensor:
        beta = self._as_t(beta, (self.config.num_betas,), "beta")
        p = self._as_t(p, (3,), "p")
        rest_j = self.shaped_joints(beta)
        _, tg = self._global_transforms(rest_j, theta, phi)
        return tg + (p - rest_j[0])

    # ----------------------------------------------------------- measurements
    def height(self, beta) -> torch.Tensor:
        """Vertical extent of the shaped rest mesh: head top to feet midpoint."""
        v = self.shaped_vertices(beta)
        lm = self.named_landmarks
        feet = 0.5 * (v[lm["foot_bottom_l"], 1] + v[lm["foot_bottom_r"], 1])
        return v[lm["head_top"], 1] - feet

    def weight(self, beta) -> torch.Tensor:
        """Mesh volume times an average body density."""
        v = self.shaped_vertices(beta)
        f = self.faces
        v0, v1, v2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        vol = (v0 * torch.cross(v1, v2, dim=-1)).sum() / 6.0
        return vol * MESH_DENSITY

    def shoulder_width(self, beta) -> torch.Tensor:
        j = self.shaped_joints(beta)
        a, b = self.shoulder_joint_pair
        return torch.linalg.norm(j[a] - j[b])

    def scale_beta(self, s: float) -> np.ndarray:
        """beta whose shaped mesh is the template scaled by s about the pelvis."""
        beta = np.zeros(self.config.num_betas)
        beta[0] = (s - 1.0) * self.uniform_scale_norm
        return beta

    def rest_pose(self, kind: str = "T") -> np.ndarray:
        """Canonical rest thetas: 'T' (arms out, all zeros) or 'I' (arms down)."""
        theta = np.zeros((NUM_JOINTS - 1, 3))
        if kind == "T":
            return theta
        if kind == "I":
            theta[15, 2] = -1.25  # shoulder_l is joint 16 -> theta row 15
            theta[16, 2] = 1.25
            theta[12, 2] = -0.12
            theta[13, 2] = 0.12
            return theta
        raise ValueError(f"unknown rest pose kind {kind!r}")


def subsample_points(model: BodyModel, points: np.ndarray, fraction: float):
    """Deterministic stratified surface subsampling; joints are always kept.

    Returns (subsampled points, boolean mask over the S + J layout). Every
    capsule contributes at least one surface point.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    pts = np.asarray(points)
    if pts.shape[0] != model.num_points:
        raise ValueError("points do not match the model layout")
    target = int(round(fraction * model.num_surface))
    target = max(target, len(model.surface_groups))
    quota = np.array([len(g) * fraction for g in model.surface_groups])
    take = np.maximum(1, np.floor(quota).astype(int))
    rema = quota - np.floor(quota)
    while take.sum() < target:
        i = int(np.argmax(rema))
        take[i] += 1
        rema[i] = -1
    while take.sum() > target:
        candidates = np.where(take > 1)[0]
        i = candidates[int(np.argmax(take[candidates]))]
        take[i] -= 1
    mask = np.zeros(model.num_points, dtype=bool)
    mask[model.num_surface :] = True
    for g, k in zip(model.surface_groups, take):
        keep = np.linspace(0, len(g) - 1, int(k)).round().astype(int)
        mask[g[np.unique(keep)]] = True
    return pts[mask], mask
