"""Optimization utilities used by calibration and fitting.

Objectives are written as callables over a dict of named torch tensors so
they compose directly with the body model forward. The flat parameter
layout (ParamVector) keeps checkpointable, comparable state at module
boundaries; torch supplies the derivative engine and the Adam-family
updates underneath, which keeps every op here deterministic on CPU.

Set PHD_DEBUG=1 to enable per-primitive anomaly detection: non-finite
values then raise with the name of the offending primitive op.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch


class DivergenceError(RuntimeError):
    """Objective became non-finite during optimization."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"objective diverged at iteration {iteration}: {value}")
        self.iteration = iteration


class SingularSystemError(RuntimeError):
    pass


def _debug() -> bool:
    return os.environ.get("PHD_DEBUG", "") not in ("", "0")


@dataclass
class ParamVector:
    """Flat parameter store with named segments.

    Segments are contiguous, disjoint and cover the whole vector; values are
    float64. Group access returns live views into the flat array.
    """

    values: np.ndarray
    segments: dict[str, slice]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        covered = np.zeros(len(self.values), dtype=bool)
        for name, seg in self.segments.items():
            if covered[seg].any():
                raise ValueError(f"segment {name!r} overlaps another segment")
            covered[seg] = True
        if not covered.all():
            raise ValueError("segments do not cover the parameter vector")
        if not np.isfinite(self.values).all():
            raise ValueError("parameter vector contains non-finite values")

    @staticmethod
    def from_groups(groups: Mapping[str, np.ndarray]) -> "ParamVector":
        values, segments, ofs = [], {}, 0
        for name, arr in groups.items():
            flat = np.asarray(arr, dtype=np.float64).reshape(-1)
            segments[name] = slice(ofs, ofs + len(flat))
            values.append(flat)
            ofs += len(flat)
        return ParamVector(np.concatenate(values), segments)

    def group(self, name: str) -> np.ndarray:
        return self.values[self.segments[name]]

    def to_groups(self) -> dict[str, np.ndarray]:
        return {name: self.values[seg].copy() for name, seg in self.segments.items()}

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64).copy(), dict(self.segments))

    def copy(self) -> "ParamVector":
        return self.with_values(self.values)


@dataclass
class OptimizerConfig:
    """AdamW schedule; lr may be a single float or a per-group dict."""

    lr: float | dict[str, float] = 1e-2
    iterations: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def group_lr(self, name: str) -> float:
        if isinstance(self.lr, dict):
            if name not in self.lr:
                raise ValueError(f"no learning rate for group {name!r}")
            return float(self.lr[name])
        return float(self.lr)


@dataclass
class OptimizeResult:
    x: ParamVector
    history: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else float("nan")


Objective = Callable[[dict[str, torch.Tensor]], torch.Tensor]


def _make_leaves(x: ParamVector, requires_grad: bool) -> dict[str, torch.Tensor]:
    return {
        name: torch.tensor(x.values[seg], dtype=torch.float64, requires_grad=requires_grad)
        for name, seg in x.segments.items()
    }


def gradient(objective: Objective, x: ParamVector) -> ParamVector:
    """Derivative of a scalar objective with respect to every segment."""
    leaves = _make_leaves(x, requires_grad=True)
    with torch.autograd.set_detect_anomaly(_debug()):
        value = objective(leaves)
        if value.ndim != 0:
            raise ValueError("objective must return a scalar")
        value.backward()
    grads = []
    for name in x.segments:
        g = leaves[name].grad
        grads.append(np.zeros(leaves[name].numel()) if g is None else g.numpy().reshape(-1))
        if not np.isfinite(grads[-1]).all():
            raise DivergenceError(0, float("nan"))
    return x.with_values(np.concatenate(grads))


def optimize(objective: Objective, x0: ParamVector, cfg: OptimizerConfig) -> OptimizeResult:
    """Minimize with AdamW; per-group learning rates from the config.

    Deterministic for fixed inputs (any stochasticity must live inside the
    objective and be seeded by the caller). Raises DivergenceError with the
    iteration index on a non-finite objective.
    """
    leaves = _make_leaves(x0, requires_grad=True)
    opt = torch.optim.AdamW(
        [
            {"params": [leaves[name]], "lr": cfg.group_lr(name)}
            for name in x0.segments
        ],
        betas=cfg.betas,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    history = []
    with torch.autograd.set_detect_anomaly(_debug()):
        for it in range(cfg.iterations):
            opt.zero_grad()
            value = objective(leaves)
            loss = float(value.detach())
            if not np.isfinite(loss):
                raise DivergenceError(it, loss)
            value.backward()
            opt.step()
            history.append(loss)
    flat = np.concatenate([leaves[name].detach().numpy().reshape(-1) for name in x0.segments])
    return OptimizeResult(x=x0.with_values(flat), history=history)


def least_squares_linear(A: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted linear least squares for small dense systems.

    A is (2N, 3) with two rows per keypoint, b is (2N,), w is one weight per
    keypoint (or per row). Solves the normal equations; a singular normal
    matrix raises SingularSystemError suggesting more keypoints.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if A.ndim != 2 or A.shape[0] != len(b):
        raise ValueError("A and b row counts disagree")
    if len(w) * 2 == A.shape[0]:
        w = np.repeat(w, 2)
    if len(w) != A.shape[0]:
        raise ValueError("weights must have one entry per keypoint or per row")
    Aw = A * w[:, None]
    G = A.T @ Aw
    if not np.isfinite(G).all():
        raise SingularSystemError("linear system contains non-finite values")
    if np.linalg.cond(G) > 1e12:
        raise SingularSystemError(
            "normal matrix is singular; add more confident keypoints"
        )
    return np.linalg.solve(G, Aw.T @ b)
