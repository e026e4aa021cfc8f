"""Shared fixtures: one body model and camera for the whole session.

Model construction costs a few seconds, so it is session-scoped; tests must
not mutate it. Heavy artifacts for the acceptance suite (trained prior,
datasets) live in test_acceptance.py with their own session fixtures.
"""
import numpy as np
import pytest
import torch

from phd.body_model import BodyModel, PoseState
from phd.camera import CameraIntrinsics

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def model() -> BodyModel:
    return BodyModel()


@pytest.fixture(scope="session")
def cam() -> CameraIntrinsics:
    return CameraIntrinsics()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


def random_pose(model: BodyModel, rng: np.random.Generator, scale: float = 0.6,
                depth: float = 3.5) -> PoseState:
    """In-limits random pose with a mild orientation, placed in front of the camera."""
    lo, hi = model.theta_lower, model.theta_upper
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    theta = mid + rng.uniform(-scale, scale, size=lo.shape) * half
    phi = rng.uniform(-0.4, 0.4, size=3)
    p = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), depth + rng.uniform(-0.5, 0.5)])
    return PoseState(theta, phi, p)
