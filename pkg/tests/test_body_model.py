"""Body model construction invariants and LBS behavior."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from phd.body_model import (
    NUM_JOINTS, PARENTS, BodyModel, PoseState, subsample_points,
)
from phd.rotations import rodrigues_np

from conftest import random_pose


def test_tree_structure():
    assert PARENTS[0] == -1
    assert all(PARENTS[j] < j for j in range(1, NUM_JOINTS))
    assert NUM_JOINTS == 24


def test_point_layout(model):
    assert model.num_surface == 238
    assert model.num_points == model.num_surface + model.num_pointcloud_joints
    assert model.num_pointcloud_joints == NUM_JOINTS + len(model.landmark_vertex_idx)


def test_skin_weights_rows(model):
    w = model.skin_weights.numpy()
    assert np.allclose(w.sum(axis=1), 1.0)
    assert (w >= 0).all()
    # at most two driving joints per vertex
    assert ((w > 0).sum(axis=1) <= 2).all()


def test_joint_regressor_exact_on_template(model):
    joints = (model.joint_regressor @ model.template).numpy()
    rest = model.shaped_joints(np.zeros(10)).numpy()
    assert np.abs(joints - rest).max() < 1e-12


def test_rest_pose_identity(model):
    """At zero pose the cloud is the shaped template shifted to the pelvis."""
    beta = np.zeros(10)
    p = np.array([0.3, -0.2, 3.0])
    pts = model.extract_points(beta, np.zeros((23, 3)), np.zeros(3), p).numpy()
    verts = model.shaped_vertices(beta).numpy()
    pelvis = (model.joint_regressor @ model.shaped_vertices(beta)).numpy()[0]
    sel = model._select_idx.numpy()
    expect = verts[sel] + (p - pelvis)
    got = np.concatenate([pts[: model.num_surface], pts[model.num_surface + NUM_JOINTS :]])
    assert np.abs(got - expect).max() < 1e-12


def test_extract_matches_full_skin(model, rng):
    pose = random_pose(model, rng)
    beta = rng.normal(size=10) * 0.5
    full = model.skin(beta, pose.theta, pose.phi, pose.p)
    pts = model.extract_points(beta, pose.theta, pose.phi, pose.p)
    assert torch.allclose(full.points, pts, atol=1e-12)
    joints = model.joints3d(beta, pose.theta, pose.phi, pose.p)
    assert torch.allclose(full.joints, joints, atol=1e-12)


def test_pelvis_row_is_pelvis(model, rng):
    pose = random_pose(model, rng)
    pts = model.extract_points(np.zeros(10), pose.theta, pose.phi, pose.p).numpy()
    joints = model.joints3d(np.zeros(10), pose.theta, pose.phi, pose.p).numpy()
    cloud = model.points_to_cloud(pts)
    assert np.allclose(cloud.pelvis, joints[0], atol=1e-12)
    assert np.allclose(cloud.joints[:NUM_JOINTS], joints, atol=1e-12)


def test_pelvis_position_equals_p(model, rng):
    """The reported pelvis position is exactly the p parameter."""
    pose = random_pose(model, rng)
    beta = rng.normal(size=10) * 0.5
    joints = model.joints3d(beta, pose.theta, pose.phi, pose.p).numpy()
    assert np.allclose(joints[0], pose.p, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_root_rotation_acts_rigidly(model, seed):
    """Pelvis-centered cloud with root rotation phi equals R(phi) times the
    pelvis-centered cloud with identity root."""
    rng = np.random.default_rng(seed)
    pose = random_pose(model, rng)
    beta = rng.normal(size=10) * 0.5
    a = model.extract_points(beta, pose.theta, pose.phi, pose.p).numpy()
    b = model.extract_points(beta, pose.theta, np.zeros(3), pose.p).numpy()
    R = rodrigues_np(pose.phi[None])[0]
    assert np.abs((a - pose.p) - (b - pose.p) @ R.T).max() < 1e-9


def test_shape_basis_orthonormal(model):
    B = model.shape_basis.numpy().reshape(10, -1)
    assert np.abs(B @ B.T - np.eye(10)).max() < 1e-9


def test_scale_beta_oracle(model):
    """scale_beta(s) must scale the rest mesh about the pelvis by exactly s."""
    s = 1.07
    v = model.shaped_vertices(model.scale_beta(s)).numpy()
    assert np.abs(v - s * model.template.numpy()).max() < 1e-9
    h0 = float(model.height(np.zeros(10)))
    h1 = float(model.height(model.scale_beta(s)))
    assert abs(h1 - s * h0) < 1e-9


def test_height_weight_plausible(model, rng):
    from phd.synthdata import sample_subject

    for _ in range(5):
        beta = sample_subject(rng)
        h = float(model.height(beta))
        w = float(model.weight(beta))
        assert 1.2 < h < 2.3
        assert 30.0 < w < 150.0


def test_weight_scales_cubically(model):
    w0 = float(model.weight(np.zeros(10)))
    w1 = float(model.weight(model.scale_beta(1.1)))
    assert abs(w1 / w0 - 1.1**3) < 1e-9


def test_theta_limits_shape(model):
    assert model.theta_lower.shape == (NUM_JOINTS - 1, 3)
    assert (model.theta_lower <= model.theta_upper).all()


def test_rest_pose_kinds(model):
    assert np.all(model.rest_pose("T") == 0.0)
    arms = model.rest_pose("I")
    assert arms[15, 2] < 0 < arms[16, 2]
    with pytest.raises(ValueError):
        model.rest_pose("X")


def test_bad_shapes_raise(model):
    with pytest.raises(ValueError):
        model.extract_points(np.zeros(9), np.zeros((23, 3)), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        model.extract_points(np.zeros(10), np.zeros((22, 3)), np.zeros(3), np.zeros(3))


def test_subsample_keeps_joints(model, rng):
    pose = random_pose(model, rng)
    pts = model.extract_points(np.zeros(10), pose.theta, pose.phi, pose.p).numpy()
    for frac in (0.25, 0.5, 1.0):
        sub, mask = subsample_points(model, pts, frac)
        assert mask[model.num_surface :].all()
        assert np.allclose(sub, pts[mask])
        kept = mask[: model.num_surface].sum()
        assert abs(kept - frac * model.num_surface) <= len(model.surface_groups)
    full, mask = subsample_points(model, pts, 1.0)
    assert mask.all()


def test_subsample_stratified(model, rng):
    """Every capsule group keeps at least one point at 25%."""
    pose = random_pose(model, rng)
    pts = model.extract_points(np.zeros(10), pose.theta, pose.phi, pose.p).numpy()
    _, mask = subsample_points(model, pts, 0.25)
    for grp in model.surface_groups:
        assert mask[grp].any()


def test_gradients_flow_through_extract(model):
    beta = torch.zeros(10, dtype=torch.float64, requires_grad=True)
    theta = torch.zeros((23, 3), dtype=torch.float64, requires_grad=True)
    phi = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    p = torch.tensor([0.0, 0.0, 3.0], dtype=torch.float64, requires_grad=True)
    out = model.extract_points(beta, theta, phi, p).sum()
    out.backward()
    for t in (beta, theta, phi, p):
        assert t.grad is not None and np.isfinite(t.grad.numpy()).all()
