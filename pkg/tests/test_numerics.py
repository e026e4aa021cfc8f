"""Parameter vectors, the shared optimizer, and the linear solver."""
import numpy as np
import pytest
import torch

from phd.numerics import (
    DivergenceError, OptimizerConfig, ParamVector, SingularSystemError,
    gradient, least_squares_linear, optimize,
)


def _pv(**groups):
    return ParamVector.from_groups({k: np.asarray(v, dtype=np.float64) for k, v in groups.items()})


def test_param_vector_round_trip():
    pv = _pv(a=[1.0, 2.0], b=[[3.0, 4.0], [5.0, 6.0]])
    assert pv.values.tolist() == [1, 2, 3, 4, 5, 6]
    assert pv.group("a").tolist() == [1, 2]
    groups = pv.to_groups()
    assert groups["b"].tolist() == [3, 4, 5, 6]
    # group views are live
    pv.group("a")[0] = 9.0
    assert pv.values[0] == 9.0


def test_param_vector_validation():
    with pytest.raises(ValueError):
        ParamVector(np.zeros(4), {"a": slice(0, 2)})  # uncovered tail
    with pytest.raises(ValueError):
        ParamVector(np.zeros(4), {"a": slice(0, 3), "b": slice(2, 4)})  # overlap
    with pytest.raises(ValueError):
        ParamVector(np.array([1.0, np.nan]), {"a": slice(0, 2)})


def test_gradient_matches_analytic():
    pv = _pv(x=[1.0, 2.0], y=[3.0])

    def obj(leaves):
        return (leaves["x"] ** 2).sum() + 5.0 * leaves["y"].sum()

    g = gradient(obj, pv)
    assert np.allclose(g.group("x"), [2.0, 4.0])
    assert np.allclose(g.group("y"), [5.0])


def test_gradient_zero_for_unused_group():
    pv = _pv(x=[1.0], unused=[2.0, 3.0])
    g = gradient(lambda leaves: (leaves["x"] ** 2).sum(), pv)
    assert np.allclose(g.group("unused"), 0.0)


def test_optimize_quadratic_converges():
    pv = _pv(x=[5.0, -3.0])
    target = np.array([1.0, 2.0])

    def obj(leaves):
        return ((leaves["x"] - torch.as_tensor(target)) ** 2).sum()

    res = optimize(obj, pv, OptimizerConfig(lr=0.1, iterations=300))
    assert np.abs(res.x.group("x") - target).max() < 1e-3
    assert res.history[-1] < res.history[0]
    assert res.final_loss == res.history[-1]


def test_optimize_per_group_lr():
    pv = _pv(fast=[4.0], frozen=[4.0])

    def obj(leaves):
        return (leaves["fast"] ** 2).sum() + (leaves["frozen"] ** 2).sum()

    res = optimize(obj, pv, OptimizerConfig(lr={"fast": 0.2, "frozen": 0.0}, iterations=50))
    assert abs(res.x.group("frozen")[0] - 4.0) < 1e-12
    assert abs(res.x.group("fast")[0]) < abs(res.x.group("frozen")[0])
    with pytest.raises(ValueError):
        optimize(obj, pv, OptimizerConfig(lr={"fast": 0.2}, iterations=1))


def test_optimize_deterministic():
    def run():
        pv = _pv(x=[2.0, -1.0])
        res = optimize(lambda l: (l["x"] ** 4).sum(), pv, OptimizerConfig(lr=0.05, iterations=40))
        return res.x.values.copy(), list(res.history)

    a, ha = run()
    b, hb = run()
    assert np.array_equal(a, b)
    assert ha == hb


def test_optimize_divergence_raises():
    pv = _pv(x=[2.0])

    def obj(leaves):
        return (1.0 / (leaves["x"] - leaves["x"])).sum()  # inf immediately

    with pytest.raises(DivergenceError) as exc:
        optimize(obj, pv, OptimizerConfig(lr=0.1, iterations=5))
    assert exc.value.iteration == 0


def test_least_squares_against_lstsq(rng):
    A = rng.normal(size=(10, 3))
    b = rng.normal(size=10)
    w = rng.uniform(0.5, 2.0, size=10)
    got = least_squares_linear(A, b, w)
    sw = np.sqrt(w)
    want, *_ = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    assert np.abs(got - want).max() < 1e-9


def test_least_squares_per_keypoint_weights(rng):
    A = rng.normal(size=(10, 3))
    b = rng.normal(size=10)
    w5 = rng.uniform(0.5, 2.0, size=5)
    assert np.allclose(least_squares_linear(A, b, w5), least_squares_linear(A, b, np.repeat(w5, 2)))


def test_least_squares_singular_raises():
    A = np.zeros((6, 3))
    A[:, 0] = 1.0
    with pytest.raises(SingularSystemError):
        least_squares_linear(A, np.ones(6), np.ones(6))
