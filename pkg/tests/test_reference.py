import numpy as np
import pytest

from conftest import random_dataset
from skiplab.data import CoefficientFn, TargetSpec, sample_sphere
from skiplab.errors import DimensionError
from skiplab.experiments import fit_loglog
from skiplab.gradcheck import central_diff, mismatch
from skiplab.landscape import population_risk
from skiplab.netcore import ModelParams, predict, sample_init
from skiplab.reference import (
    RandomFeatureParams,
    construct_astar,
    feature_gram_max_eig,
    least_squares_coefficients,
    rf_grad_risk,
    rf_predict,
    rf_risk,
)
from skiplab.trainer import TrainConfig, train_rf


def test_hand_value():
    rf = RandomFeatureParams(np.array([0.3]), np.array([[1.0]]))
    assert rf_predict(rf, np.array([1.0])) == pytest.approx(0.3, abs=1e-15)


def test_zero_coefficients_predict_zero():
    p = sample_init(3, 4, 5, 0)
    rf = RandomFeatureParams.from_model(p)
    X = sample_sphere(10, 3, np.random.default_rng(0))
    assert not rf_predict(rf, X).any()


def test_b0_is_shared_and_frozen():
    p = sample_init(3, 4, 5, 0)
    rf = RandomFeatureParams.from_model(p, init_seed=0)
    assert np.array_equal(rf.B0, p.B_stack())
    with pytest.raises(ValueError):
        rf.B0[0, 0] = 1.0
    assert rf.copy().B0 is rf.B0


def test_equals_deep_net_at_frozen_features():
    d, m, L = 4, 3, 9
    p0 = sample_init(d, m, L, 2)
    rng = np.random.default_rng(2)
    a = rng.normal(size=(L - 1, m))
    p = ModelParams(a, p0.B.copy(), p0.C.copy(), p0.r.copy())
    rf = RandomFeatureParams(a.reshape(-1), p0.B_stack())
    X = sample_sphere(1000, d, rng)
    assert np.max(np.abs(predict(p, X) - rf_predict(rf, X))) <= 1e-12


def test_shape_errors():
    with pytest.raises(DimensionError):
        RandomFeatureParams(np.zeros(3), np.zeros((2, 2)))
    rf = RandomFeatureParams(np.zeros(2), np.ones((2, 2)) / 2)
    with pytest.raises(DimensionError):
        rf.features(np.ones((1, 3)))


def test_risk_at_zero_and_finite_differences():
    ds = random_dataset(3, 9, 4)
    p0 = sample_init(3, 4, 6, 1)
    rf = RandomFeatureParams.from_model(p0)
    risk, _ = rf_grad_risk(rf, ds)
    assert risk == pytest.approx(np.sum(ds.y**2) / (2 * ds.n), rel=1e-15)
    for seed in range(3):
        rf.a = np.random.default_rng(seed).normal(size=rf.a.size)
        _, g = rf_grad_risk(rf, ds)
        num = central_diff(lambda a: rf_risk(rf, ds, a), rf.a, h=1e-4)
        # quadratic objective: central differences are exact up to rounding
        assert mismatch(g, num, atol=1e-10) <= 1e-7


def test_normal_equations_are_stationary():
    ds = random_dataset(3, 5, 4)
    rf = RandomFeatureParams.from_model(sample_init(3, 4, 6, 1))
    rf.a = least_squares_coefficients(rf, ds)
    _, g = rf_grad_risk(rf, ds)
    assert np.linalg.norm(g) <= 1e-12


def test_astar_construction():
    m, L = 5, 12
    B0 = sample_init(3, m, L, 0).B_stack()
    assert not construct_astar(CoefficientFn("constant", 0.0), B0, m, L).any()
    gamma = 1.7
    a = construct_astar(CoefficientFn("constant", gamma), B0, m, L)
    # m(L-1) rows under the literal L of the formula
    assert np.linalg.norm(a) == pytest.approx(gamma * np.sqrt(L - 1) / L, rel=1e-14)
    assert np.linalg.norm(a) <= gamma / np.sqrt(L)


def test_astar_risk_scales_as_inverse_width():
    d = 3
    coef = CoefficientFn("mixture", centers=((1.0, 0.0, 0.0), (0.0, 0.6, 0.8)), weights=(1.0, -0.8))
    target = TargetSpec("rkhs-finite", coef)
    sizes, risks = [], []
    for L in (5, 20, 80, 320):
        vals = []
        for seed in range(20):
            B0 = sample_init(d, 1, L, seed).B_stack()
            rf = RandomFeatureParams(construct_astar(coef, B0, 1, L), B0)
            vals.append(population_risk(lambda X, rf=rf: rf_predict(rf, X), target, d, 2000, 100 + seed)[0])
        sizes.append(L)
        risks.append(np.mean(vals))
    slope = fit_loglog(sizes, risks)
    assert abs(slope + 1) <= 0.3, slope


def test_descent_is_monotone_and_optimal():
    ds = random_dataset(3, 6, 7)
    rf0 = RandomFeatureParams.from_model(sample_init(3, 4, 6, 3))
    eta = 0.9 / feature_gram_max_eig(rf0, ds)
    traj = train_rf(rf0, ds, TrainConfig(eta=eta, steps=3000, eta_rule="explicit", stop_risk=0.0))
    assert np.all(np.diff(traj.risks) <= 0)
    best = rf_risk(rf0, ds, least_squares_coefficients(rf0, ds))
    assert traj.final_risk <= best + 1e-6


def test_norm_growth_bound_along_trajectory():
    ds = random_dataset(3, 6, 7)
    m, L = 4, 6
    rf0 = RandomFeatureParams.from_model(sample_init(3, m, L, 3))
    astar = construct_astar(CoefficientFn("linear", v=(0.5, -0.5, 0.2)), rf0.B0, m, L)
    e_star = rf_risk(rf0, ds, astar)
    eta = 0.5 / feature_gram_max_eig(rf0, ds)
    traj = train_rf(rf0, ds, TrainConfig(eta=eta, steps=500, eta_rule="explicit", stop_risk=0.0))
    d0 = np.linalg.norm(rf0.a - astar)
    for t, a in zip(traj.times, traj.a_stack):
        assert np.linalg.norm(a - astar) <= np.sqrt(d0**2 + 2 * t * e_star) + 1e-12
