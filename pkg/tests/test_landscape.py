import json

import numpy as np
import pytest

from conftest import random_dataset
from skiplab.data import Dataset, TargetSpec, sphere_dataset
from skiplab.errors import InputError, ParameterError, PreconditionError
from skiplab.kernelgram import gram_matrix, min_eigenvalue
from skiplab.landscape import (
    BoundReport,
    NeighborhoodSpec,
    check_backward_stability,
    check_forward_stability,
    check_gradient_bounds,
    coupling_gap,
    in_neighborhood,
    population_risk,
    probe_landscape,
    sample_in_neighborhood,
    write_diagnostics,
)
from skiplab.netcore import batch_traces, block_deviations, grad_risk, sample_init
from skiplab.reference import RandomFeatureParams
from skiplab.trainer import TrainConfig, train_nn, train_rf


@pytest.fixture(scope="module")
def p0():
    return sample_init(4, 5, 100, 0)


def test_neighborhood_spec():
    assert NeighborhoodSpec(2.0, 8).eps_c == 0.25
    with pytest.raises(ParameterError):
        NeighborhoodSpec(9.0, 8).validate()
    with pytest.raises(ParameterError):
        NeighborhoodSpec(-1.0, 8).validate()


def test_zero_radius_returns_init(p0):
    p = sample_in_neighborhood(p0, 0.0, 5)
    assert np.array_equal(p.flat(), p0.flat()) and p is not p0


def test_boundary_samples(p0):
    c = 3.0
    p = sample_in_neighborhood(p0, c, 1)
    assert in_neighborhood(p, p0, c)
    for blk in (p.a - p0.a, p.r - p0.r):
        assert np.allclose(np.linalg.norm(blk, axis=1), c / p0.L, rtol=1e-12)
    for blk in (p.B - p0.B, p.C - p0.C):
        assert np.allclose(np.linalg.norm(blk, axis=(1, 2)), c / p0.L, rtol=1e-12)
    assert max(block_deviations(p, p0).values()) == pytest.approx(c / p0.L, rel=1e-12)
    q = sample_in_neighborhood(p0, c, 2)
    assert not np.allclose(p.B, q.B)
    assert np.allclose(np.linalg.norm(q.B - p0.B, axis=(1, 2)), c / p0.L, rtol=1e-12)
    assert np.array_equal(sample_in_neighborhood(p0, c, 1).flat(), p.flat())


def test_interior_and_outside(p0):
    p = sample_in_neighborhood(p0, 2.0, 0, interior=True)
    assert in_neighborhood(p, p0, 2.0)
    assert max(block_deviations(p, p0).values()) < 2.0 / p0.L
    assert not in_neighborhood(sample_in_neighborhood(p0, 2.0, 0), p0, 1.0)
    with pytest.raises(ParameterError):
        sample_in_neighborhood(p0, 101.0, 0)


def test_adjoints_at_init(p0):
    X = sphere_dataset(4, 5, seed=1, compute_lambda=False).X
    tr = batch_traces(p0, X)
    assert np.all(tr["alpha"] == 1.0)
    assert not tr["beta"].any() and not tr["gamma"].any()


def test_stability_reports_at_init(p0):
    for rep in check_forward_stability(p0, 0.0, n_probes=3) + check_backward_stability(p0, 0.0, n_probes=3):
        assert rep.lhs_max == 0.0 and rep.passed


def test_stability_passes_on_small_probe_family(p0):
    reps = check_forward_stability(p0, 1.0, n_probes=20) + check_backward_stability(p0, 1.0, n_probes=20)
    assert all(r.passed and r.margin > 0 for r in reps)
    again = check_forward_stability(p0, 1.0, n_probes=20)
    assert [r.lhs_max for r in again] == [r.lhs_max for r in reps[:3]]


def test_gates():
    small = sample_init(2, 2, 2, 0)
    with pytest.raises(PreconditionError):
        check_forward_stability(small, 1.0)
    with pytest.raises(PreconditionError):
        check_backward_stability(sample_init(2, 2, 5, 0), 1.0)
    ds = random_dataset(2, 3, 0)
    with pytest.raises(PreconditionError):
        check_gradient_bounds(sample_init(2, 2, 99, 0), 1.0, ds, n_probes=1)
    with pytest.raises(PreconditionError):
        probe_landscape(sample_init(2, 2, 100, 0), 1.0, ds, n_probes=1, strict_gates=True)
    rep = probe_landscape(sample_init(2, 2, 100, 0), 1.0, ds, n_probes=1)
    assert rep["grad_lower"].info["gate_satisfied"] is False


def test_zero_risk_means_zero_gradient(p0):
    ds = random_dataset(4, 6, 3)
    ds = Dataset(ds.X, np.zeros(ds.n))
    risk, g = grad_risk(p0, ds)
    assert risk == 0.0 and g.total_sq_norm() == 0.0
    rep = probe_landscape(p0, 1.0, ds, n_probes=0)
    assert all(r.lhs_max == 0.0 and r.passed for r in rep.values() if r.bound_name.startswith("grad"))


def test_quadratic_form_identity_at_init(p0):
    ds = random_dataset(4, 6, 3)
    H = gram_matrix(p0, ds)
    lam, _ = min_eigenvalue(H)
    v = np.linalg.eigh(H)[1][:, 0]
    # f(Theta_0) = 0, so the residual is -y; pick it along the minimal eigenvector
    tight = Dataset(ds.X, 0.5 * v / np.max(np.abs(v)))
    risk, g, e = grad_risk(p0, tight, return_residuals=True)
    assert g.total_sq_norm() == pytest.approx(p0.L / ds.n * e @ H @ e, rel=1e-12)
    assert g.total_sq_norm() == pytest.approx(2 * p0.L * lam * risk, rel=1e-9)
    rep = probe_landscape(p0, 1.0, tight, n_probes=0)
    assert rep["grad_identity"].lhs_max == pytest.approx(0.5, rel=1e-9)
    assert rep["gram_quadratic_form"].passed


def test_probe_landscape_reports(p0):
    ds = random_dataset(4, 6, 3)
    rep = probe_landscape(p0, 1.0, ds, n_probes=5)
    assert set(rep) == {
        "grad_upper_ar", "grad_upper_BC", "grad_lower", "grad_identity",
        "gram_quadratic_form", "gram_eig_floor", "gram_drift",
    }
    assert all(r.n_trials == 6 for r in rep.values())
    for key in ("grad_upper_ar", "grad_upper_BC", "grad_identity", "gram_quadratic_form"):
        assert rep[key].passed, rep[key]


def test_bound_report_and_diagnostics(tmp_path):
    good = BoundReport("x", 1.0, 1.0, 3)
    bad = BoundReport("y", 1.5, 1.0, 3)
    assert good.passed and good.margin == 0.0 and not bad.passed
    doc = write_diagnostics([good, bad], tmp_path / "d.json", {"run": 1})
    back = json.loads((tmp_path / "d.json").read_text())
    assert back == doc and back["all_pass"] is False
    assert back["reports"][1] == {"bound_name": "y", "lhs_max": 1.5, "rhs": 1.0, "margin": -0.5, "n_trials": 3, "pass": False}


def _pair(eta_rf=None, snapshots=True):
    ds = random_dataset(3, 5, 2)
    p0 = sample_init(3, 4, 20, 1)
    cfg = TrainConfig(eta=0.01, steps=30, eta_rule="explicit", record_every=5, snapshot_every=5 if snapshots else 0)
    nn = train_nn(p0, ds, cfg)
    rf = train_rf(RandomFeatureParams.from_model(p0), ds, cfg, eta=eta_rf)
    return nn, rf, ds


def test_coupling_series_starts_at_zero(tmp_path):
    nn, rf, ds = _pair()
    s = coupling_gap(nn, rf, ds.X)
    assert s.t[0] == 0 and s.a_gap[0] <= 1e-12 and s.f_gap_theta[0] <= 1e-12 and s.f_gap_traj[0] <= 1e-12
    assert len(s.t) == 7 and np.all(s.a_gap[1:] > 0)
    s.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("t,a_gap,f_gap_theta,f_gap_traj\n")


def test_coupling_rejects_misaligned():
    nn, rf, ds = _pair(eta_rf=0.02)
    with pytest.raises(InputError):
        coupling_gap(nn, rf, ds.X)
    nn, rf, ds = _pair(snapshots=False)
    with pytest.raises(InputError):
        coupling_gap(nn, rf, ds.X)
    nn, _, ds = _pair()
    other = train_rf(
        RandomFeatureParams.from_model(sample_init(3, 4, 20, 2)), ds,
        TrainConfig(eta=0.01, steps=30, eta_rule="explicit", record_every=5),
    )
    with pytest.raises(InputError):
        coupling_gap(nn, other, ds.X)


def test_population_risk():
    target = TargetSpec()
    for d in (2, 5):
        r, se = population_risk(lambda X: np.zeros(len(X)), target, d, 20_000, 0)
        assert abs(r - 1 / (4 * d)) <= 3 * se
    r, se = population_risk(lambda X: np.maximum(X[:, 0], 0), target, 3)
    assert r == 0.0 and se == 0.0
    _, se1 = population_risk(lambda X: np.zeros(len(X)), target, 3, 4000, 1)
    _, se4 = population_risk(lambda X: np.zeros(len(X)), target, 3, 16000, 1)
    assert abs(se4 / se1 - 0.5) <= 0.1
    with pytest.raises(ParameterError):
        population_risk(lambda X: X[:, 0], target, 3, 999)
