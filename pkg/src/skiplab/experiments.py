"""Composite runs shared by the command line and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .activations import Activation, as_activation
from .data import TargetSpec, sample_sphere, sphere_dataset
from .errors import ParameterError
from .landscape import CouplingSeries, coupling_gap, population_risk
from .netcore import predict, sample_init
from .reference import RandomFeatureParams
from .resnetlab import ResNetParams, resnet_init, resnet_predict, train_resnet
from .trainer import TrainConfig, early_stop_time, lambda_hat, train_nn, train_rf


def fit_loglog(xs, ys) -> float:
    """Least-squares slope of log y against log x."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    ok = (xs > 0) & (ys > 0) & np.isfinite(ys)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(xs[ok]), np.log(ys[ok]), 1)[0])


@dataclass
class SkipCouplingRun:
    L: int
    seed: int
    lam: float
    eta: float
    T: float
    k_T: int
    traj_nn: object
    traj_rf: object
    series: CouplingSeries
    dataset: object = None
    extra: dict = field(default_factory=dict)

    def a_gap_at(self, t):
        i = int(np.argmin(np.abs(self.series.t - t)))
        return float(self.series.a_gap[i])


def skip_coupling_run(
    d,
    m,
    n,
    L,
    seed,
    dataset=None,
    dataset_seed=None,
    target=None,
    act=Activation.RELU,
    kappa=0.5,
    horizon_factor=1.0,
    n_records=20,
    n_test=64,
    test_seed=12345,
) -> SkipCouplingRun:
    """Deep net and RF twin from one initialization, run for horizon_factor * T.

    T = sqrt(n)/L and eta = kappa * lambda_min(H(Theta_0)) / L.  Both
    models are recorded on the same steps (including the step reaching T)
    so the coupling series is aligned.
    """
    act = as_activation(act)
    if dataset is None:
        ds_seed = seed if dataset_seed is None else dataset_seed
        dataset = sphere_dataset(d, n, target, ds_seed, compute_lambda=False)
    p0 = sample_init(d, m, L, seed)
    lam = lambda_hat(p0, dataset, act)
    if not lam > 0:
        raise ParameterError(f"lambda_min(H(theta_0)) = {lam:.3e} is not positive")
    eta = kappa * lam / L
    T, k_T = early_stop_time(n, L, eta)
    steps = max(1, int(math.ceil(horizon_factor * k_T)))
    rec = max(1, steps // n_records)
    cfg = TrainConfig(
        eta=eta, steps=steps, eta_rule="explicit", record_every=rec, snapshot_every=rec, stop_risk=0.0
    )
    nn = train_nn(p0, dataset, cfg, act, lam, extra_steps=(k_T,))
    rf0 = RandomFeatureParams.from_model(p0, act, seed)
    rf = train_rf(rf0, dataset, cfg, lam, L, eta=eta, extra_steps=(k_T,))
    X = sample_sphere(n_test, d, np.random.default_rng(test_seed))
    series = coupling_gap(nn, rf, X, act)
    return SkipCouplingRun(L, seed, lam, eta, T, k_T, nn, rf, series, dataset)


def skip_sweep_row(run: SkipCouplingRun, target, act=Activation.RELU, n_test=1000, test_seed=777) -> dict:
    ds = run.dataset
    snaps = run.traj_nn.snapshots

    def test_risk(p):
        return population_risk(lambda X: predict(p, X, act), target, ds.d, n_test, test_seed, ds.label_scale)[0]

    t_mask = run.series.t <= run.T * (1 + 1e-12)
    return {
        "L": run.L,
        "seed": run.seed,
        "lambda_hat": run.lam,
        "eta": run.eta,
        "T": run.T,
        "final_train_risk": run.traj_nn.final_risk,
        "test_risk_T": test_risk(snaps[run.k_T]),
        "test_risk_final": test_risk(run.traj_nn.final),
        "sup_f_gap_theta": float(np.max(run.series.f_gap_theta[t_mask])),
        "sup_f_gap_traj": float(np.max(run.series.f_gap_traj[t_mask])),
        "a_gap_T": run.a_gap_at(run.T),
    }


SKIP_SWEEP_COLUMNS = [
    "L",
    "seed",
    "lambda_hat",
    "eta",
    "T",
    "final_train_risk",
    "test_risk_T",
    "test_risk_final",
    "sup_f_gap_theta",
    "sup_f_gap_traj",
    "a_gap_T",
]


def skip_sweep_fits(rows) -> dict:
    """Log-log exponents against L of the per-depth medians."""
    depths = sorted({r["L"] for r in rows})

    def med(key, fn=lambda r, v: v):
        return [float(np.median([fn(r, r[key]) for r in rows if r["L"] == L])) for L in depths]

    return {
        "depths": depths,
        "sup_f_gap_theta_vs_L": fit_loglog(depths, med("sup_f_gap_theta")),
        "sup_f_gap_traj_vs_L": fit_loglog(depths, med("sup_f_gap_traj")),
        "a_gap_rate_vs_L": fit_loglog(depths, med("a_gap_T", lambda r, v: v / r["T"])),
        "test_risk_T_vs_L": fit_loglog(depths, med("test_risk_T")),
    }


# ----------------------------------------------------------------------
# ResNet pairs
# ----------------------------------------------------------------------


@dataclass
class ResNetPairRun:
    L: int
    seed: int
    eta: float
    traj_nn: object
    traj_rf: object
    series: CouplingSeries
    risk_gap: float


def resnet_pair_run(p0: ResNetParams, dataset, eta, steps, act=Activation.RELU, n_records=50, test_X=None):
    """Plain GD and frozen-V GD from the same initialization and step size."""
    rec = max(1, steps // n_records)
    cfg = TrainConfig(
        eta=eta, steps=steps, eta_rule="explicit", record_every=rec, snapshot_every=rec, stop_risk=0.0
    )
    nn = train_resnet(p0, dataset, cfg, "plain-gd", act=act)
    rf = train_resnet(p0, dataset, cfg, "frozen-V-gd", act=act)
    X = dataset.X if test_X is None else test_X
    steps_common = sorted(set(nn.snapshots) & set(rf.snapshots))
    rows = []
    for s in steps_common:
        pn, pr = nn.snapshots[s], rf.snapshots[s]
        f = resnet_predict(pn, X, act)
        twin = ResNetParams(pn.U, p0.V, True)
        rows.append(
            (
                s * eta,
                np.linalg.norm(pn.U - pr.U),
                np.max(np.abs(f - resnet_predict(twin, X, act))),
                np.max(np.abs(f - resnet_predict(pr, X, act))),
            )
        )
    series = CouplingSeries(*np.array(rows).T.copy())
    rb = dict(zip(rf.steps, rf.risks))
    gap = max(abs(r - rb[s]) for s, r in zip(nn.steps, nn.risks) if s in rb)
    return ResNetPairRun(p0.L, -1, eta, nn, rf, series, float(gap))


def tuned_pair_gap(d, m, n, L, seed, eta_grid, steps, act=Activation.RELU, target=None, n_test=1000, test_seed=4242):
    """sup_t |risk_nn - risk_rf| with the step size tuned on the plain model's test risk."""
    from .resnetlab import tune_step_size

    target = target or TargetSpec()
    ds = sphere_dataset(d, n, target, seed, compute_lambda=False)
    p0 = resnet_init(d, m, L, seed)

    def score(p):
        return population_risk(lambda X: resnet_predict(p, X, act), target, d, n_test, test_seed, ds.label_scale)[0]

    eta, scores = tune_step_size(p0, ds, eta_grid, steps, score, act)
    run = resnet_pair_run(p0, ds, eta, steps, act)
    run.seed = seed
    return run, scores
