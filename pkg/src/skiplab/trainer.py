"""Full-batch gradient descent for the deep net and its random-feature twin."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .activations import Activation, as_activation
from .errors import DivergenceError, ParameterError
from .kernelgram import gram_matrix, kernel_matrix, min_eigenvalue
from .netcore import ModelParams, block_deviations, grad_risk
from .reference import RandomFeatureParams, rf_grad_risk

CSV_COLUMNS = ["step", "time", "risk", "max_dev_a", "max_dev_r", "max_dev_B", "max_dev_C"]
DEV_KEYS = ("a", "r", "B", "C")


@dataclass
class TrainConfig:
    eta: float = 0.0
    steps: int = 1000
    eta_rule: str = "lambda_scaled"
    kappa: float = 0.5
    record_every: int = 1
    snapshot_every: int = 0
    seed: int = 0
    stop_risk: float = 1e-12
    divergence_risk: float = 1e6
    lambda_source: str = "H"

    def __post_init__(self):
        if self.eta_rule not in ("explicit", "lambda_scaled"):
            raise ParameterError(f"unknown eta_rule {self.eta_rule!r}")
        if self.eta_rule == "explicit" and not self.eta > 0:
            raise ParameterError("an explicit step size must be positive")
        if self.eta_rule == "lambda_scaled" and not 0 < self.kappa:
            raise ParameterError("kappa must be positive")
        if int(self.steps) < 1:
            raise ParameterError("steps must be at least 1")
        if int(self.record_every) < 1:
            raise ParameterError("record_every must be at least 1")
        if self.lambda_source not in ("H", "K"):
            raise ParameterError(f"lambda_source must be 'H' or 'K', got {self.lambda_source!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        return cls(**known)


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    times: list = field(default_factory=list)
    risks: list = field(default_factory=list)
    devs: list = field(default_factory=list)
    a_stack: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    final: object = None

    def record(self, step, time, risk, devs, a_stack=None, **extra):
        self.steps.append(int(step))
        self.times.append(float(time))
        self.risks.append(float(risk))
        self.devs.append(tuple(float(devs[k]) for k in DEV_KEYS))
        if a_stack is not None:
            self.a_stack.append(np.array(a_stack, dtype=np.float64))
        for key, val in extra.items():
            self.extra.setdefault(key, []).append(float(val))

    @property
    def final_risk(self) -> float:
        return self.risks[-1]

    def dev_array(self) -> np.ndarray:
        return np.array(self.devs, dtype=np.float64).reshape(-1, 4)

    def max_block_dev(self) -> np.ndarray:
        """Largest of the four block deviations at every recorded step."""
        return self.dev_array().max(axis=1)

    def to_csv(self, path):
        cols = CSV_COLUMNS + list(self.extra)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i, step in enumerate(self.steps):
                row = [str(step), _fmt(self.times[i]), _fmt(self.risks[i])]
                row += [_fmt(v) for v in self.devs[i]]
                row += [_fmt(self.extra[k][i]) for k in self.extra]
                w.writerow(row)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(_jsonable(self.meta), fh, indent=2, sort_keys=True)


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ----------------------------------------------------------------------
# step sizes
# ----------------------------------------------------------------------


def lambda_hat(params0: ModelParams, dataset, act=Activation.RELU, source="H", n_samples=200_000):
    """Positive-definiteness constant used by the step rule.

    "H" is the smallest eigenvalue of the Gram matrix at ``params0``; "K" the
    smallest eigenvalue of the Monte Carlo kernel matrix.
    """
    if source == "H":
        return min_eigenvalue(gram_matrix(params0, dataset, act))[0]
    return min_eigenvalue(kernel_matrix(dataset, act, n_samples))[0]


def resolve_eta(cfg: TrainConfig, L: int, lam: float | None) -> float:
    if cfg.eta_rule == "explicit":
        return float(cfg.eta)
    if lam is None or not lam > 0:
        raise ParameterError(f"the lambda-scaled rule needs a positive lambda (got {lam})")
    eta = cfg.kappa * lam / L
    if eta > lam / L:
        raise ParameterError(f"lambda-scaled step {eta:.3e} exceeds lambda/L = {lam / L:.3e}")
    return eta


def early_stop_time(n: int, L: int, eta: float | None = None):
    """T = sqrt(n) / L, and the first step index reaching it when eta is given."""
    T = math.sqrt(n) / L
    if eta is None:
        return T
    return T, int(math.ceil(T / eta - 1e-12))


# ----------------------------------------------------------------------
# deep net
# ----------------------------------------------------------------------


def _should_record(step, cfg_every, last):
    return step % cfg_every == 0 or last


def train_nn(
    params0: ModelParams,
    dataset,
    cfg: TrainConfig,
    act=Activation.RELU,
    lam: float | None = None,
    callback=None,
    extra_steps=(),
) -> Trajectory:
    """Theta_{t+1} = Theta_t - eta grad R_n(Theta_t), recorded every ``record_every`` steps.

    Steps listed in ``extra_steps`` are recorded (and snapshotted, when
    snapshots are on) as well.  Raises DivergenceError (carrying the partial trajectory) when the risk
    exceeds ``cfg.divergence_risk`` or stops being finite.
    """
    act = as_activation(act)
    if lam is None and cfg.eta_rule == "lambda_scaled":
        lam = lambda_hat(params0, dataset, act, cfg.lambda_source)
    eta = resolve_eta(cfg, params0.L, lam)
    p = params0.copy()
    traj = Trajectory(
        meta={
            "model": "skipnet",
            "eta": eta,
            "lambda_hat": lam,
            "L": params0.L,
            "d": params0.d,
            "m": params0.m,
            "act": act.value,
            "config": cfg.to_dict(),
        }
    )
    extra_steps = frozenset(int(s) for s in extra_steps)
    if cfg.snapshot_every:
        traj.snapshots[0] = params0.copy()
    for step in range(cfg.steps + 1):
        risk, g = grad_risk(p, dataset, act)
        last = step == cfg.steps
        bad = not math.isfinite(risk) or risk > cfg.divergence_risk
        done = risk <= cfg.stop_risk
        forced = step in extra_steps
        if _should_record(step, cfg.record_every, last or bad or done or forced):
            traj.record(step, step * eta, risk, block_deviations(p, params0), p.a_stack())
            if callback is not None:
                callback(step, p, risk)
        if cfg.snapshot_every and (step % cfg.snapshot_every == 0 or forced):
            traj.snapshots[step] = p.copy()
        if bad:
            traj.meta["status"] = "diverged"
            raise DivergenceError(
                f"risk {risk:.3e} exceeded {cfg.divergence_risk:.1e} at step {step} "
                f"(eta = {eta:.3e}); the step size is too large",
                traj,
            )
        if done or last:
            traj.meta["status"] = "converged" if done else "budget"
            if cfg.snapshot_every and step not in traj.snapshots:
                traj.snapshots[step] = p.copy()
            break
        p.a -= eta * g.a
        p.B -= eta * g.B
        p.C -= eta * g.C
        p.r -= eta * g.r
    traj.meta["final_risk"] = traj.final_risk
    traj.final = p
    return traj


def euler_flow(
    params0: ModelParams,
    dataset,
    eta_fine: float,
    horizon: float,
    act=Activation.RELU,
    eta_ref: float | None = None,
    record_every: int = 1,
    lam: float | None = None,
) -> Trajectory:
    """Forward-Euler approximation of the gradient flow up to time ``horizon``.

    ``eta_ref`` is the discrete step this flow is compared against (default:
    the lambda-scaled rule with kappa = 0.5); ``eta_fine`` may be at most a
    tenth of it.
    """
    if eta_ref is None:
        if lam is None:
            lam = lambda_hat(params0, dataset, act)
        eta_ref = 0.5 * lam / params0.L
    if eta_fine > eta_ref / 10 * (1 + 1e-12):
        raise ParameterError(f"eta_fine {eta_fine:.3e} must be at most eta_ref/10 = {eta_ref / 10:.3e}")
    steps = max(1, int(math.ceil(horizon / eta_fine - 1e-9)))
    cfg = TrainConfig(
        eta=eta_fine, steps=steps, eta_rule="explicit", record_every=record_every, stop_risk=0.0
    )
    traj = train_nn(params0, dataset, cfg, act)
    traj.meta["model"] = "skipnet-flow"
    traj.meta["horizon"] = horizon
    return traj


# ----------------------------------------------------------------------
# random-feature model
# ----------------------------------------------------------------------


def train_rf(
    rf0: RandomFeatureParams,
    dataset,
    cfg: TrainConfig,
    lam: float | None = None,
    L: int | None = None,
    eta: float | None = None,
    extra_steps=(),
) -> Trajectory:
    """Gradient descent on the convex RF risk; a_0 is taken from ``rf0``.

    ``eta`` overrides the config (used to share the deep net's step size);
    otherwise a lambda-scaled rule needs ``lam`` and ``L``.
    """
    if eta is None:
        if cfg.eta_rule == "lambda_scaled" and (lam is None or L is None):
            raise ParameterError("the lambda-scaled rule needs lam and L for the RF model")
        eta = resolve_eta(cfg, L or 1, lam)
    Phi = rf0.features(dataset.X)
    a0 = rf0.a.copy()
    rf = rf0.copy()
    traj = Trajectory(
        meta={"model": "rf", "eta": eta, "lambda_hat": lam, "n_features": len(a0), "config": cfg.to_dict()}
    )
    zero = {"r": 0.0, "B": 0.0, "C": 0.0}
    extra_steps = frozenset(int(s) for s in extra_steps)
    for step in range(cfg.steps + 1):
        risk, g = rf_grad_risk(rf, dataset, Phi)
        last = step == cfg.steps
        bad = not math.isfinite(risk) or risk > cfg.divergence_risk
        done = risk <= cfg.stop_risk
        if _should_record(step, cfg.record_every, last or bad or done or step in extra_steps):
            diff = rf.a - a0
            if L:
                dev_a = float(np.max(np.linalg.norm(diff.reshape(L - 1, -1), axis=1)))
            else:
                dev_a = float(np.linalg.norm(diff))
            traj.record(step, step * eta, risk, {"a": dev_a, **zero}, rf.a)
        if bad:
            traj.meta["status"] = "diverged"
            raise DivergenceError(f"RF risk {risk:.3e} diverged at step {step}", traj)
        if done or last:
            traj.meta["status"] = "converged" if done else "budget"
            break
        rf.a -= eta * g
    traj.meta["final_risk"] = traj.final_risk
    traj.final = rf
    return traj


# ----------------------------------------------------------------------
# rate fits
# ----------------------------------------------------------------------


def fit_log_rate(traj: Trajectory, first: int = 0, last: int | None = None, use_time=False) -> float:
    """Least-squares slope of -log(risk) against step (or time)."""
    xs = np.array(traj.times if use_time else traj.steps, dtype=np.float64)
    rs = np.array(traj.risks)
    sel = (xs >= first) & (rs > 0)
    if last is not None:
        sel &= xs <= last
    if sel.sum() < 2:
        raise ParameterError("need at least two positive risks to fit a rate")
    slope = np.polyfit(xs[sel], np.log(rs[sel]), 1)[0]
    return float(-slope)
