"""A plain residual network, its frozen-V twin, and path-norm regularization.

    h_1     = V0 x                      V0 = [I_d; 0], shape (d+1, d)
    h_{l+1} = h_l + U_l sigma(V_l h_l)  l = 1 .. L-1
    f(x)    = w . h_L                   w = (0, ..., 0, 1)

With ``frozen_V`` only the U blocks are trained, which turns the model into
a compositional random-feature model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .activations import Activation, as_activation
from .errors import DimensionError, DivergenceError, ParameterError
from .netcore import check_unit
from .trainer import TrainConfig, Trajectory

MODES = ("plain-gd", "frozen-V-gd", "pathnorm-adam")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ResNetParams:
    """U (L-1, d+1, m) and V (L-1, m, d+1); V0 and w are implied by d."""

    U: np.ndarray
    V: np.ndarray
    frozen_V: bool = False

    def __post_init__(self):
        self.U = np.ascontiguousarray(self.U, dtype=np.float64)
        self.V = np.ascontiguousarray(self.V, dtype=np.float64)
        if self.U.ndim != 3 or self.V.ndim != 3:
            raise DimensionError("U and V must be stacks of matrices")
        K, D, m = self.U.shape
        if self.V.shape != (K, m, D):
            raise DimensionError(f"V has shape {self.V.shape}, expected {(K, m, D)}")
        if D < 2:
            raise DimensionError("need d >= 1")

    @property
    def d(self) -> int:
        return self.U.shape[1] - 1

    @property
    def m(self) -> int:
        return self.U.shape[2]

    @property
    def L(self) -> int:
        return self.U.shape[0] + 1

    @property
    def V0(self) -> np.ndarray:
        V0 = np.zeros((self.d + 1, self.d))
        V0[: self.d] = np.eye(self.d)
        V0.setflags(write=False)
        return V0

    @property
    def w(self) -> np.ndarray:
        w = np.zeros(self.d + 1)
        w[-1] = 1.0
        w.setflags(write=False)
        return w

    def copy(self) -> "ResNetParams":
        return ResNetParams(self.U.copy(), self.V.copy(), self.frozen_V)

    def to_dict(self) -> dict:
        return {"U": self.U.tolist(), "V": self.V.tolist(), "frozen_V": self.frozen_V}

    @classmethod
    def from_dict(cls, doc) -> "ResNetParams":
        return cls(np.array(doc["U"]), np.array(doc["V"]), bool(doc.get("frozen_V", False)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def resnet_init(d: int, m: int, L: int, seed: int, frozen_V: bool = False) -> ResNetParams:
    """U = 0 and V entries i.i.d. N(0, 1/m)."""
    if d < 1 or m < 1 or L < 2:
        raise ParameterError(f"need d, m >= 1 and L >= 2 (got d={d}, m={m}, L={L})")
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((L - 1, m, d + 1)) / math.sqrt(m)
    return ResNetParams(np.zeros((L - 1, d + 1, m)), V, frozen_V)


@dataclass
class ResNetTrace:
    h: np.ndarray
    pre: np.ndarray
    g: np.ndarray

    @property
    def f(self) -> float:
        return float(self.h[-1, -1])


def resnet_forward(p: ResNetParams, x, act=Activation.RELU):
    act = as_activation(act)
    x = check_unit(np.ascontiguousarray(x, dtype=np.float64))
    if x.shape != (p.d,):
        raise DimensionError(f"input has shape {x.shape}, expected ({p.d},)")
    K, D, m = p.U.shape
    h = np.empty((K + 1, D))
    pre = np.empty((K, m))
    g = np.empty((K, m))
    f = _kernels.res_forward_point(p.U, p.V, x, act.code, h, pre, g)
    return float(f), ResNetTrace(h, pre, g)


def resnet_predict(p: ResNetParams, X, act=Activation.RELU) -> np.ndarray:
    act = as_activation(act)
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    if X.shape[1] != p.d:
        raise DimensionError(f"inputs have dimension {X.shape[1]}, model expects {p.d}")
    return _kernels.res_predict(p.U, p.V, X, act.code)


def resnet_grad_risk(p: ResNetParams, dataset, act=Activation.RELU):
    """Risk (1/2n)|f - y|^2 and gradients (gU, gV); gV is zero when V is frozen."""
    act = as_activation(act)
    X = np.ascontiguousarray(dataset.X, dtype=np.float64)
    y = np.ascontiguousarray(dataset.y, dtype=np.float64)
    if X.shape[1] != p.d:
        raise DimensionError(f"dataset dimension {X.shape[1]} != model dimension {p.d}")
    check_unit(X)
    gU = np.empty_like(p.U)
    gV = np.empty_like(p.V)
    resid = np.empty(X.shape[0])
    risk = _kernels.res_grad_risk(p.U, p.V, X, y, act.code, gU, gV, resid)
    if p.frozen_V:
        gV[:] = 0.0
    return float(risk), gU, gV


# ----------------------------------------------------------------------
# path norm
# ----------------------------------------------------------------------


def _path_vectors(p: ResNetParams):
    """Right vectors rho_l = M_{l-1} ... M_1 |V0| 1 and left rows ell_l."""
    aU, aV = np.abs(p.U), np.abs(p.V)
    K = aU.shape[0]
    rho = np.empty((K + 1, p.d + 1))
    rho[0] = np.abs(p.V0).sum(axis=1)
    for k in range(K):
        rho[k + 1] = rho[k] + aU[k] @ (aV[k] @ rho[k])
    ell = np.empty((K + 1, p.d + 1))
    ell[K] = np.abs(p.w)
    for k in range(K - 1, -1, -1):
        ell[k] = ell[k + 1] + (ell[k + 1] @ aU[k]) @ aV[k]
    return rho, ell


def path_norm(p: ResNetParams) -> float:
    """|w|^T prod_l (I + |U_l||V_l|) |V0|, summed over the d input coordinates."""
    rho, _ = _path_vectors(p)
    return float(abs(p.w) @ rho[-1])


def path_norm_subgrad(p: ResNetParams):
    """Subgradient of ``path_norm`` with sign(0) = 0."""
    aU, aV = np.abs(p.U), np.abs(p.V)
    rho, ell = _path_vectors(p)
    K = aU.shape[0]
    gU = np.empty_like(p.U)
    gV = np.empty_like(p.V)
    for k in range(K):
        gU[k] = np.outer(ell[k + 1], aV[k] @ rho[k])
        gV[k] = np.outer(aU[k].T @ ell[k + 1], rho[k])
    return gU * np.sign(p.U), gV * np.sign(p.V)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


def resnet_deviations(p: ResNetParams, p0: ResNetParams) -> dict:
    """Per-layer deviations mapped onto the skip-net column names.

    a: last row of U (the readout path), C: the other rows of U,
    B: V restricted to the first d inputs, r: the last column of V.
    """
    dU = p.U - p0.U
    dV = p.V - p0.V
    return {
        "a": float(np.max(np.linalg.norm(dU[:, -1, :], axis=1))),
        "r": float(np.max(np.linalg.norm(dV[:, :, -1], axis=1))),
        "B": float(np.max(np.linalg.norm(dV[:, :, :-1], axis=(1, 2)))),
        "C": float(np.max(np.linalg.norm(dU[:, :-1, :], axis=(1, 2)))),
    }


class Adam:
    """The published Adam update with bias correction."""

    def __init__(self, shapes, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for x, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            x -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_resnet(
    p0: ResNetParams,
    dataset,
    cfg: TrainConfig,
    mode: str = "plain-gd",
    lambda_reg: float = 0.0,
    act=Activation.RELU,
) -> Trajectory:
    """Full-batch training in one of three modes.

    plain-gd and frozen-V-gd run gradient descent on the empirical risk
    (the latter only on U); pathnorm-adam runs Adam on
    J = R + (lambda / sqrt(n)) |Theta|_P.  The step size is ``cfg.eta``.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
    if cfg.eta_rule != "explicit":
        raise ParameterError("ResNet training needs an explicit step size")
    if mode != "pathnorm-adam" and lambda_reg:
        raise ParameterError(f"lambda_reg is only used by pathnorm-adam (mode {mode!r})")
    act = as_activation(act)
    p = p0.copy()
    p.frozen_V = mode == "frozen-V-gd"
    base = replace(p0, frozen_V=p.frozen_V)
    eta = float(cfg.eta)
    n = dataset.n
    coef = lambda_reg / math.sqrt(n)
    adam = Adam([p.U.shape, p.V.shape], eta) if mode == "pathnorm-adam" else None
    traj = Trajectory(
        meta={
            "model": "resnet-frozenV" if p.frozen_V else "resnet",
            "mode": mode,
            "eta": eta,
            "lambda_reg": lambda_reg,
            "L": p.L,
            "d": p.d,
            "m": p.m,
            "act": act.value,
            "config": cfg.to_dict(),
        }
    )
    if cfg.snapshot_every:
        traj.snapshots[0] = p.copy()
    for step in range(cfg.steps + 1):
        risk, gU, gV = resnet_grad_risk(p, dataset, act)
        extra = {}
        if adam is not None:
            pn = path_norm(p)
            extra = {"path_norm": pn, "J": risk + coef * pn}
        last = step == cfg.steps
        bad = not math.isfinite(risk) or risk > cfg.divergence_risk
        done = adam is None and risk <= cfg.stop_risk
        if step % cfg.record_every == 0 or last or bad or done:
            traj.record(step, step * eta, risk, resnet_deviations(p, base), **extra)
        if cfg.snapshot_every and step % cfg.snapshot_every == 0:
            traj.snapshots[step] = p.copy()
        if bad:
            traj.meta["status"] = "diverged"
            raise DivergenceError(f"ResNet risk {risk:.3e} diverged at step {step} (eta = {eta:.3e})", traj)
        if done or last:
            traj.meta["status"] = "converged" if done else "budget"
            break
        if adam is not None:
            if coef:
                sU, sV = path_norm_subgrad(p)
                gU = gU + coef * sU
                gV = gV + coef * sV
            adam.step([p.U, p.V], [gU, gV])
        else:
            p.U -= eta * gU
            if not p.frozen_V:
                p.V -= eta * gV
    traj.meta["final_risk"] = traj.final_risk
    traj.final = p
    return traj


def risk_gap(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """sup over shared recorded steps of |risk_a - risk_b|."""
    rb = dict(zip(traj_b.steps, traj_b.risks))
    gaps = [abs(r - rb[s]) for s, r in zip(traj_a.steps, traj_a.risks) if s in rb]
    if not gaps:
        raise ParameterError("the trajectories share no recorded step")
    return float(max(gaps))


def tune_step_size(p0, dataset, grid, steps, test_fn, act=Activation.RELU, mode="plain-gd"):
    """Pick the step size from ``grid`` with the smallest ``test_fn(final params)``.

    Diverging candidates are skipped; returns (best eta, {eta: score}).
    """
    scores = {}
    for eta in grid:
        cfg = TrainConfig(eta=eta, steps=steps, eta_rule="explicit", record_every=steps, stop_risk=0.0)
        try:
            traj = train_resnet(p0, dataset, cfg, mode, act=act)
        except DivergenceError:
            scores[eta] = math.inf
            continue
        scores[eta] = float(test_fn(traj.final))
    best = min(scores, key=lambda e: (scores[e], e))
    if not math.isfinite(scores[best]):
        raise DivergenceError("every step size in the grid diverged")
    return best, scores
