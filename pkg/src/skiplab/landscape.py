"""Numerical checks of the landscape bounds around the initialization.

Every check draws a family of probes Theta in the neighborhood
I_c(Theta_0) = {every per-layer block within c/L of its initial value}
and reports the worst observed left-hand side against the bound.  Boundary
probes (every block exactly at radius c/L) are the default.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .activations import Activation, as_activation
from .data import sample_sphere
from .errors import InputError, ParameterError, PreconditionError
from .kernelgram import gram_matrix, min_eigenvalue
from .netcore import ModelParams, batch_traces, block_deviations, grad_risk, predict

DEFAULT_DELTA = 0.1
DEFAULT_INPUTS = 20


@dataclass(frozen=True)
class NeighborhoodSpec:
    c: float
    L: int

    @property
    def eps_c(self) -> float:
        return self.c / self.L

    def validate(self):
        if self.c < 0:
            raise ParameterError(f"c must be non-negative (got {self.c})")
        if self.eps_c > 1:
            raise ParameterError(f"c/L = {self.eps_c:.3g} exceeds 1")


@dataclass
class BoundReport:
    bound_name: str
    lhs_max: float
    rhs: float
    n_trials: int
    info: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs_max

    @property
    def passed(self) -> bool:
        return bool(self.margin >= 0)

    def to_dict(self) -> dict:
        return {
            "bound_name": self.bound_name,
            "lhs_max": self.lhs_max,
            "rhs": self.rhs,
            "margin": self.margin,
            "n_trials": self.n_trials,
            "pass": self.passed,
            **({"info": self.info} if self.info else {}),
        }


def write_diagnostics(reports, path, extra=None):
    """Append-style run diagnostics: a JSON document with every report."""
    doc = dict(extra or {})
    doc["reports"] = [r.to_dict() for r in reports]
    doc["all_pass"] = all(r.passed for r in reports)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc


# ----------------------------------------------------------------------
# neighborhood sampling
# ----------------------------------------------------------------------


def _unit_blocks(rng, shape):
    """Random directions, one per layer, unit Frobenius norm per layer."""
    D = rng.standard_normal(shape)
    axes = tuple(range(1, D.ndim))
    D /= np.sqrt(np.sum(D * D, axis=axes, keepdims=True))
    return D


def sample_in_neighborhood(params0: ModelParams, c: float, seed: int, interior: bool = False) -> ModelParams:
    """A point of I_c(Theta_0).

    Every block of every layer is moved along an independent random direction
    by exactly c/L (or, with ``interior``, by c/L times a uniform factor).
    """
    spec = NeighborhoodSpec(float(c), params0.L)
    spec.validate()
    if spec.eps_c == 0:
        return params0.copy()
    rng = np.random.default_rng(seed)
    K = params0.n_layers
    out = []
    for blk in (params0.a, params0.B, params0.C, params0.r):
        D = _unit_blocks(rng, blk.shape)
        radius = np.full(K, spec.eps_c)
        if interior:
            radius = radius * rng.uniform(0.0, 1.0, K)
        D *= radius.reshape((K,) + (1,) * (blk.ndim - 1))
        out.append(blk + D)
    p = ModelParams(*out)
    if not in_neighborhood(p, params0, spec.c):
        raise ParameterError("sampled point left the neighborhood")  # pragma: no cover
    return p


def in_neighborhood(params: ModelParams, params0: ModelParams, c: float, rtol: float = 1e-12) -> bool:
    eps = c / params0.L
    return max(block_deviations(params, params0).values()) <= eps * (1 + rtol) + 1e-300


def _probe_seeds(seed, n_probes):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_probes)]


def _probe_inputs(d, n_inputs, seed):
    return sample_sphere(n_inputs, d, np.random.default_rng([seed, 7919]))


# ----------------------------------------------------------------------
# forward / backward stability
# ----------------------------------------------------------------------


def _gate(L, need, label):
    if L < need:
        raise PreconditionError(f"{label} requires L >= {need:g} (got L = {L})")


def check_forward_stability(
    params0, c, n_probes=200, seed=0, act=Activation.RELU, n_inputs=DEFAULT_INPUTS, interior=False
):
    """Worst per-layer deviations of y, z and g against 4c, 4c/L and 6c^2/L."""
    L = params0.L
    _gate(L, 4 * c * c, "forward stability")
    act = as_activation(act)
    X = _probe_inputs(params0.d, n_inputs, seed)
    base = batch_traces(params0, X, act, adjoints=False)
    worst = np.zeros(3)
    for s in _probe_seeds(seed, n_probes):
        p = sample_in_neighborhood(params0, c, s, interior)
        tr = batch_traces(p, X, act, adjoints=False)
        worst[0] = max(worst[0], np.max(np.abs(tr["y"] - base["y"])))
        worst[1] = max(worst[1], np.max(np.linalg.norm(tr["z"] - base["z"], axis=2)))
        worst[2] = max(worst[2], np.max(np.linalg.norm(tr["g"] - base["g"], axis=2)))
    trials = n_probes * n_inputs
    info = {"c": c, "L": L}
    return (
        BoundReport("forward_y", float(worst[0]), 4.0 * c, trials, info),
        BoundReport("forward_z", float(worst[1]), 4.0 * c / L, trials, info),
        BoundReport("forward_g", float(worst[2]), 6.0 * c * c / L, trials, info),
    )


def check_backward_stability(
    params0, c, n_probes=200, seed=0, act=Activation.RELU, n_inputs=DEFAULT_INPUTS, interior=False
):
    """Worst |alpha - 1|, |beta|, |gamma| against 5c/L, 4c/L, 3c/L."""
    L = params0.L
    _gate(L, 6 * c * c, "backward stability")
    act = as_activation(act)
    X = _probe_inputs(params0.d, n_inputs, seed)
    worst = np.zeros(3)
    for s in _probe_seeds(seed, n_probes):
        p = sample_in_neighborhood(params0, c, s, interior)
        tr = batch_traces(p, X, act, adjoints=True)
        worst[0] = max(worst[0], np.max(np.abs(tr["alpha"] - 1.0)))
        worst[1] = max(worst[1], np.max(np.linalg.norm(tr["beta"], axis=2)))
        worst[2] = max(worst[2], np.max(np.linalg.norm(tr["gamma"], axis=2)))
    trials = n_probes * n_inputs
    info = {"c": c, "L": L}
    return (
        BoundReport("backward_alpha", float(worst[0]), 5.0 * c / L, trials, info),
        BoundReport("backward_beta", float(worst[1]), 4.0 * c / L, trials, info),
        BoundReport("backward_gamma", float(worst[2]), 3.0 * c / L, trials, info),
    )


# ----------------------------------------------------------------------
# gradient bounds and the Gram matrix, on one probe family
# ----------------------------------------------------------------------


def lower_bound_gate(n, m, lam, c, delta=DEFAULT_DELTA) -> float:
    """Depth above which the gradient lower bound is proved."""
    return max(8.0 * math.log(n * n / delta) / (m * lam * lam), 200.0 * c * c / lam)


def gram_gate(n, m, lam, delta=DEFAULT_DELTA) -> int:
    """Depth above which lambda_min(H(Theta_0)) >= 3 lambda / 4 w.h.p."""
    return int(math.ceil(8.0 * math.log(n * n / delta) / (m * lam * lam)))


def _ratio(num, den):
    if num == 0.0:
        return 0.0
    return num / den if den > 0 else math.inf


def probe_landscape(
    params0,
    c,
    dataset,
    n_probes=100,
    seed=0,
    act=Activation.RELU,
    delta=DEFAULT_DELTA,
    lam_n=None,
    strict_gates=False,
    include_init=True,
    interior=False,
) -> dict:
    """Gradient bounds, Gram drift and the Gram eigenvalue floor.

    All reports share one probe family (Theta_0 itself first when
    ``include_init``).  Keys: ``grad_upper_ar``, ``grad_upper_BC``,
    ``grad_lower``, ``grad_identity``, ``gram_quadratic_form``,
    ``gram_eig_floor``, ``gram_drift``.

    The lower bound uses lam_hat = (2/3) lambda_min(H(Theta_0)).  Its depth
    gate uses ``lam_n`` (default: the dataset's stored kernel eigenvalue,
    else lam_hat); outside the gate it raises only with ``strict_gates``,
    otherwise the report records that the gate was not met.
    """
    L, m, n = params0.L, params0.m, dataset.n
    _gate(L, 100 * c * c, "the gradient upper bounds")
    act = as_activation(act)
    H0 = gram_matrix(params0, dataset, act)
    lam_H0, _ = min_eigenvalue(H0)
    lam_hat = (2.0 / 3.0) * lam_H0
    if lam_n is None:
        lam_n = dataset.lambda_K if getattr(dataset, "lambda_K", None) else lam_hat
    gate = lower_bound_gate(n, m, lam_n, c, delta) if lam_n > 0 else math.inf
    gate_ok = L >= gate
    if strict_gates and not gate_ok:
        raise PreconditionError(f"the gradient lower bound requires L >= {gate:.4g} (got L = {L})")

    probes = [params0.copy()] if include_init else []
    probes += [sample_in_neighborhood(params0, c, s, interior) for s in _probe_seeds(seed, n_probes)]

    w = {k: 0.0 for k in ("ar", "BC", "lower", "ident", "qf", "floor", "drift")}
    block_worst = {k: 0.0 for k in ("a", "r", "B", "C")}
    for p in probes:
        risk, g, e = grad_risk(p, dataset, act, return_residuals=True)
        sq = g.sq_norms()
        for k in block_worst:
            block_worst[k] = max(block_worst[k], _ratio(float(np.max(sq[k])), risk))
        total = g.total_sq_norm()
        H = gram_matrix(p, dataset, act)
        lam_H, _ = min_eigenvalue(H)
        # sum_l |grad_{a_l} R|^2 = (L/n) e^T H e exactly
        qf = L / n * float(e @ H @ e)
        a_sq = float(np.sum(sq["a"]))
        w["qf"] = max(w["qf"], abs(a_sq - qf) / max(qf, 1e-300) if qf > 0 else a_sq)
        w["lower"] = max(w["lower"], _ratio(lam_hat * L / 2.0 * risk, total))
        w["ident"] = max(w["ident"], _ratio(L * lam_H * risk, total))
        w["floor"] = max(w["floor"], _ratio(lam_H0 / 2.0, lam_H))
        w["drift"] = max(w["drift"], float(np.max(np.abs(H - H0))))
    w["ar"] = max(block_worst["a"], block_worst["r"])
    w["BC"] = max(block_worst["B"], block_worst["C"])

    trials = len(probes)
    base = {"c": c, "L": L, "lambda_min_H0": lam_H0}
    return {
        "grad_upper_ar": BoundReport(
            "grad_upper_ar", w["ar"], 1.0 + 50.0 * c * c / L, trials,
            {**base, "normalized_by": "risk", "worst_a": block_worst["a"], "worst_r": block_worst["r"]},
        ),
        "grad_upper_BC": BoundReport(
            "grad_upper_BC", w["BC"], 20.0 * c * c / L**2, trials,
            {**base, "normalized_by": "risk", "worst_B": block_worst["B"], "worst_C": block_worst["C"]},
        ),
        "grad_lower": BoundReport(
            "grad_lower", w["lower"], 1.0, trials,
            {
                **base,
                "form": "(lam L / 2) R / |grad R|^2",
                "lambda_used": lam_hat,
                "lambda_rule": "(2/3) lambda_min(H(theta_0))",
                "lambda_gate": lam_n,
                "gate_L": gate,
                "gate_satisfied": gate_ok,
            },
        ),
        "grad_identity": BoundReport(
            "grad_identity", w["ident"], 1.0, trials, {**base, "form": "L lambda_min(H) R / |grad R|^2"}
        ),
        "gram_quadratic_form": BoundReport(
            "gram_quadratic_form", w["qf"], 1e-10, trials,
            {**base, "form": "relative gap between sum_l |grad_a_l R|^2 and (L/n) e^T H e"},
        ),
        "gram_eig_floor": BoundReport(
            "gram_eig_floor", w["floor"], 1.0, trials, {**base, "form": "lambda_min(H0) / (2 lambda_min(H))"}
        ),
        "gram_drift": BoundReport("gram_drift", w["drift"], 50.0 * c * c / (n * L), trials, base),
    }


def check_gradient_bounds(params0, c, dataset, n_probes=100, seed=0, act=Activation.RELU, **kw):
    """(a/r upper, B/C upper, lower) reports; see ``probe_landscape``."""
    r = probe_landscape(params0, c, dataset, n_probes, seed, act, **kw)
    return r["grad_upper_ar"], r["grad_upper_BC"], r["grad_lower"]


# ----------------------------------------------------------------------
# coupling between the deep net and the random-feature model
# ----------------------------------------------------------------------


@dataclass
class CouplingSeries:
    t: np.ndarray
    a_gap: np.ndarray
    f_gap_theta: np.ndarray
    f_gap_traj: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "a_gap", "f_gap_theta", "f_gap_traj"])
            for row in zip(self.t, self.a_gap, self.f_gap_theta, self.f_gap_traj):
                w.writerow([format(float(v), ".17g") for v in row])

    def sup(self, key) -> float:
        return float(np.max(getattr(self, key)))


def coupling_gap(traj_nn, traj_rf, test_points, act=Activation.RELU) -> CouplingSeries:
    """Distance between the deep net and its random-feature twin over time.

    ``traj_nn`` needs parameter snapshots; ``traj_rf`` needs the recorded
    coefficient vectors and its final ``RandomFeatureParams`` (for B0).
    a_gap = |a_t - a~_t|; f_gap_theta compares f(x; Theta_t) with the RF
    model evaluated at the deep net's own a_t, f_gap_traj with the RF
    trajectory's a~_t; both are maxima over ``test_points``.
    """
    act = as_activation(act)
    if not traj_nn.snapshots:
        raise InputError("the deep-net trajectory has no parameter snapshots")
    rf = traj_rf.final
    if rf is None or not traj_rf.a_stack:
        raise InputError("the RF trajectory lacks coefficients or its feature matrix")
    eta_nn, eta_rf = traj_nn.meta.get("eta"), traj_rf.meta.get("eta")
    if eta_nn is None or eta_rf is None or not math.isclose(eta_nn, eta_rf, rel_tol=1e-12):
        raise InputError(f"step sizes differ ({eta_nn} vs {eta_rf})")
    p0 = traj_nn.snapshots[min(traj_nn.snapshots)]
    if not np.array_equal(p0.B_stack(), rf.B0):
        raise InputError("the two trajectories do not share B_0")
    rf_steps = {s: i for i, s in enumerate(traj_rf.steps)}
    steps = [s for s in sorted(traj_nn.snapshots) if s in rf_steps]
    if not steps or steps[0] != 0:
        raise InputError("snapshots are not aligned with the RF record (step 0 missing)")
    X = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    Phi = rf.features(X)
    out = np.empty((len(steps), 4))
    for i, s in enumerate(steps):
        p = traj_nn.snapshots[s]
        a_t = p.a_stack()
        a_rf = traj_rf.a_stack[rf_steps[s]]
        f = predict(p, X, act)
        out[i] = (
            s * eta_nn,
            np.linalg.norm(a_t - a_rf),
            np.max(np.abs(f - Phi @ a_t)),
            np.max(np.abs(f - Phi @ a_rf)),
        )
    return CouplingSeries(*out.T.copy())


# ----------------------------------------------------------------------
# population risk
# ----------------------------------------------------------------------


def population_risk(predictor, target, d, n_test=1000, seed=0, scale=1.0):
    """(1/2) E[(f(x) - scale * f*(x))^2] over fresh uniform-sphere inputs, with its SE.

    ``predictor`` maps an (n, d) array to n values; ``scale`` is the label
    scale of the training set.
    """
    if n_test < 1000:
        raise ParameterError(f"n_test must be at least 1000 (got {n_test})")
    X = sample_sphere(n_test, d, np.random.default_rng(seed))
    fstar, _ = target.evaluate(X)
    sq = 0.5 * (np.asarray(predictor(X), dtype=np.float64) - scale * fstar) ** 2
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(n_test))
