"""The deep skip-connection network: parameters, propagation, gradients.

The network has ``L - 1`` trainable layers.  With ``h = (z, y)`` split into
the first ``d`` coordinates and the last one::

    z_1 = x,  y_1 = 0
    z_{l+1} = x + C_l sigma(B_l z_l + r_l y_l)
    y_{l+1} = y_l + a_l . sigma(B_l z_l + r_l y_l)
    f(x) = y_L

The readout is fixed to ``(0, ..., 0, 1)`` and never trained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .activations import Activation, as_activation
from .errors import DimensionError, InputError, ParameterError, ValidationError

UNIT_TOL = 1e-12


@dataclass
class ModelParams:
    """Trainable blocks stacked along the layer axis.

    ``a`` is (K, m), ``B`` is (K, m, d), ``C`` is (K, d, m), ``r`` is (K, m)
    with ``K = L - 1``.
    """

    a: np.ndarray
    B: np.ndarray
    C: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        for name in ("a", "B", "C", "r"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        K, m, d = self.B.shape
        if K < 1:
            raise DimensionError("need at least one trainable layer (L >= 2)")
        if self.a.shape != (K, m) or self.r.shape != (K, m) or self.C.shape != (K, d, m):
            raise DimensionError(
                f"inconsistent block shapes a{self.a.shape} B{self.B.shape} "
                f"C{self.C.shape} r{self.r.shape}"
            )

    @property
    def d(self) -> int:
        return self.B.shape[2]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def L(self) -> int:
        return self.B.shape[0] + 1

    @property
    def n_layers(self) -> int:
        return self.B.shape[0]

    @property
    def readout(self) -> np.ndarray:
        w = np.zeros(self.d + 1)
        w[-1] = 1.0
        w.setflags(write=False)
        return w

    def copy(self) -> "ModelParams":
        return ModelParams(self.a.copy(), self.B.copy(), self.C.copy(), self.r.copy())

    def blocks(self):
        return {"a": self.a, "B": self.B, "C": self.C, "r": self.r}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.a.ravel(), self.B.ravel(), self.C.ravel(), self.r.ravel()])

    @classmethod
    def from_flat(cls, vec, d, m, L) -> "ModelParams":
        K = L - 1
        sizes = [K * m, K * m * d, K * d * m, K * m]
        parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
        return cls(
            parts[0].reshape(K, m),
            parts[1].reshape(K, m, d),
            parts[2].reshape(K, d, m),
            parts[3].reshape(K, m),
        )

    def a_stack(self) -> np.ndarray:
        return self.a.ravel().copy()

    def B_stack(self) -> np.ndarray:
        return self.B.reshape(-1, self.d).copy()

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        layers = [
            {
                "a": self.a[k].tolist(),
                "B": self.B[k].tolist(),
                "C": self.C[k].tolist(),
                "r": self.r[k].tolist(),
            }
            for k in range(self.n_layers)
        ]
        return {"d": self.d, "m": self.m, "L": self.L, "layers": layers}

    @classmethod
    def from_dict(cls, doc: dict, is_init: bool = False) -> "ModelParams":
        try:
            d, m, L = int(doc["d"]), int(doc["m"]), int(doc["L"])
            layers = doc["layers"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed parameter document: {exc}") from exc
        if len(layers) != L - 1:
            raise ValidationError(f"expected {L - 1} layers, found {len(layers)}")
        try:
            p = cls(
                np.array([lay["a"] for lay in layers], dtype=np.float64).reshape(L - 1, m),
                np.array([lay["B"] for lay in layers], dtype=np.float64).reshape(L - 1, m, d),
                np.array([lay["C"] for lay in layers], dtype=np.float64).reshape(L - 1, d, m),
                np.array([lay["r"] for lay in layers], dtype=np.float64).reshape(L - 1, m),
            )
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"layer block has the wrong shape: {exc}") from exc
        if is_init:
            check_init_invariants(p)
        return p

    def save(self, path, is_init: bool = False):
        doc = self.to_dict()
        doc["is_init"] = bool(is_init)
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(doc, is_init=bool(doc.get("is_init", False)))


def check_init_invariants(p: ModelParams, ulps: int = 4):
    if np.any(p.a) or np.any(p.C) or np.any(p.r):
        raise ValidationError("initialization must have a = C = r = 0")
    norms = np.linalg.norm(p.B, axis=2)
    target = 1.0 / np.sqrt(p.m)
    if np.max(np.abs(norms - target)) > ulps * np.spacing(target):
        raise ValidationError("initialization rows of B must have norm 1/sqrt(m)")


def _check_dims(d, m, L):
    if int(d) < 1 or int(m) < 1 or int(L) < 2:
        raise DimensionError(f"need d >= 1, m >= 1, L >= 2 (got d={d}, m={m}, L={L})")


def sample_init(d: int, m: int, L: int, seed: int) -> ModelParams:
    """Zero a, C, r; rows of B uniform on the sphere of radius 1/sqrt(m)."""
    _check_dims(d, m, L)
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((L - 1, m, d))
    B /= np.linalg.norm(B, axis=2, keepdims=True)
    B /= np.sqrt(m)
    K = L - 1
    return ModelParams(np.zeros((K, m)), B, np.zeros((K, d, m)), np.zeros((K, m)))


def sample_init_alt(d: int, m: int, L: int, seed: int, scale: float) -> ModelParams:
    """Gaussian B rows (covariance I/m); a, C, r uniform in [-scale/L, scale/L]."""
    _check_dims(d, m, L)
    if not 0.0 <= scale <= 1.0:
        raise ParameterError(f"scale must lie in [0, 1], got {scale}")
    rng = np.random.default_rng(seed)
    K = L - 1
    B = rng.standard_normal((K, m, d)) / np.sqrt(m)
    h = scale / L
    a = rng.uniform(-h, h, (K, m)) if scale > 0 else np.zeros((K, m))
    C = rng.uniform(-h, h, (K, d, m)) if scale > 0 else np.zeros((K, d, m))
    r = rng.uniform(-h, h, (K, m)) if scale > 0 else np.zeros((K, m))
    return ModelParams(a, B, C, r)


# ----------------------------------------------------------------------
# traces
# ----------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Per-layer neurons; index 0 is layer 1.  ``z`` and ``y`` have L rows."""

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    pre: np.ndarray
    g: np.ndarray

    @property
    def f(self) -> float:
        return float(self.y[-1])


@dataclass
class AdjointTrace:
    """Gradients of f with respect to the neurons.

    ``alpha`` (L,) and ``beta`` (L, d) are indexed like ``z``/``y``;
    ``gamma`` is the gradient with respect to g and ``delta`` the one with
    respect to the pre-activation, both (L - 1, m).
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray


@dataclass
class Gradients:
    a: np.ndarray
    B: np.ndarray
    C: np.ndarray
    r: np.ndarray

    def as_params(self) -> ModelParams:
        return ModelParams(self.a, self.B, self.C, self.r)

    def sq_norms(self) -> dict:
        """Per-layer squared norms of every block, each of length L - 1."""
        return {
            "a": np.sum(self.a**2, axis=1),
            "B": np.sum(self.B**2, axis=(1, 2)),
            "C": np.sum(self.C**2, axis=(1, 2)),
            "r": np.sum(self.r**2, axis=1),
        }

    def total_sq_norm(self) -> float:
        return float(sum(np.sum(v) for v in self.sq_norms().values()))


def check_unit(x, tol=UNIT_TOL, warn_only=False):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(np.atleast_2d(x), axis=1)
    bad = np.abs(norms - 1.0) > tol
    if np.any(bad):
        msg = f"inputs must be unit vectors (max |norm - 1| = {np.max(np.abs(norms - 1.0)):.3e})"
        if warn_only:
            import warnings

            warnings.warn(msg)
        else:
            raise InputError(msg)
    return x


def forward(params: ModelParams, x, act=Activation.RELU, warn_only=False) -> ForwardTrace:
    act = as_activation(act)
    x = check_unit(np.ascontiguousarray(x, dtype=np.float64), warn_only=warn_only)
    if x.shape != (params.d,):
        raise DimensionError(f"input has shape {x.shape}, expected ({params.d},)")
    K, m, d = params.n_layers, params.m, params.d
    z = np.empty((K + 1, d))
    y = np.empty(K + 1)
    pre = np.empty((K, m))
    g = np.empty((K, m))
    _kernels.skip_forward_point(params.a, params.B, params.C, params.r, x, act.code, z, y, pre, g)
    return ForwardTrace(x, z, y, pre, g)


def backward(params: ModelParams, trace: ForwardTrace, act=Activation.RELU) -> AdjointTrace:
    act = as_activation(act)
    K, m, d = params.n_layers, params.m, params.d
    if trace.pre.shape != (K, m) or trace.z.shape != (K + 1, d):
        raise DimensionError("trace does not match the parameter shapes")
    alpha = np.empty(K + 1)
    beta = np.empty((K + 1, d))
    gamma = np.empty((K, m))
    delta = np.empty((K, m))
    _kernels.skip_backward_point(
        params.a, params.B, params.C, params.r, act.code, trace.pre, alpha, beta, gamma, delta
    )
    return AdjointTrace(alpha, beta, gamma, delta)


def point_gradients(params: ModelParams, x, act=Activation.RELU) -> Gradients:
    """Gradient of f(x) itself (not of the risk) with respect to every block."""
    tr = forward(params, x, act)
    adj = backward(params, tr, act)
    K = params.n_layers
    return Gradients(
        a=adj.alpha[1:, None] * tr.g,
        B=adj.delta[:, :, None] * tr.z[:K, None, :],
        C=adj.beta[1:, :, None] * tr.g[:, None, :],
        r=adj.delta * tr.y[:K, None],
    )


def _xy(dataset):
    X = np.ascontiguousarray(dataset.X, dtype=np.float64)
    y = np.ascontiguousarray(dataset.y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("dataset is empty")
    return X, y


def grad_risk(params: ModelParams, dataset, act=Activation.RELU, return_residuals=False):
    """Empirical risk (1/2n)|f(X) - y|^2 and its full-batch gradient."""
    act = as_activation(act)
    X, y = _xy(dataset)
    if X.shape[1] != params.d:
        raise DimensionError(f"dataset dimension {X.shape[1]} != model dimension {params.d}")
    check_unit(X)
    ga = np.empty_like(params.a)
    gB = np.empty_like(params.B)
    gC = np.empty_like(params.C)
    gr = np.empty_like(params.r)
    resid = np.empty(X.shape[0])
    risk = _kernels.skip_grad_risk(
        params.a, params.B, params.C, params.r, X, y, act.code, ga, gB, gC, gr, resid
    )
    grads = Gradients(ga, gB, gC, gr)
    if return_residuals:
        return risk, grads, resid
    return risk, grads


def empirical_risk(params: ModelParams, dataset, act=Activation.RELU) -> float:
    X, y = _xy(dataset)
    e = predict(params, X, act) - y
    return float(e @ e / (2 * len(e)))


def predict(params: ModelParams, X, act=Activation.RELU) -> np.ndarray:
    act = as_activation(act)
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    return _kernels.skip_predict(params.a, params.B, params.C, params.r, X, act.code)


def a_features(params: ModelParams, X, act=Activation.RELU) -> np.ndarray:
    """Gradients of f(x_i) with respect to each a-block, shape (n, L - 1, m)."""
    act = as_activation(act)
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    return _kernels.skip_a_features(params.a, params.B, params.C, params.r, X, act.code)


def block_deviations(params: ModelParams, params0: ModelParams) -> dict:
    """Largest per-layer deviation of each block from ``params0``."""
    return {
        "a": float(np.max(np.linalg.norm(params.a - params0.a, axis=1))),
        "r": float(np.max(np.linalg.norm(params.r - params0.r, axis=1))),
        "B": float(np.max(np.linalg.norm(params.B - params0.B, axis=(1, 2)))),
        "C": float(np.max(np.linalg.norm(params.C - params0.C, axis=(1, 2)))),
    }


def batch_traces(params: ModelParams, X, act=Activation.RELU, adjoints=True):
    """Forward (and adjoint) traces for many inputs at once.

    Returns a dict of arrays with a leading point axis: ``z`` (n, L, d),
    ``y`` (n, L), ``pre`` and ``g`` (n, L-1, m) and, with ``adjoints``,
    ``alpha`` (n, L), ``beta`` (n, L, d), ``gamma`` and ``delta`` (n, L-1, m).
    """
    act = as_activation(act)
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    out = _kernels.skip_full_traces(
        params.a, params.B, params.C, params.r, X, act.code, bool(adjoints)
    )
    keys = ("z", "y", "pre", "g", "alpha", "beta", "gamma", "delta")
    res = dict(zip(keys, out))
    if not adjoints:
        for k in keys[4:]:
            del res[k]
    return res
