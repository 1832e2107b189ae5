"""Random-feature reference model built from the frozen initial B blocks."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .activations import Activation, as_activation
from .errors import DimensionError, InputError
from .netcore import ModelParams, check_unit


@dataclass
class RandomFeatureParams:
    """f~(x) = a . sigma(B0 x) with a of length m(L-1) and B0 of shape (m(L-1), d)."""

    a: np.ndarray
    B0: np.ndarray
    act: Activation = Activation.RELU
    init_seed: int | None = None

    def __post_init__(self):
        self.a = np.ascontiguousarray(self.a, dtype=np.float64).reshape(-1)
        self.B0 = np.asarray(self.B0, dtype=np.float64)
        self.B0.setflags(write=False)
        self.act = as_activation(self.act)
        if self.B0.ndim != 2 or self.B0.shape[0] != self.a.shape[0]:
            raise DimensionError(f"a has length {self.a.shape[0]} but B0 has shape {self.B0.shape}")

    @classmethod
    def from_model(cls, params: ModelParams, act=Activation.RELU, init_seed=None):
        """Reference model sharing the a-blocks and the B-blocks of ``params``."""
        return cls(params.a_stack(), params.B_stack(), act, init_seed)

    def copy(self) -> "RandomFeatureParams":
        return RandomFeatureParams(self.a.copy(), self.B0, self.act, self.init_seed)

    def features(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.B0.shape[1]:
            raise DimensionError(f"inputs have dimension {X.shape[1]}, B0 expects {self.B0.shape[1]}")
        return self.act(X @ self.B0.T)

    def to_dict(self) -> dict:
        return {
            "a": self.a.tolist(),
            "act": self.act.value,
            "init_seed": self.init_seed,
            "d": int(self.B0.shape[1]),
            "n_features": int(self.B0.shape[0]),
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def rf_predict(rf: RandomFeatureParams, x):
    x = np.asarray(x, dtype=np.float64)
    check_unit(x)
    out = rf.features(x) @ rf.a
    return float(out[0]) if x.ndim == 1 else out


def rf_risk(rf: RandomFeatureParams, dataset, a=None) -> float:
    a = rf.a if a is None else a
    e = rf.features(dataset.X) @ a - dataset.y
    return float(e @ e / (2 * len(e)))


def rf_grad_risk(rf: RandomFeatureParams, dataset, features=None):
    """Risk (1/2n)|Phi a - y|^2 and gradient (1/n) Phi^T (Phi a - y)."""
    if len(dataset.y) == 0:
        raise InputError("dataset is empty")
    Phi = rf.features(dataset.X) if features is None else features
    e = Phi @ rf.a - dataset.y
    n = len(e)
    return float(e @ e / (2 * n)), Phi.T @ e / n


def feature_gram_max_eig(rf: RandomFeatureParams, dataset) -> float:
    """Largest eigenvalue of Phi^T Phi / n, the curvature of the RF risk."""
    Phi = rf.features(dataset.X)
    s = np.linalg.svd(Phi, compute_uv=False)
    return float(s[0] ** 2 / Phi.shape[0])


def least_squares_coefficients(rf: RandomFeatureParams, dataset, a0=None) -> np.ndarray:
    """Minimizer of the RF risk closest to ``a0`` (the limit of GD from ``a0``)."""
    Phi = rf.features(dataset.X)
    a0 = np.zeros(Phi.shape[1]) if a0 is None else a0
    delta, *_ = np.linalg.lstsq(Phi, dataset.y - Phi @ a0, rcond=None)
    return a0 + delta


def construct_astar(astar_fn, B0, m: int, L: int, act=Activation.RELU) -> np.ndarray:
    """Coefficients a*_j = a*(sqrt(m) b_j) / (sqrt(m) L) for the rows b_j of B0.

    With the initialization rows on the sphere of radius 1/sqrt(m), the
    rescaled rows are unit vectors and f~(x; a*) is a Monte Carlo average of
    a*(w) sigma(w . x).
    """
    B0 = np.asarray(B0, dtype=np.float64)
    W = np.sqrt(m) * B0
    return astar_fn(W, act) / (np.sqrt(m) * L)
