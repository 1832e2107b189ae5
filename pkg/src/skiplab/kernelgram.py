"""The activation kernel k0, the kernel matrix K, the Gram matrix H(theta).

k0(x, x') = E_w[sigma(w . x) sigma(w . x')] with w uniform on the sphere.
K is always a Monte Carlo mean over one shared sample of w, which keeps
every estimate positive semidefinite.  ReLU also has a closed form
(``k0_relu_exact``) used for exact target values and as a test oracle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .activations import Activation, as_activation
from .errors import InputError, ParameterError
from .netcore import ModelParams, a_features, check_unit

DEFAULT_SAMPLES = 200_000
_CHUNK = 1 << 16


@dataclass
class GramBundle:
    K: np.ndarray
    H: np.ndarray
    lambda_K: float
    lambda_H: float
    eig_residual: float

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "H": self.H.tolist(),
            "lambda_K": self.lambda_K,
            "lambda_H": self.lambda_H,
            "eig_residual": self.eig_residual,
        }


def _sphere_chunks(n_samples, d, seed):
    rng = np.random.default_rng(seed)
    left = n_samples
    while left > 0:
        k = min(left, _CHUNK)
        W = rng.standard_normal((k, d))
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        yield W
        left -= k


def k0_mc(x, xp, act=Activation.RELU, n_samples=DEFAULT_SAMPLES, seed=0):
    """Monte Carlo estimate of k0(x, x') and the standard error of the mean."""
    if n_samples < 1000:
        raise ParameterError(f"n_samples must be at least 1000 (got {n_samples})")
    act = as_activation(act)
    x = check_unit(np.asarray(x, dtype=np.float64))
    xp = check_unit(np.asarray(xp, dtype=np.float64))
    s = 0.0
    s2 = 0.0
    for W in _sphere_chunks(n_samples, x.shape[0], seed):
        prod = act(W @ x) * act(W @ xp)
        s += prod.sum()
        s2 += (prod * prod).sum()
    mean = s / n_samples
    var = max(s2 / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    return float(mean), float(np.sqrt(var / n_samples))


def k0_relu_exact(X, Xp) -> np.ndarray:
    """Closed form of k0 for ReLU with w uniform on S^{d-1}.

    For Gaussian w the degree-one arc-cosine identity gives
    E[relu(w.x) relu(w.x')] = (sin t + (pi - t) cos t) / (2 pi) for unit x, x'
    at angle t.  The integrand is 2-homogeneous in w and |w|^2 has mean d and
    is independent of w/|w|, so the sphere average is that value over d.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Xp = np.atleast_2d(np.asarray(Xp, dtype=np.float64))
    d = X.shape[1]
    cos = np.clip(X @ Xp.T, -1.0, 1.0)
    t = np.arccos(cos)
    return (np.sin(t) + (np.pi - t) * cos) / (2.0 * np.pi * d)


def kernel_matrix(dataset, act=Activation.RELU, n_samples=DEFAULT_SAMPLES, seed=0) -> np.ndarray:
    """K_ij = k0(x_i, x_j) / n, all pairs sharing one sample of w."""
    act = as_activation(act)
    X = check_unit(np.asarray(dataset.X, dtype=np.float64))
    n, d = X.shape
    if n_samples < 1000:
        raise ParameterError(f"n_samples must be at least 1000 (got {n_samples})")
    _, counts = np.unique(X, axis=0, return_counts=True)
    if np.any(counts > 1):
        warnings.warn("duplicate inputs: the kernel matrix is singular", stacklevel=2)
    K = np.zeros((n, n))
    for W in _sphere_chunks(n_samples, d, seed):
        F = act(W @ X.T)
        K += F.T @ F
    K /= n_samples * n
    return 0.5 * (K + K.T)


def gram_matrix(params: ModelParams, dataset, act=Activation.RELU) -> np.ndarray:
    """H_ij = (1/(nL)) sum_l <grad_{a_l} f(x_i), grad_{a_l} f(x_j)>."""
    X = check_unit(np.asarray(dataset.X, dtype=np.float64))
    n = X.shape[0]
    F = a_features(params, X, act).reshape(n, -1)
    H = F @ F.T / (n * params.L)
    return 0.5 * (H + H.T)


def init_gram_streaming(d, m, L, seed, dataset, act=Activation.RELU, chunk_layers=20_000):
    """H(theta_0) for ``sample_init(d, m, L, seed)`` without materializing B.

    At the initialization grad_{a_l} f = sigma(B_l x), so H only needs the
    B rows; they are drawn from the same stream as ``sample_init``, chunk by
    chunk, which makes the result identical to the direct route.
    """
    act = as_activation(act)
    X = check_unit(np.asarray(dataset.X, dtype=np.float64))
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    G = np.zeros((n, n))
    left = L - 1
    while left > 0:
        k = min(left, chunk_layers)
        B = rng.standard_normal((k, m, d))
        B /= np.linalg.norm(B, axis=2, keepdims=True)
        B /= np.sqrt(m)
        F = act(B.reshape(-1, d) @ X.T)
        G += F.T @ F
        left -= k
    H = G / (n * L)
    return 0.5 * (H + H.T)


def min_eigenvalue(A) -> tuple[float, float]:
    """Smallest eigenvalue of a symmetric matrix and the residual |Av - lv|."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-10 * scale:
        raise InputError("matrix is not symmetric")
    S = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(S)
    v = V[:, 0]
    res = float(np.linalg.norm(S @ v - w[0] * v))
    return float(w[0]), res


def gram_bundle(params, dataset, act=Activation.RELU, n_samples=DEFAULT_SAMPLES, seed=0):
    K = kernel_matrix(dataset, act, n_samples, seed)
    H = gram_matrix(params, dataset, act)
    lk, rk = min_eigenvalue(K)
    lh, rh = min_eigenvalue(H)
    return GramBundle(K, H, lk, lh, max(rk, rh))


def export_matrix_csv(A, path):
    """Row-major ``i,j,value`` listing."""
    A = np.asarray(A)
    with open(path, "w") as fh:
        fh.write("i,j,value\n")
        for i in range(A.shape[0]):
            for j in range(A.shape[1]):
                fh.write(f"{i},{j},{format(float(A[i, j]), '.17g')}\n")
