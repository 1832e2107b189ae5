import warnings

import mpmath
import numpy as np
import pytest

from conftest import random_dataset
from skiplab.data import Dataset, sample_sphere
from skiplab.errors import InputError, ParameterError
from skiplab.kernelgram import (
    export_matrix_csv,
    gram_bundle,
    gram_matrix,
    init_gram_streaming,
    k0_mc,
    k0_relu_exact,
    kernel_matrix,
    min_eigenvalue,
)
from skiplab.netcore import sample_init


def test_k0_diagonal_relu():
    d = 4
    x = np.eye(d)[0]
    v, se = k0_mc(x, x, "relu", 200_000, 1)
    assert abs(v - 1 / (2 * d)) <= 3 * se


def test_k0_antipodal_is_zero():
    x = np.array([0.6, 0.8, 0.0])
    v, se = k0_mc(x, -x, "relu", 10_000, 0)
    assert v == 0.0 and se == 0.0
    assert k0_relu_exact(x, -x)[0, 0] == pytest.approx(0.0, abs=1e-17)


def test_k0_determinism_and_sample_floor():
    x = np.array([1.0, 0.0])
    xp = np.array([0.0, 1.0])
    assert k0_mc(x, xp, "tanh", 5000, 3) == k0_mc(x, xp, "tanh", 5000, 3)
    with pytest.raises(ParameterError):
        k0_mc(x, xp, "relu", 999)


@pytest.mark.parametrize("d", [2, 3, 5])
def test_relu_closed_form_against_monte_carlo(d):
    rng = np.random.default_rng(d)
    X = sample_sphere(6, d, rng)
    exact = k0_relu_exact(X, X)
    for i in range(6):
        for j in range(i, 6):
            v, se = k0_mc(X[i], X[j], "relu", 100_000, 10 * i + j)
            assert abs(v - exact[i, j]) <= 4 * se + 1e-12


def test_kernel_matrix_basics():
    ds = random_dataset(4, 6, 2)
    K = kernel_matrix(ds, "relu", 50_000, 0)
    assert np.array_equal(K, K.T)
    lam, res = min_eigenvalue(K)
    assert lam >= -1e-12
    assert lam <= np.min(np.diag(K)) <= 1 / ds.n
    assert np.max(np.diag(K)) <= 1 / ds.n
    exact = k0_relu_exact(ds.X, ds.X) / ds.n
    assert np.max(np.abs(K - exact)) < 5e-4  # ~4 SE at 5e4 samples


def test_kernel_matrix_single_point():
    ds = Dataset(np.array([[0.0, 0.0, 1.0]]), np.array([0.5]))
    K = kernel_matrix(ds, "relu", 100_000, 0)
    assert K.shape == (1, 1) and K[0, 0] == pytest.approx(1 / 6, rel=0.02)


def test_duplicate_inputs_warn_and_degenerate():
    ds = random_dataset(3, 4, 5)
    X = ds.X.copy()
    X[1] = X[0]
    with pytest.warns(UserWarning, match="duplicate"):
        K = kernel_matrix(Dataset(X, ds.y), "relu", 20_000, 0)
    assert min_eigenvalue(K)[0] <= 1e-6


def test_gram_at_init_brute_force():
    p = sample_init(1, 1, 6, 3)
    ds = Dataset(np.array([[1.0]]), np.array([0.0]))
    H = gram_matrix(p, ds)
    direct = sum(max(p.B[k, 0, 0], 0.0) ** 2 for k in range(5)) / 6
    assert H[0, 0] == pytest.approx(direct, rel=1e-14)


def test_gram_at_init_uses_relu_features():
    p = sample_init(3, 4, 7, 1)
    ds = random_dataset(3, 5, 1)
    F = np.maximum(np.einsum("kmd,id->ikm", p.B, ds.X), 0).reshape(5, -1)
    assert np.allclose(gram_matrix(p, ds), F @ F.T / (5 * 7), atol=1e-16)


def test_gram_expectation_matches_kernel():
    # E H(theta_0) = ((L-1)/L) K: L-1 trainable layers under the 1/(nL) normalization
    ds = random_dataset(3, 4, 8)
    L, m = 6, 3
    Hs = np.array([gram_matrix(sample_init(3, m, L, s), ds) for s in range(200)])
    mean, se = Hs.mean(0), Hs.std(0, ddof=1) / np.sqrt(200)
    K = k0_relu_exact(ds.X, ds.X) / ds.n * (L - 1) / L
    assert np.all(np.abs(mean - K) <= 3 * se + 1e-12)


def test_streaming_gram_is_identical_to_direct():
    ds = random_dataset(4, 8, 0)
    p = sample_init(4, 5, 57, 9)
    direct = gram_matrix(p, ds)
    streamed = init_gram_streaming(4, 5, 57, 9, ds, chunk_layers=10)
    assert np.allclose(direct, streamed, rtol=0, atol=1e-16)


def test_min_eigenvalue_known_cases():
    lam, res = min_eigenvalue(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert lam == pytest.approx(1.0, abs=1e-15) and res < 1e-14
    assert min_eigenvalue(np.eye(5))[0] == 1.0
    with pytest.raises(InputError):
        min_eigenvalue(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(InputError):
        min_eigenvalue(np.ones((2, 3)))


def test_min_eigenvalue_against_mpmath():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(8, 8))
    A = A + A.T
    lam, res = min_eigenvalue(A)
    mpmath.mp.dps = 40
    ev = mpmath.eigsy(mpmath.matrix(A.tolist()))[0]
    ref = min(float(ev[i]) for i in range(8))
    assert lam == pytest.approx(ref, abs=1e-9)
    assert res <= 1e-10 * np.linalg.norm(A, 2)


def test_bundle_and_export(tmp_path):
    ds = random_dataset(3, 3, 2)
    b = gram_bundle(sample_init(3, 2, 4, 0), ds, n_samples=10_000)
    assert b.eig_residual < 1e-10 and set(b.to_dict()) >= {"K", "H", "lambda_K", "lambda_H"}
    export_matrix_csv(b.K, tmp_path / "K.csv")
    lines = (tmp_path / "K.csv").read_text().splitlines()
    assert lines[0] == "i,j,value" and len(lines) == 10
    assert float(lines[2].split(",")[2]) == b.K[0, 1]


def test_no_warning_for_distinct_inputs():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        kernel_matrix(random_dataset(2, 3, 1), "relu", 2000)
