"""Synthetic data on the unit sphere, target functions and persistence."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import Activation, as_activation
from .errors import ParseError, ValidationError

FORMAT_VERSION = 1
DEGENERATE_LAMBDA = 1e-8


def sample_sphere(n: int, d: int, rng) -> np.ndarray:
    """n points uniform on the unit sphere S^{d-1}."""
    X = rng.standard_normal((n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X


def mean_abs_coordinate(d: int) -> float:
    """E|w_1| for w uniform on S^{d-1}."""
    return math.exp(math.lgamma(d / 2) - math.lgamma((d + 1) / 2)) / math.sqrt(math.pi)


# ----------------------------------------------------------------------
# coefficient functions a*(w) for targets in the RKHS of k0
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientFn:
    """A bounded coefficient function on the sphere.

    kind "constant": a*(w) = value
    kind "linear":   a*(w) = v . w          (sup = |v|)
    kind "mixture":  a*(w) = sum_k c_k sigma(u_k . w), u_k unit (sup <= sum |c_k|)
    """

    kind: str
    value: float = 0.0
    v: tuple = ()
    centers: tuple = ()
    weights: tuple = ()

    def __call__(self, W, act=Activation.RELU) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        if self.kind == "constant":
            return np.full(W.shape[0], float(self.value))
        if self.kind == "linear":
            return W @ np.asarray(self.v)
        if self.kind == "mixture":
            act = as_activation(act)
            U = np.asarray(self.centers, dtype=np.float64)
            return act(W @ U.T) @ np.asarray(self.weights)
        raise ValidationError(f"unknown coefficient kind {self.kind!r}")

    def sup(self) -> float:
        if self.kind == "constant":
            return abs(float(self.value))
        if self.kind == "linear":
            return float(np.linalg.norm(self.v))
        if self.kind == "mixture":
            return float(np.sum(np.abs(self.weights)))
        raise ValidationError(f"unknown coefficient kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "value": self.value,
            "v": list(self.v),
            "centers": [list(c) for c in self.centers],
            "weights": list(self.weights),
        }

    @classmethod
    def from_dict(cls, doc) -> "CoefficientFn":
        return cls(
            kind=doc["kind"],
            value=float(doc.get("value", 0.0)),
            v=tuple(float(t) for t in doc.get("v", ())),
            centers=tuple(tuple(float(t) for t in c) for c in doc.get("centers", ())),
            weights=tuple(float(t) for t in doc.get("weights", ())),
        )


@dataclass(frozen=True)
class TargetSpec:
    """Description of the target f*.

    ``relu-coordinate`` is f*(x) = max(x_1, 0).  ``rkhs-finite`` is
    f*(x) = E_w[a*(w) sigma(w . x)] with a bounded coefficient function.
    """

    kind: str = "relu-coordinate"
    astar: CoefficientFn | None = None
    act: str = "relu"
    n_mc: int = 200_000
    mc_seed: int = 0

    @property
    def gamma(self) -> float | None:
        if self.astar is None:
            return None
        return max(1.0, self.astar.sup())

    def sup_bound(self, d: int) -> float:
        """Upper bound on sup |f*| over the sphere."""
        if self.kind == "relu-coordinate":
            return 1.0
        # |sigma(u)| <= |u| for a 1-Lipschitz sigma with sigma(0) = 0
        return self.astar.sup() * mean_abs_coordinate(d)

    def evaluate(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Target values and their standard errors (zero when exact)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "relu-coordinate":
            return np.maximum(X[:, 0], 0.0), np.zeros(len(X))
        if self.kind == "rkhs-finite":
            return rkhs_target_eval(self, X, self.n_mc, self.mc_seed)
        raise ValidationError(f"unknown target kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "astar": None if self.astar is None else self.astar.to_dict(),
            "act": self.act,
            "n_mc": self.n_mc,
            "mc_seed": self.mc_seed,
        }

    @classmethod
    def from_dict(cls, doc) -> "TargetSpec":
        astar = doc.get("astar")
        return cls(
            kind=doc.get("kind", "relu-coordinate"),
            astar=None if astar is None else CoefficientFn.from_dict(astar),
            act=doc.get("act", "relu"),
            n_mc=int(doc.get("n_mc", 200_000)),
            mc_seed=int(doc.get("mc_seed", 0)),
        )


def rkhs_target_eval(spec: TargetSpec, X, n_mc: int = 200_000, seed: int = 0):
    """Evaluate f*(x) = E_w[a*(w) sigma(w . x)] at the rows of X.

    With ReLU every coefficient kind has an exact value (sphere symmetry for
    constant and linear, the closed-form kernel for mixtures).  Everything
    else is a Monte Carlo mean over one shared sample of w, returned with its
    standard error.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    act = as_activation(spec.act)
    astar = spec.astar
    if astar is None:
        raise ValidationError("rkhs-finite target needs a coefficient function")
    if astar.kind == "constant" and astar.value == 0.0:
        return np.zeros(n), np.zeros(n)
    if act is Activation.RELU and astar.kind == "constant":
        # E[max(w . x, 0)] = E|w_1| / 2
        return np.full(n, astar.value * mean_abs_coordinate(d) / 2.0), np.zeros(n)
    if act is Activation.RELU and astar.kind == "linear":
        # E[(v . w) max(w . x, 0)] = (v . x) E[w_1^2] / 2 = (v . x) / (2d)
        return X @ np.asarray(astar.v) / (2.0 * d), np.zeros(n)
    if act is Activation.RELU and astar.kind == "mixture":
        from .kernelgram import k0_relu_exact

        U = np.asarray(astar.centers, dtype=np.float64)
        return k0_relu_exact(X, U) @ np.asarray(astar.weights), np.zeros(n)
    rng = np.random.default_rng(seed)
    W = sample_sphere(n_mc, d, rng)
    coef = astar(W, act)
    vals = act(W @ X.T) * coef[:, None]
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(n_mc)
    return mean, se


# ----------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    target: TargetSpec = field(default_factory=TargetSpec)
    seed: int | None = None
    label_scale: float = 1.0
    lambda_K: float | None = None
    degenerate: bool = False

    def __post_init__(self):
        self.X = np.ascontiguousarray(np.atleast_2d(self.X), dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64).reshape(-1)
        validate(self)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def metadata(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "d": self.d,
            "n": self.n,
            "seed": self.seed,
            "target": self.target.to_dict(),
            "label_scale": self.label_scale,
            "lambda_K": self.lambda_K,
            "degenerate": self.degenerate,
        }

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and self.target == other.target
            and self.seed == other.seed
            and self.label_scale == other.label_scale
            and self.lambda_K == other.lambda_K
            and self.degenerate == other.degenerate
        )


def validate(ds: Dataset, tol: float = 1e-12):
    if ds.X.shape[0] != ds.y.shape[0]:
        raise ValidationError(f"{ds.X.shape[0]} inputs but {ds.y.shape[0]} labels")
    if ds.X.shape[0] == 0:
        raise ValidationError("dataset is empty")
    dev = np.max(np.abs(np.linalg.norm(ds.X, axis=1) - 1.0))
    if dev > tol:
        raise ValidationError(f"inputs are not unit vectors (max |norm - 1| = {dev:.3e})")
    if np.any(np.abs(ds.y) > 1.0):
        raise ValidationError("labels must satisfy |y| <= 1")


def sphere_dataset(
    d: int,
    n: int,
    target: TargetSpec | None = None,
    seed: int = 0,
    compute_lambda: bool = True,
    kernel_samples: int = 200_000,
) -> Dataset:
    """n noise-free samples with inputs uniform on S^{d-1}.

    If the target can exceed 1 in absolute value the labels are rescaled by
    ``label_scale`` (stored in the metadata).
    """
    if d < 1 or n < 1:
        raise ValidationError(f"need d >= 1 and n >= 1 (got d={d}, n={n})")
    target = target or TargetSpec()
    rng = np.random.default_rng(seed)
    X = sample_sphere(n, d, rng)
    y, _ = target.evaluate(X)
    bound = target.sup_bound(d)
    scale = 1.0 / bound if bound > 1.0 else 1.0
    ds = Dataset(X, y * scale, target, seed, scale)
    if compute_lambda:
        from .kernelgram import kernel_matrix, min_eigenvalue

        K = kernel_matrix(ds, target.act, n_samples=kernel_samples, seed=seed)
        lam, _ = min_eigenvalue(K)
        ds.lambda_K = float(lam)
        ds.degenerate = bool(lam < DEGENERATE_LAMBDA)
    return ds


# ----------------------------------------------------------------------
# persistence: CSV with a JSON sidecar
# ----------------------------------------------------------------------


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def save_dataset(ds: Dataset, path):
    path = Path(path)
    header = [f"x{j + 1}" for j in range(ds.d)] + ["y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xi, yi in zip(ds.X, ds.y):
            w.writerow([format(float(v), ".17g") for v in xi] + [format(float(yi), ".17g")])
    with open(sidecar_path(path), "w") as fh:
        json.dump(ds.metadata(), fh, indent=2, sort_keys=True)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"dataset file {path} does not exist")
    side = sidecar_path(path)
    if not side.exists():
        raise ValidationError(f"sidecar {side} is missing")
    with open(side) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {meta.get('format_version')!r}")
    d = int(meta["d"])
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty", line=1) from None
        expected = [f"x{j + 1}" for j in range(len(header) - 1)] + ["y"]
        if header != expected:
            raise ParseError(f"bad header {header}", line=1)
        if len(header) - 1 != d:
            raise ValidationError(f"header has {len(header) - 1} inputs but the sidecar says d={d}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise ParseError(f"expected {d + 1} fields, found {len(row)}", line=lineno)
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    if "n" in meta and len(rows) != int(meta["n"]):
        raise ParseError(f"expected {meta['n']} rows, found {len(rows)}", line=len(rows) + 1)
    arr = np.array(rows, dtype=np.float64).reshape(-1, d + 1)
    return Dataset(
        arr[:, :d].copy(),
        arr[:, d].copy(),
        TargetSpec.from_dict(meta["target"]),
        meta.get("seed"),
        float(meta.get("label_scale", 1.0)),
        meta.get("lambda_K"),
        bool(meta.get("degenerate", False)),
    )
