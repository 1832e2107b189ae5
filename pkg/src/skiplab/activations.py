"""Scalar activations used by every model in the package.

Both activations satisfy sigma(0) = 0 and are 1-Lipschitz.  The integer
codes are what the compiled kernels dispatch on.
"""

from __future__ import annotations

import enum

import numpy as np


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"

    @property
    def code(self) -> int:
        return 0 if self is Activation.RELU else 1

    def __call__(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self is Activation.RELU:
            return np.maximum(u, 0.0)
        return np.tanh(u)

    def deriv(self, u):
        """Derivative; for ReLU the value at 0 is taken to be 0."""
        u = np.asarray(u, dtype=np.float64)
        if self is Activation.RELU:
            return (u > 0.0).astype(np.float64)
        t = np.tanh(u)
        return 1.0 - t * t


def as_activation(act) -> Activation:
    if isinstance(act, Activation):
        return act
    return Activation(str(act).lower())
