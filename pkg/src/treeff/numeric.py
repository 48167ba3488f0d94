"""Numeric primitives shared by every layer: exact GELU, normal CDF, RNG.

All arrays are float64 numpy arrays.  GELU uses the exact erf form rather
than the tanh approximation so that hand-derived gradients and the
closed-form branch probability Phi(mu/sigma) refer to the same function.
"""

from __future__ import annotations

import numpy as np
from scipy import special

INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DivergenceError(RuntimeError):
    """Raised when a non-finite value appears where finite math was expected."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


def std_normal_cdf(z):
    """Phi(z), the standard normal CDF, exact via erf."""
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + special.erf(z * INV_SQRT2))


def std_normal_pdf(z):
    """phi(z), the standard normal density."""
    z = np.asarray(z, dtype=np.float64)
    return INV_SQRT2PI * np.exp(-0.5 * z * z)


def gelu(z):
    """Exact GELU: z * Phi(z)."""
    z = np.asarray(z, dtype=np.float64)
    return z * std_normal_cdf(z)


def gelu_prime(z):
    """d/dz GELU(z) = Phi(z) + z * phi(z)."""
    z = np.asarray(z, dtype=np.float64)
    return std_normal_cdf(z) + z * std_normal_pdf(z)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only RNG source used anywhere."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def gaussian(rng: np.random.Generator, mean: float, std: float, shape) -> np.ndarray:
    """Gaussian sample of the given shape; std must be >= 0."""
    if std < 0:
        raise ValueError(f"negative std {std}")
    return rng.normal(loc=mean, scale=std, size=shape)


def check_finite(arr: np.ndarray, context: str, step=None) -> None:
    """Raise DivergenceError naming `context` if arr has NaN/Inf entries."""
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr).ravel())[0])
        raise DivergenceError(
            f"non-finite value in {context} (first flat index {bad})", step=step
        )


class FlopCounter:
    """Counts floating-point operations at instrumented execution sites.

    Layers add 2 FLOPs per multiply-accumulate as the work is performed, so
    the total reflects what actually executed, not what a formula predicts.
    """

    def __init__(self):
        self.flops = 0

    def add(self, flops: int) -> None:
        self.flops += int(flops)

    def reset(self) -> None:
        self.flops = 0


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-major float64 matmul.  Summation order is fixed by the BLAS build,
    so repeated calls on identical inputs are bitwise reproducible."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b
