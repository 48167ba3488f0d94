"""Numeric primitives against independent oracles.

Oracles here are deliberately dumb: a triple-loop matmul, central finite
differences for gelu_prime, and adaptive quadrature of the normal density
for the CDF.  The library must agree with them, not the other way around.
"""

import numpy as np
import pytest
from scipy import integrate

from treeff import numeric


def matmul_oracle(a, b):
    """Triple-loop reference, fixed summation order."""
    rows, inner = a.shape
    inner2, cols = b.shape
    assert inner == inner2
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def central_diff(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_matmul_matches_triple_loop_oracle():
    rng = numeric.make_rng(0)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 3))
    got = numeric.matmul(a, b)
    want = matmul_oracle(a, b)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_matmul_associativity_within_float_tolerance():
    rng = numeric.make_rng(1)
    for trial in range(20):
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(6, 5))
        c = rng.normal(size=(5, 3))
        left = numeric.matmul(numeric.matmul(a, b), c)
        right = numeric.matmul(a, numeric.matmul(b, c))
        scale = max(np.max(np.abs(left)), 1.0)
        assert np.max(np.abs(left - right)) / scale <= 1e-9


def test_matmul_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        numeric.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_gelu_fixed_points():
    # GELU(0) = 0 exactly; large |z| saturates to z or 0.
    assert numeric.gelu(0.0) == 0.0
    assert abs(numeric.gelu(30.0) - 30.0) < 1e-12
    assert abs(numeric.gelu(-30.0)) < 1e-12
    # GELU(1) = 1 * Phi(1), an independently known constant.
    assert abs(numeric.gelu(1.0) - 0.8413447460685429) < 1e-12


def test_gelu_prime_matches_central_differences():
    zs = np.linspace(-6.0, 6.0, 241)
    fd = central_diff(numeric.gelu, zs)
    got = numeric.gelu_prime(zs)
    assert np.max(np.abs(got - fd)) <= 1e-8


def test_std_normal_cdf_against_quadrature_oracle():
    # Phi(z) = 1/2 + integral of the density from 0 to z keeps the
    # quadrature on a well-conditioned interval for either sign of z
    for z in [-4.0, -1.5, -0.3, 0.0, 0.7, 2.2, 5.0]:
        tail, err = integrate.quad(numeric.std_normal_pdf, 0.0, z, epsabs=1e-14)
        assert err < 1e-9  # quad's estimate is conservative in the far tail
        assert abs(numeric.std_normal_cdf(z) - (0.5 + tail)) <= 1e-12


def test_std_normal_cdf_symmetry_and_monotonicity():
    zs = np.linspace(-8.0, 8.0, 401)
    cdf = numeric.std_normal_cdf(zs)
    assert np.all(np.diff(cdf) >= 0.0)
    assert np.max(np.abs(cdf + numeric.std_normal_cdf(-zs) - 1.0)) <= 1e-15
    assert numeric.std_normal_cdf(0.0) == 0.5


def test_rng_determinism_and_streams():
    a = numeric.gaussian(numeric.make_rng(7), 0.0, 1.0, (100,))
    b = numeric.gaussian(numeric.make_rng(7), 0.0, 1.0, (100,))
    c = numeric.gaussian(numeric.make_rng(8), 0.0, 1.0, (100,))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_gaussian_moments_and_negative_std():
    draws = numeric.gaussian(numeric.make_rng(3), 2.0, 0.5, (200_000,))
    assert abs(draws.mean() - 2.0) < 0.01
    assert abs(draws.std() - 0.5) < 0.01
    with pytest.raises(ValueError):
        numeric.gaussian(numeric.make_rng(0), 0.0, -1.0, (4,))


def test_check_finite_raises_with_context():
    numeric.check_finite(np.ones(5), "ok")
    with pytest.raises(numeric.DivergenceError, match="loss"):
        numeric.check_finite(np.array([1.0, np.nan]), "loss")


def test_flop_counter_accumulates_and_resets():
    counter = numeric.FlopCounter()
    counter.add(10)
    counter.add(5)
    assert counter.flops == 15
    counter.reset()
    assert counter.flops == 0
