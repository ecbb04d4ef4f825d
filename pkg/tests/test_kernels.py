import numpy as np
import pytest

from flowforge import bijections as bj
from flowforge.kernels import (
    ComplexGrid,
    CubicCoeffs,
    Rng,
    dft2,
    half_log1p_sq,
    idft2,
    log_cosh,
    solve_monotone_cubic,
)


class TestCubicSolver:
    def test_odd_cubic_through_origin(self):
        assert solve_monotone_cubic(CubicCoeffs(1.0, 0.0, 1.0, 0.0)) == pytest.approx(0.0, abs=1e-14)

    def test_constructed_root(self):
        # 1 + 1 - 2 = 0 by construction
        assert solve_monotone_cubic(CubicCoeffs(1.0, 0.0, 1.0, -2.0)) == pytest.approx(1.0, rel=1e-14)

    def test_cubic_rational_inverse_case(self):
        # forward map of the rational bijection (gamma=0, sigma=1, lam=1)
        # gives h(2) = 2 + 2/5 = 2.4; inverting at y = 2.4 must return 2.
        root = solve_monotone_cubic(CubicCoeffs(1.0, -2.4, 2.0, -2.4))
        assert root == pytest.approx(2.0, abs=1e-12)
        # bisection oracle on the same polynomial
        p = lambda x: x**3 - 2.4 * x**2 + 2.0 * x - 2.4
        lo, hi = -10.0, 10.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if p(mid) < 0:
                lo = mid
            else:
                hi = mid
        assert root == pytest.approx(0.5 * (lo + hi), abs=1e-10)

    def test_residual_small_over_random_monotone_cubics(self):
        # cubics produced by inverting the rational bijection at random
        # valid parameters: coefficients (beta, -beta y, 1 + lam, -y)
        rng = Rng(123)
        n = 10**4
        raw = rng.normal((3, n)) * 2.0
        params = bj.constrain("cubic_rational", list(raw))
        lam, beta = params.values["lam"], params.values["beta"]
        y = rng.uniform(-30.0, 30.0, (n,))
        root = solve_monotone_cubic(CubicCoeffs(beta, -beta * y, 1.0 + lam, -y))
        resid = np.abs(beta * root**3 - beta * y * root**2 + (1 + lam) * root - y)
        assert np.all(resid <= 1e-9 * (1.0 + np.abs(y)))

    def test_near_linear_cubic(self):
        # tiny leading coefficient: root should match the linear solution
        root = solve_monotone_cubic(CubicCoeffs(1e-18, 0.0, 2.0, -3.0))
        assert root == pytest.approx(1.5, rel=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            solve_monotone_cubic(CubicCoeffs(1.0, np.nan, 1.0, 0.0))
        with pytest.raises(ValueError):
            solve_monotone_cubic(CubicCoeffs(0.0, 1.0, 1.0, 1.0))


class TestStableFunctions:
    def test_log_cosh_basics(self):
        assert log_cosh(0.0) == pytest.approx(0.0, abs=1e-15)
        assert log_cosh(1000.0) == pytest.approx(1000.0 - np.log(2.0), rel=1e-15)
        assert log_cosh(1.0) == pytest.approx(np.log((np.e + 1 / np.e) / 2), rel=1e-14)

    def test_log_cosh_symmetry_and_monotonicity(self):
        x = Rng(0).normal((1000,)) * 50
        assert np.array_equal(log_cosh(x), log_cosh(-x))
        xs = np.sort(np.abs(x))
        assert np.all(np.diff(log_cosh(xs)) >= 0)

    def test_half_log1p_sq(self):
        assert half_log1p_sq(0.0) == pytest.approx(0.0, abs=1e-15)
        assert half_log1p_sq(1e200) == pytest.approx(200 * np.log(10), rel=1e-14)
        assert half_log1p_sq(3.0) == pytest.approx(0.5 * np.log(10.0), rel=1e-14)
        assert np.isfinite(half_log1p_sq(1e308))


class TestDft:
    def test_constant_field_single_mode(self):
        g = dft2(np.full((6, 6), 2.5))
        assert g.re[0, 0] == pytest.approx(2.5 * 36)
        off = np.abs(g.re) + np.abs(g.im)
        off[0, 0] = 0.0
        assert np.max(off) < 1e-10

    def test_delta_flat_spectrum(self):
        f = np.zeros((5, 5))
        f[1, 2] = 1.0
        g = dft2(f)
        mag = np.hypot(g.re, g.im)
        assert np.allclose(mag, 1.0, atol=1e-12)

    def test_roundtrip_and_parseval(self):
        rng = Rng(5)
        f = rng.normal((4, 4))
        g = dft2(f)
        assert np.max(np.abs(idft2(g) - f)) < 1e-10
        # Parseval under the unnormalized-forward convention
        assert np.sum(f**2) == pytest.approx(np.sum(g.re**2 + g.im**2) / 16, rel=1e-12)

    def test_linearity(self):
        rng = Rng(6)
        x, y = rng.normal((8, 8)), rng.normal((8, 8))
        gx, gy, gz = dft2(x), dft2(y), dft2(1.3 * x - 0.7 * y)
        assert np.max(np.abs(gz.re - (1.3 * gx.re - 0.7 * gy.re))) < 1e-10
        assert np.max(np.abs(gz.im - (1.3 * gx.im - 0.7 * gy.im))) < 1e-10

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            dft2(np.zeros((3, 4)))
        with pytest.raises(ValueError):
            idft2(ComplexGrid(np.zeros((3, 4)), np.zeros((3, 4))))


class TestRng:
    def test_determinism(self):
        a = Rng(7, 3).normal((5, 2))
        b = Rng(7, 3).normal((5, 2))
        assert np.array_equal(a, b)

    def test_split_streams_distinct(self):
        r = Rng(7)
        c1, c2 = r.split(2)
        assert not np.allclose(c1.normal((8,)), c2.normal((8,)))

    def test_split_does_not_disturb_parent(self):
        r1, r2 = Rng(9), Rng(9)
        r1.split(3)
        assert np.array_equal(r1.normal((4,)), r2.normal((4,)))

    def test_normal_moments(self):
        x = Rng(11).normal((10**6,))
        assert abs(x.mean()) < 4.0 / np.sqrt(10**6)
        assert abs(x.std() - 1.0) < 5e-3

    def test_uniform_range(self):
        u = Rng(4).uniform(2.0, 3.0, (1000,))
        assert u.min() >= 2.0 and u.max() < 3.0
