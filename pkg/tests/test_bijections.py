import numpy as np
import pytest

from flowforge import autodiff as ad
from flowforge import bijections as bj
from flowforge.autodiff import val
from flowforge.kernels import Rng


def random_params(fam, rng, scale=2.0):
    return bj.constrain(fam, list(rng.normal((bj.RAW_COUNTS[fam],)) * scale))


class TestConstrain:
    def test_lambda_zero_at_zero_raw(self):
        p = bj.constrain("cubic_rational", [0.0, 0.0, 0.0])
        assert val(p.values["lam"]) == pytest.approx(0.0, abs=1e-12)

    def test_lambda_bounds(self):
        for t1 in (-50.0, -3.0, 0.0, 3.0, 50.0):
            p = bj.constrain("cubic_rational", [0.0, t1, 0.0])
            assert -1.0 < val(p.values["lam"]) < 8.0

    def test_sinh_zero_raw_is_identity_params(self):
        p = bj.constrain("sinh", [0.0] * 5)
        assert val(p.values["sigma"]) == pytest.approx(np.log(2.0) + 0.1)
        for k in ("gamma", "delta", "mu", "nu"):
            assert val(p.values[k]) == 0.0

    def test_cubic_poly_positivity(self):
        for t in (-30.0, -5.0, 0.0, 5.0):
            p = bj.constrain("cubic_poly", [0.0, 0.0, t, t])
            assert val(p.values["a"]) > 1e-2
            assert val(p.values["b"]) > 1e-2

    def test_suppression_divides_raw(self):
        p1 = bj.constrain("sinh", [5.0, 0.0, 5.0, 0.0, 0.0], suppression=10.0)
        p2 = bj.constrain("sinh", [0.5, 0.0, 0.5, 0.0, 0.0])
        assert val(p1.values["gamma"]) == pytest.approx(val(p2.values["gamma"]))
        assert val(p1.values["delta"]) == pytest.approx(val(p2.values["delta"]))

    def test_all_families_identity_at_zero_raw(self):
        x = np.linspace(-20, 20, 1001)
        for fam in bj.FAMILIES:
            p = bj.constrain(fam, [0.0] * bj.RAW_COUNTS[fam])
            y, logd = bj.forward(p, x)
            assert np.max(np.abs(y - x)) <= 1e-12, fam

    def test_bad_family_and_arity(self):
        with pytest.raises(ValueError):
            bj.constrain("spline", [0.0])
        with pytest.raises(ValueError):
            bj.constrain("sinh", [0.0, 0.0])


class TestForwardValues:
    def test_cubic_rational_identity_at_lambda_zero(self):
        p = bj.BijectionParams("cubic_rational", {"gamma": 0.0, "lam": 0.0, "beta": 1.0})
        y, logd = bj.forward(p, np.array(1.7))
        assert y == pytest.approx(1.7) and logd == pytest.approx(0.0)

    def test_cubic_rational_paper_point(self):
        p = bj.BijectionParams("cubic_rational", {"gamma": 0.0, "lam": 1.0, "beta": 1.0})
        y, logd = bj.forward(p, np.array(2.0))
        assert y == pytest.approx(2.4, rel=1e-14)
        # h'(2) = 1 + (1 - 4)/25 = 22/25
        assert logd == pytest.approx(np.log(22.0 / 25.0), rel=1e-12)

    def test_sinh_asymptotic_shift(self):
        p = bj.BijectionParams(
            "sinh", {"gamma": 0.0, "sigma": 1.0, "delta": 0.0, "mu": 1.0, "nu": 1.0}
        )
        y, logd = bj.forward(p, np.array(50.0))
        assert y == pytest.approx(52.0, rel=1e-12)
        assert abs(logd) < 1e-12
        y2, _ = bj.forward(p, np.array(-50.0))
        assert y2 == pytest.approx(-52.0, rel=1e-12)

    def test_cubic_poly_exact_root(self):
        p = bj.BijectionParams("cubic_poly", {"gamma": 0.0, "delta": 2.0, "a": 1.0, "b": 1.0})
        y, _ = bj.forward(p, np.array(0.0))
        assert y == pytest.approx(1.0, abs=1e-12)

    def test_nonfinite_input_rejected(self):
        p = bj.constrain("sinh", [0.0] * 5)
        with pytest.raises(ValueError):
            bj.forward(p, np.array([1.0, np.nan]))
        with pytest.raises(ValueError):
            bj.inverse(p, np.array([np.inf]))


class TestRoundTripAndJacobians:
    @pytest.mark.parametrize("fam", bj.FAMILIES)
    def test_roundtrip_10k(self, fam):
        rng = Rng(100 + hash(fam) % 1000)
        n = 10**4
        raw = rng.normal((bj.RAW_COUNTS[fam], n)) * 2.0
        p = bj.constrain(fam, list(raw))
        x = rng.uniform(-20, 20, (n,))
        y, logd = bj.forward(p, x)
        xb, logdi = bj.inverse(p, y)
        assert np.all(np.abs(xb - x) <= 1e-9 * (1 + np.abs(x)))
        assert np.max(np.abs(logdi + logd)) <= 1e-9

    @pytest.mark.parametrize("fam", bj.FAMILIES)
    def test_jacobian_vs_fd(self, fam):
        rng = Rng(200 + hash(fam) % 1000)
        n = 4000
        raw = rng.normal((bj.RAW_COUNTS[fam], n)) * 2.0
        p = bj.constrain(fam, list(raw))
        x = rng.uniform(-20, 20, (n,))
        eps = 6e-6 * (1 + np.abs(x))
        yp, _ = bj.forward(p, x + eps)
        ym, _ = bj.forward(p, x - eps)
        fd = (yp - ym) / (2 * eps)
        ana = np.exp(val(bj.forward(p, x)[1]))
        keep = np.ones(n, dtype=bool)
        if fam == "sinh":
            z = (x - val(p.values["gamma"])) / val(p.values["sigma"])
            keep = np.abs(np.abs(z) - bj.SINH_ASYM_THRESHOLD) > 1e-3
        rel = np.abs(fd - ana) / np.maximum(np.abs(ana), 1e-12)
        assert np.max(rel[keep]) <= 1e-6

    @pytest.mark.parametrize("fam", bj.FAMILIES)
    def test_monotonicity_random_pairs(self, fam):
        rng = Rng(300 + hash(fam) % 1000)
        n = 10**4
        raw = rng.normal((bj.RAW_COUNTS[fam], n)) * 2.0
        p = bj.constrain(fam, list(raw))
        x1 = rng.uniform(-20, 20, (n,))
        x2 = x1 + rng.uniform(1e-9, 10, (n,))
        y1, _ = bj.forward(p, x1)
        y2, _ = bj.forward(p, x2)
        assert np.all(y2 > y1)

    def test_sinh_inverse_is_swapped_forward(self):
        p = bj.BijectionParams(
            "sinh", {"gamma": 0.3, "sigma": 0.9, "delta": 1.2, "mu": 0.4, "nu": -0.7}
        )
        q = bj.BijectionParams(
            "sinh", {"gamma": 0.3, "sigma": 0.9, "delta": -1.2, "mu": 0.7, "nu": -0.4}
        )
        y = np.linspace(-8, 8, 101)
        x1, _ = bj.inverse(p, y)
        x2, _ = bj.forward(q, y)
        assert np.allclose(x1, x2, rtol=0, atol=1e-12)

    def test_sinh_continuity_at_threshold(self):
        rng = Rng(17)
        for _ in range(50):
            p = bj.constrain("sinh", list(rng.normal((5,)) * 2.0))
            g, s = val(p.values["gamma"]), val(p.values["sigma"])
            for sign in (1.0, -1.0):
                xb = g + sign * s * bj.SINH_ASYM_THRESHOLD
                lo, _ = bj.forward(p, np.array(xb - 1e-9))
                hi, _ = bj.forward(p, np.array(xb + 1e-9))
                assert abs(hi - lo) <= 1e-8

    def test_inverted_copy_flag(self):
        # the optional inverse-as-layer variant: forward of the inverted
        # copy equals the plain inverse
        from flowforge.flows import StackSpec

        p_raw = np.array([0.3, 1.0, -0.2])
        spec = StackSpec(["cubic_rational"], inverted=[True])
        params = spec.split_params(p_raw)
        x = np.linspace(-5, 5, 50)
        y1, ld1 = spec.forward(params, x)
        y2, ld2 = bj.inverse(bj.constrain("cubic_rational", list(p_raw)), x)
        assert np.allclose(y1, y2) and np.allclose(val(ld1), val(ld2))


class TestDerivativeBounds:
    def test_min_slope_matches_analytic(self):
        # min h' = 1 - lam/8 for lam >= 0 (at |x-gamma| = sqrt(3) sigma),
        # 1 + lam for lam < 0 (at x = gamma)
        for lam in (7.999, 5.0, 1.0, 0.0, -0.5, -0.95):
            p = bj.BijectionParams(
                "cubic_rational", {"gamma": 0.4, "lam": lam, "beta": 2.3}
            )
            expected = 1.0 - lam / 8.0 if lam >= 0 else 1.0 + lam
            assert bj.derivative_bounds_check(p) == pytest.approx(expected, abs=1e-6)

    def test_identity_min_slope(self):
        p = bj.BijectionParams("cubic_rational", {"gamma": 0.0, "lam": 0.0, "beta": 1.0})
        assert bj.derivative_bounds_check(p) == pytest.approx(1.0, abs=1e-9)


class TestParameterGradients:
    @pytest.mark.parametrize("fam", bj.FAMILIES)
    def test_grads_through_constrain_forward_inverse(self, fam):
        rng = Rng(400 + hash(fam) % 1000)
        P = bj.RAW_COUNTS[fam]
        theta0 = rng.normal((P,)) * 0.7
        xf = rng.uniform(-3, 3, (16,))

        def f(th):
            p = bj.constrain(fam, [th[i] for i in range(P)])
            y, logd = bj.forward(p, xf)
            xi, logdi = bj.inverse(p, xf)
            return ad.tmean(y * y) + ad.tmean(logd) + ad.tmean(xi) + ad.tmean(logdi)

        assert ad.grad_check(f, theta0, h=1e-5).max_rel_error <= 1e-5
