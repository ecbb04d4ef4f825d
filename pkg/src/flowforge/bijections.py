"""Analytic scalar bijections with closed-form inverses and log-derivatives.

Four families:

* ``affine``          y = exp(s) x + t
* ``cubic_rational``  y = x + lam (x-g) / (1 + (x-g)^2 / sigma^2),
                      inverted by Cardano's formula
* ``sinh``            y = sigma asinh(e^mu (e^nu sinh((x-g)/sigma) + d)) + g,
                      inverted by swapping mu/nu and flipping signs
* ``cubic_poly``      y = q^-1(q(x-g) + d) + g with q(t) = a t + b t^3,
                      forward and inverse both via Cardano

All functions are dual-mode (numpy arrays or autodiff Variables) and
elementwise over the input; parameters broadcast against the input, so a
conditioner can supply per-element parameter arrays.

Raw (unconstrained) parameters map to valid ranges through `constrain`;
raw zeros always produce the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import val

FAMILIES = ("affine", "cubic_rational", "sinh", "cubic_poly")

#: raw parameter count per family
RAW_COUNTS = {"affine": 2, "cubic_rational": 3, "sinh": 5, "cubic_poly": 4}

# constraint floors / bounds
LAMBDA_LOW = -1.0 + 1e-3
LAMBDA_HIGH = 8.0 - 1e-3
BETA_FLOOR = 0.1
SIGMA_FLOOR = 0.1
AB_FLOOR = 1e-2
#: bound on the affine log-scale, s = CAP * tanh(theta / CAP)
AFFINE_LOG_SCALE_CAP = 2.0
#: |(x - gamma)/sigma| beyond which the sinh map switches to its
#: asymptotic form y ~ x +/- sigma (mu + nu)
SINH_ASYM_THRESHOLD = 15.0

# logit offset making theta=0 map to lambda=0
_LAMBDA_OFFSET = float(
    np.log((-LAMBDA_LOW / (LAMBDA_HIGH - LAMBDA_LOW)) / (1.0 - (-LAMBDA_LOW / (LAMBDA_HIGH - LAMBDA_LOW))))
)


@dataclass
class BijectionParams:
    """Constrained parameters of one scalar bijection; immutable by use."""

    family: str
    values: dict


def identity_raw(family: str) -> np.ndarray:
    """Raw parameter vector producing the identity map."""
    return np.zeros(RAW_COUNTS[family])


def constrain(family: str, theta, suppression: float = 1.0) -> BijectionParams:
    """Map unconstrained raw parameters to valid bijection parameters.

    `theta` is a sequence of per-parameter scalars/arrays/Variables. Raw
    values are divided by `suppression` first (use 10 when a conditioner
    network produces them, 1 for directly trained weights).
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown bijection family: {family!r}")
    if len(theta) != RAW_COUNTS[family]:
        raise ValueError(
            f"{family} expects {RAW_COUNTS[family]} raw parameters, got {len(theta)}"
        )
    if suppression != 1.0:
        theta = [t / suppression for t in theta]
    if family == "affine":
        cap = AFFINE_LOG_SCALE_CAP
        return BijectionParams(
            "affine", {"s": cap * ad.tanh(theta[0] / cap), "t": theta[1]}
        )
    if family == "cubic_rational":
        lam = LAMBDA_LOW + (LAMBDA_HIGH - LAMBDA_LOW) * ad.sigmoid(
            theta[1] + _LAMBDA_OFFSET
        )
        return BijectionParams(
            "cubic_rational",
            {
                "gamma": theta[0],
                "lam": lam,
                "beta": BETA_FLOOR + ad.softplus(theta[2] + 1.0),
            },
        )
    if family == "sinh":
        return BijectionParams(
            "sinh",
            {
                "gamma": theta[0],
                "sigma": ad.softplus(theta[1]) + SIGMA_FLOOR,
                "delta": theta[2],
                "mu": ad.arcsinh(theta[3]),
                "nu": ad.arcsinh(theta[4]),
            },
        )
    # cubic_poly
    return BijectionParams(
        "cubic_poly",
        {
            "gamma": theta[0],
            "delta": theta[1],
            "a": AB_FLOOR + ad.softplus(theta[2]),
            "b": AB_FLOOR + ad.softplus(theta[3]),
        },
    )


# ---------------------------------------------------------------------------
# forward maps


def _cr_logderiv(lam, u):
    # h' = (u^2 + (2 - lam) u + (1 + lam)) / (1 + u)^2, u = beta (x-g)^2;
    # the expanded numerator avoids cancellation as lam -> 8 near u = 3
    num = u * u + (2.0 - lam) * u + (1.0 + lam)
    return ad.log(num) - 2.0 * ad.log1p(u)


def _cubic_rational_forward(v, x):
    gamma, lam, beta = v["gamma"], v["lam"], v["beta"]
    xc = x - gamma
    u = beta * (xc * xc)
    y = x + lam * xc / (1.0 + u)
    return y, _cr_logderiv(lam, u)


def _sinh_core(gamma, sigma, delta, mu, nu, x):
    """Shared sinh forward: exact inside |z| <= T, asymptotic outside.

    The asymptotic branch keeps the first delta correction,
    y = x + sgn(z) sigma (mu + nu + log1p(2 sgn(z) delta e^{-(nu+|z|)})),
    which is what the exact form limits to; this keeps the two branches
    continuous to ~1e-13 at the threshold.
    """
    z = (x - gamma) / sigma
    zv = val(z)
    asym = np.abs(zv) > SINH_ASYM_THRESHOLD
    sgn = np.sign(zv)

    # exact branch (input clamped so sinh/cosh cannot overflow)
    z_in = ad.where(asym, sgn * SINH_ASYM_THRESHOLD, z)
    xi = ad.exp(mu) * (ad.exp(nu) * ad.sinh(z_in) + delta)
    y_exact = sigma * ad.arcsinh(xi) + gamma
    logd_exact = mu + nu + ad.log_cosh(z_in) - ad.half_log1p_sq(xi)

    # asymptotic branch
    az = ad.where(asym, ad.absolute(z), 1.0 + SINH_ASYM_THRESHOLD)
    expo = -(nu + az)
    expo = ad.where(val(expo) > 80.0, 80.0, expo)
    u = 2.0 * (sgn * delta) * ad.exp(expo)
    u = ad.where(val(u) < -1.0 + 1e-9, -1.0 + 1e-9, u)
    corr = ad.log1p(u)
    y_asym = x + sgn * (sigma * (mu + nu + corr))
    logd_asym = -corr

    y = ad.where(asym, y_asym, y_exact)
    logd = ad.where(asym, logd_asym, logd_exact)
    return y, logd


def _sinh_forward(v, x):
    return _sinh_core(v["gamma"], v["sigma"], v["delta"], v["mu"], v["nu"], x)


def _solve_shifted_cubic(a, b, w):
    """Solve b t^3 + a t = w elementwise for the monotone cubic (a, b > 0).

    Dual-mode: the root is computed in plain numpy and, when any input is
    a Variable, reattached to the tape with exact implicit-function
    gradients (whose Newton form also polishes the value).
    """
    on_tape = ad.is_variable(a) or ad.is_variable(b) or ad.is_variable(w)
    root = kernels.solve_monotone_cubic(
        kernels.CubicCoeffs(a=val(b), b=0.0, c=val(a), d=-val(w)),
        validate=False,
        newton_polish=1 if on_tape else 2,
    )
    if not on_tape:
        return root
    # one Newton step off the detached root: exact IFT gradients, and the
    # derivative at the constant root is the correct first-order weight
    r2 = root * root
    return root - (a * root + b * (r2 * root) - w) / (a + 3.0 * (b * r2))


def _cubic_poly_forward(v, x):
    gamma, delta, a, b = v["gamma"], v["delta"], v["a"], v["b"]
    xc = x - gamma
    bxc2 = b * (xc * xc)
    w = (a + bxc2) * xc + delta
    t = _solve_shifted_cubic(a, b, w)
    y = t + gamma
    logd = ad.log(a + 3.0 * bxc2) - ad.log(a + 3.0 * (b * (t * t)))
    return y, logd


_FORWARD = {
    "cubic_rational": _cubic_rational_forward,
    "sinh": _sinh_forward,
    "cubic_poly": _cubic_poly_forward,
}


def forward(p: BijectionParams, x):
    """Apply the bijection; returns (y, log h'(x)) elementwise."""
    xv = val(x)
    if not ad.is_variable(x) and not np.all(np.isfinite(xv)):
        raise ValueError("non-finite input to bijection forward")
    if p.family == "affine":
        s, t_ = p.values["s"], p.values["t"]
        y = ad.exp(s) * x + t_
        logd = s + 0.0 * x  # broadcast the log-scale to the input shape
        return y, logd
    return _FORWARD[p.family](p.values, x)


def inverse(p: BijectionParams, y):
    """Invert the bijection; returns (x, log dh^-1/dy) elementwise.

    The returned log-derivative equals -log h'(x) at the recovered x.
    """
    yv = val(y)
    if not ad.is_variable(y) and not np.all(np.isfinite(yv)):
        raise ValueError("non-finite input to bijection inverse")
    v = p.values
    if p.family == "affine":
        s, t_ = v["s"], v["t"]
        x = (y - t_) * ad.exp(-s)
        return x, -s + 0.0 * y
    if p.family == "sinh":
        # same functional form with mu/nu switched and delta, mu, nu negated;
        # the log-derivative is recomputed as -log h'(x) at the recovered x
        # so forward/inverse log-derivatives are antisymmetric by construction
        x, _ = _sinh_core(v["gamma"], v["sigma"], -v["delta"], -v["nu"], -v["mu"], y)
        _, logd_fwd = _sinh_forward(v, x)
        return x, -logd_fwd
    if p.family == "cubic_poly":
        q = BijectionParams(
            "cubic_poly",
            {"gamma": v["gamma"], "delta": -v["delta"], "a": v["a"], "b": v["b"]},
        )
        return _cubic_poly_forward(q.values, y)
    # cubic_rational: beta xc^3 - beta yc xc^2 + (1 + lam) xc - yc = 0
    gamma, lam, beta = v["gamma"], v["lam"], v["beta"]
    yc = y - gamma
    bv, lv, yv_ = val(beta), val(lam), val(yc)
    on_tape = ad.is_variable(beta) or ad.is_variable(lam) or ad.is_variable(y)
    root = kernels.solve_monotone_cubic(
        kernels.CubicCoeffs(a=bv, b=-bv * yv_, c=1.0 + lv, d=-yv_),
        validate=False,
        newton_polish=1 if on_tape else 2,
    )
    if on_tape:
        xc = ad.implicit_root(
            root,
            lambda t: beta * (t * (t * t)) - beta * yc * (t * t) + (1.0 + lam) * t - yc,
            lambda t: 3.0 * (beta * (t * t)) - 2.0 * (beta * yc) * t + (1.0 + lam),
        )
    else:
        xc = root
    x = xc + gamma
    u = beta * (xc * xc)
    return x, -_cr_logderiv(lam, u)


def derivative_bounds_check(p: BijectionParams, n_probe: int = 4001, span: float = 12.0) -> float:
    """Minimum of h' over a probe grid centered on the bijection location.

    The grid always contains the analytic critical points of the cubic
    rational derivative (x = gamma and |x - gamma| = sqrt(3) sigma).
    """
    v = {k: float(val(x)) for k, x in p.values.items()}
    gamma = v.get("gamma", 0.0)
    grid = gamma + np.linspace(-span, span, n_probe)
    if p.family == "cubic_rational":
        sigma = 1.0 / np.sqrt(v["beta"])
        crit = gamma + np.array([0.0, np.sqrt(3.0) * sigma, -np.sqrt(3.0) * sigma])
        grid = np.concatenate([grid, crit])
    q = BijectionParams(p.family, v)
    _, logd = forward(q, grid)
    return float(np.exp(np.min(logd)))
