"""Benchmark target distributions and the phi^4 Metropolis oracle.

Targets expose some subset of:

* ``log_unnorm(x)``   unnormalized log-density, dual-mode (works on
                      autodiff Variables so reverse-KL losses can
                      differentiate through it)
* ``log_density(x)``  normalized log-density (numpy only)
* ``sample(rng, n)``  exact draws
* ``entropy()``       differential entropy via quadrature (cached)

Inputs carry a leading batch axis: (batch, d) for vector targets and
(batch, L, L) for lattice fields; densities come back as (batch,).
"""

from __future__ import annotations

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .autodiff import val
from .kernels import Rng, logsumexp


class OscPoly:
    """1D oscillating-polynomial density
    log p(x) = a1 sin(w1 x) exp(-g1 x^2) + a2 cos(w2 x) + a4 x^4
    with (a1, w1, g1, a2, w2, a4) = (1, 5, 5, 2, 10, -0.2).

    The -0.2 x^4 tail makes p(|x| > 6) < exp(-250), so normalization,
    entropy, and sampling truncate the support to [-6, 6].
    """

    name = "osc_poly"
    event_shape = (1,)
    has_density = True
    has_sampler = True
    SUPPORT = (-6.0, 6.0)

    def __init__(self, grid_size: int = 2**14):
        self.grid_size = grid_size
        self._log_z = None
        self._entropy = None
        self._cdf = None
        self._grid = None

    @staticmethod
    def _log_unnorm_scalar(x):
        return ad.sin(5.0 * x) * ad.exp(-5.0 * (x * x)) + 2.0 * ad.cos(10.0 * x) - 0.2 * (
            x * (x * (x * x)))

    def log_unnorm(self, x):
        return self._log_unnorm_scalar(x[:, 0])

    def _ensure_norm(self):
        if self._log_z is None:
            f = lambda t: np.exp(float(self._log_unnorm_scalar(np.asarray(t))))
            z, _ = integrate.quad(f, *self.SUPPORT, limit=400, epsabs=1e-13, epsrel=1e-12)
            g = lambda t: np.exp(float(self._log_unnorm_scalar(np.asarray(t)))) * float(
                self._log_unnorm_scalar(np.asarray(t)))
            m, _ = integrate.quad(g, *self.SUPPORT, limit=400, epsabs=1e-13, epsrel=1e-12)
            self._log_z = float(np.log(z))
            # H = log Z - E[log p~]
            self._entropy = self._log_z - m / z

    @property
    def log_z(self):
        self._ensure_norm()
        return self._log_z

    def log_density(self, x):
        self._ensure_norm()
        return val(self.log_unnorm(np.asarray(x))) - self._log_z

    def entropy(self):
        self._ensure_norm()
        return self._entropy

    def _ensure_cdf(self):
        if self._cdf is None:
            lo, hi = self.SUPPORT
            grid = np.linspace(lo, hi, self.grid_size)
            pdf = np.exp(self._log_unnorm_scalar(grid))
            cdf = np.concatenate([[0.0], np.cumsum((pdf[1:] + pdf[:-1]) * 0.5 * np.diff(grid))])
            cdf /= cdf[-1]
            self._grid = grid
            self._cdf = cdf

    def cdf(self, x):
        self._ensure_cdf()
        return np.interp(x, self._grid, self._cdf)

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        """Inverse-CDF sampling on the cached grid with linear interpolation."""
        self._ensure_cdf()
        u = rng.uniform(0.0, 1.0, (n,))
        return np.interp(u, self._cdf, self._grid)[:, None]


class Spiral:
    """2D spiral: t ~ U(0, 5 pi), point = (t cos t, t sin t)/20 + N(0, 0.02^2 I).

    The density is not given in closed form by the generative process; it
    is evaluated by trapezoid quadrature over the curve parameter t, which
    makes the forward KL exactly computable instead of entropy-estimated.
    """

    name = "spiral"
    event_shape = (2,)
    has_density = True
    has_sampler = True

    T_MAX = 5.0 * np.pi
    SCALE = 1.0 / 20.0
    SIGMA = 0.02

    _entropy_cache: dict = {}

    def __init__(self, n_nodes: int = 4096):
        self.n_nodes = n_nodes
        t = np.linspace(0.0, self.T_MAX, n_nodes)
        self._curve = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) * self.SCALE
        self._curve_sq = (self._curve**2).sum(axis=1)
        w = np.full(n_nodes, t[1] - t[0])
        w[0] *= 0.5
        w[-1] *= 0.5
        self._log_w = np.log(w / self.T_MAX)

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        t = rng.uniform(0.0, self.T_MAX, (n,))
        pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) * self.SCALE
        return pts + self.SIGMA * rng.normal((n, 2))

    def log_density(self, x, sigma=None, chunk=16384):
        """log p(x) = log (1/5pi) int N(x | curve(t), sigma^2 I) dt.

        `sigma` defaults to the generative noise scale; passing the
        KDE-inflated value sqrt(SIGMA^2 + bw^2) gives the density of
        kernel-smoothed samples exactly.
        """
        sigma = self.SIGMA if sigma is None else sigma
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(len(x))
        const = -np.log(2.0 * np.pi * sigma * sigma)
        inv2s2 = 0.5 / (sigma * sigma)
        for i in range(0, len(x), chunk):
            xb = x[i : i + chunk]
            # |x - c|^2 = |x|^2 + |c|^2 - 2 x.c, the cross term via BLAS
            d2 = (xb**2).sum(axis=1)[:, None] + self._curve_sq - 2.0 * (xb @ self._curve.T)
            out[i : i + chunk] = logsumexp(-inv2s2 * d2 + self._log_w, axis=1)
        return out + const

    def log_unnorm(self, x):
        if ad.is_variable(x):
            raise NotImplementedError("spiral density is evaluation-only")
        return self.log_density(x)

    def entropy(self, grid_step=0.005, pad=0.12):
        """Differential entropy by 2D grid quadrature over the support."""
        key = (self.n_nodes, grid_step, pad)
        if key not in Spiral._entropy_cache:
            lim = self.T_MAX * self.SCALE + pad
            axis = np.arange(-lim, lim + grid_step, grid_step)
            h = 0.0
            for row in np.array_split(axis, 8):
                pts = np.stack(
                    [np.repeat(row, len(axis)), np.tile(axis, len(row))], axis=1
                )
                lp = self.log_density(pts)
                p = np.exp(lp)
                h -= np.sum(p * lp) * grid_step * grid_step
            Spiral._entropy_cache[key] = float(h)
        return Spiral._entropy_cache[key]


class GMM:
    """Mixture of 5 equal-weight isotropic Gaussians, means on a circle of
    radius 2 at angles 2 pi k / 5, sigma = 0.2 (pentagonal arrangement)."""

    name = "gmm"
    event_shape = (2,)
    has_density = True
    has_sampler = True

    def __init__(self, n_components: int = 5, radius: float = 2.0, sigma: float = 0.2):
        self.k = n_components
        self.radius = radius
        self.sigma = sigma
        ang = 2.0 * np.pi * np.arange(self.k) / self.k
        self.means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        self._entropy = None

    def log_unnorm(self, x):
        s2 = self.sigma * self.sigma
        comps = []
        b = val(x).shape[0]
        for mu in self.means:
            d = x - mu
            comps.append(ad.reshape(-0.5 * ad.tsum(d * d, axis=1) / s2, (b, 1)))
        lse = ad.logsumexp(ad.concat(comps, axis=1), axis=1)
        return lse - np.log(self.k) - np.log(2.0 * np.pi * s2)

    def log_density(self, x):
        return val(self.log_unnorm(np.asarray(x, dtype=float)))

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        comp = rng.integers(0, self.k, (n,))
        return self.means[comp] + self.sigma * rng.normal((n, 2))

    def entropy(self, grid_step=0.008, pad=1.4):
        if self._entropy is None:
            lim = self.radius + pad
            axis = np.arange(-lim, lim + grid_step, grid_step)
            xx, yy = np.meshgrid(axis, axis, indexing="ij")
            pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
            lp = self.log_density(pts)
            p = np.exp(lp)
            self._entropy = float(-np.sum(p * lp) * grid_step * grid_step)
        return self._entropy

    def entropy_mc(self, rng: Rng, n: int = 200000):
        x = self.sample(rng, n)
        return float(-np.mean(self.log_density(x)))


# ---------------------------------------------------------------------------
# phi^4 lattice field theory


def _roll_m1(phi, axis):
    """roll(phi, -1, axis) built from slices so it stays differentiable."""
    sl_head = [slice(None)] * np.ndim(val(phi))
    sl_tail = [slice(None)] * np.ndim(val(phi))
    sl_head[axis] = slice(1, None)
    sl_tail[axis] = slice(0, 1)
    return ad.concat([phi[tuple(sl_head)], phi[tuple(sl_tail)]], axis=axis)


def phi4_action(phi, m2: float, lam: float):
    """S = sum_x [ sum_mu (phi_{x+mu} - phi_x)^2 + m2 phi^2 + lam phi^4 ]
    with periodic wrapping; batched over the leading axis."""
    axes = tuple(range(1, np.ndim(val(phi))))
    total = None
    for axis in axes:
        d = _roll_m1(phi, axis) - phi
        k = ad.tsum(d * d, axis=axes)
        total = k if total is None else total + k
    p2 = phi * phi
    total = total + m2 * ad.tsum(p2, axis=axes)
    total = total + lam * ad.tsum(p2 * p2, axis=axes)
    return total


def magnetization(phi):
    """Spatially averaged field value per configuration."""
    return ad.tmean(phi, axis=tuple(range(1, np.ndim(val(phi)))))


class Phi4:
    """phi^4 scalar field theory on an L x L periodic lattice;
    p(phi) proportional to exp(-S[phi])."""

    name = "phi4"
    has_density = True
    has_sampler = False

    def __init__(self, L: int, m2: float = -4.0, lam: float = 6.975):
        self.L = L
        self.m2 = float(m2)
        self.lam = float(lam)
        self.event_shape = (L, L)

    def action(self, phi):
        return phi4_action(phi, self.m2, self.lam)

    def log_unnorm(self, phi):
        return -self.action(phi)


def metropolis_phi4(
    rng: Rng,
    L: int,
    m2: float,
    lam: float,
    sweeps: int,
    proposal_width: float = 1.0,
    init: str = "hot",
    start_sign: int = 1,
    burn_in: int = 0,
    phi0: np.ndarray | None = None,
):
    """Site-wise random-walk Metropolis for the phi^4 action.

    Sites are updated in checkerboard order (the two sublattices do not
    interact, so each site sees fixed neighbors when its proposal is
    judged); one sweep = L^2 single-site proposals with acceptance
    min(1, exp(-dS)). Returns per-sweep magnetization and action traces,
    the mean acceptance rate, and the final configuration.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    if phi0 is not None:
        phi = np.array(phi0, dtype=float)
    elif init == "hot":
        phi = start_sign * np.abs(rng.normal((L, L))) * 0.8
    elif init == "cold":
        phi = np.zeros((L, L))
    else:
        raise ValueError(f"unknown init {init!r}")

    ii, jj = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    colors = [((ii + jj) % 2 == c) for c in (0, 1)]

    m_trace = np.empty(sweeps)
    s_trace = np.empty(sweeps)
    accepted = 0
    total = 0
    for sweep in range(sweeps):
        for mask in colors:
            prop = phi + proposal_width * rng.normal((L, L))
            nsum = (
                np.roll(phi, 1, 0)
                + np.roll(phi, -1, 0)
                + np.roll(phi, 1, 1)
                + np.roll(phi, -1, 1)
            )
            # sum over the 4 bonds touching each site plus local potential
            ds = (
                2.0 * (prop * prop - phi * phi) * 2.0
                - 2.0 * (prop - phi) * nsum
                + m2 * (prop * prop - phi * phi)
                + lam * (prop**4 - phi**4)
            )
            u = rng.uniform(0.0, 1.0, (L, L))
            acc = (np.log(np.maximum(u, 1e-300)) < -ds) & mask
            phi = np.where(acc, prop, phi)
            accepted += int(acc.sum())
            total += int(mask.sum())
        m_trace[sweep] = phi.mean()
        s_trace[sweep] = float(phi4_action(phi[None], m2, lam)[0])
    return {
        "M": m_trace[burn_in:],
        "S": s_trace[burn_in:],
        "accept_rate": accepted / total,
        "final": phi,
    }


def tune_proposal_width(rng: Rng, L: int, m2: float, lam: float, target=0.5, rounds=4):
    """Short pilot runs adjusting the proposal width toward ~50% acceptance."""
    width = 1.0
    for _ in range(rounds):
        out = metropolis_phi4(rng, L, m2, lam, sweeps=60, proposal_width=width)
        acc = max(out["accept_rate"], 1e-3)
        width *= np.sqrt(acc / target)
    return float(width)


def bimodality_profile(m_samples, bins=40):
    """Histogram shape diagnostics of a magnetization trace: the ratio of
    the central density to the peak density and the peak |M| location."""
    m = np.asarray(m_samples)
    lim = max(1e-6, np.percentile(np.abs(m), 99.5)) * 1.2
    hist, edges = np.histogram(m, bins=bins, range=(-lim, lim), density=True)
    centers = 0.5 * (edges[1:] + edges[:-1])
    mid = bins // 2
    central = hist[mid - 1 : mid + 1].mean()
    peak = hist.max()
    return {
        "dip_ratio": float(central / peak) if peak > 0 else 1.0,
        "peak_loc": float(abs(centers[np.argmax(hist)])),
        "m_std": float(m.std()),
    }


def choose_phi4_lambda(
    rng: Rng,
    L: int,
    m2: float,
    mode: str,
    candidates=None,
    sweeps: int = 4000,
    burn_in: int = 500,
):
    """Scan quartic couplings with the Metropolis oracle and pick one whose
    magnetization histogram is clearly unimodal or clearly bimodal.

    For `mode="unimodal"` the smallest clearly-unimodal candidate is chosen
    (closest to the transition, so the target retains structure); for
    `mode="bimodal"` the largest clearly-bimodal one (well-separated modes
    that the oracle can still mix between). Chains from +/- hot starts are
    pooled so metastability cannot masquerade as unimodality.
    """
    if candidates is None:
        candidates = (
            [5.0, 5.5, 6.0, 6.5, 7.0, 8.0] if mode == "unimodal" else [3.0, 3.5, 4.0, 4.5, 5.0]
        )
    results = {}
    for lam in candidates:
        width = tune_proposal_width(rng, L, m2, lam)
        pools = []
        for sign in (1, -1):
            out = metropolis_phi4(
                rng, L, m2, lam, sweeps=sweeps, proposal_width=width,
                init="hot", start_sign=sign, burn_in=burn_in,
            )
            pools.append(out["M"])
        results[lam] = bimodality_profile(np.concatenate(pools))
    if mode == "unimodal":
        ok = [lam for lam in candidates if results[lam]["dip_ratio"] >= 0.9]
        chosen = min(ok) if ok else max(candidates)
    else:
        ok = [
            lam
            for lam in candidates
            if results[lam]["dip_ratio"] <= 0.3
            and results[lam]["peak_loc"] > 1.5 * np.sqrt(-m2 / (8.0 * lam))
        ]
        chosen = max(ok) if ok else min(candidates)
    return float(chosen), results


def make_target(name: str, **kwargs):
    """Target factory used by run configs."""
    if name == "osc_poly":
        return OscPoly()
    if name == "spiral":
        return Spiral()
    if name == "gmm":
        return GMM()
    if name == "phi4":
        return Phi4(kwargs["L"], kwargs.get("m2", -4.0), kwargs.get("lam", 6.975))
    raise ValueError(f"unknown target {name!r}")
