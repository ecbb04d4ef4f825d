"""Foundational numerics: a monotone-cubic Cardano solver, overflow-safe
special functions, a small direct 2D Fourier transform, and a seeded
counter-based PRNG.

Everything here is pure numpy (no autodiff); all functions are vectorized
over array inputs and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG2 = float(np.log(2.0))

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# cubic solver


@dataclass(frozen=True)
class CubicCoeffs:
    """Coefficients of a*x^3 + b*x^2 + c*x + d = 0 with a != 0.

    Callers must guarantee the cubic is strictly monotone on the reals,
    so exactly one real root exists.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray


def solve_monotone_cubic(coeffs: CubicCoeffs, validate: bool = True,
                         newton_polish: int = 2) -> np.ndarray:
    """Unique real root of a strictly monotone cubic, vectorized
    (coefficients broadcast against each other).

    Uses the depressed-discriminant form with
        D0 = b^2 - 3ac,  D1 = 2b^3 - 9abc + 27a^2 d,
        C  = cbrt((D1 +/- sqrt(D1^2 - 4 D0^3)) / 2)
    picking the sign that maximizes |C|, followed by Newton polish steps
    that remove the mild cancellation occurring for near-linear cubics
    (tiny leading coefficient).

    When both |D0| and |D1| are negligible relative to their natural
    scales, the cubic is treated as near-linear and the root is seeded
    from -d/c instead (then polished).
    """
    a, b, c, d = coeffs.a, coeffs.b, coeffs.c, coeffs.d
    if validate:
        for name, arr in (("a", a), ("b", b), ("c", c), ("d", d)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite cubic coefficient {name}")
        if np.any(np.asarray(a) == 0.0):
            raise ValueError("leading coefficient must be nonzero")

    ac = a * c
    d0 = b * b - 3.0 * ac
    d1 = (2.0 * (b * b) - 9.0 * ac) * b + 27.0 * (a * a) * d

    # monotone cubic => one real root => D1^2 - 4 D0^3 >= 0 (clamp roundoff)
    sq = np.sqrt(np.maximum(d1 * d1 - 4.0 * (d0 * d0 * d0), 0.0))
    big_c = np.cbrt(np.where(d1 >= 0.0, d1 + sq, d1 - sq) * 0.5)

    scale0 = b * b + 3.0 * np.abs(ac)
    scale1 = 2.0 * np.abs(b * b * b) + 9.0 * np.abs(ac * b) + 27.0 * (a * a) * np.abs(d)
    fallback = ((np.abs(d0) <= 1e-12 * scale0 + 1e-300)
                & (np.abs(d1) <= 1e-12 * scale1 + 1e-300)) | (big_c == 0.0)

    safe_c = np.where(fallback, 1.0, big_c)
    root = np.where(
        fallback,
        -d / np.where(c == 0.0, 1.0, c),
        -(b + safe_c + d0 / safe_c) / (3.0 * a),
    )

    # Newton polish: quadratic cleanup of the analytic root (p' > 0 away
    # from the excluded tangency, so the guarded step is always sane)
    for _ in range(newton_polish):
        p = ((a * root + b) * root + c) * root + d
        dp = (3.0 * a * root + 2.0 * b) * root + c
        root = root - p / np.where(dp == 0.0, 1.0, dp) * (dp != 0.0)
    return np.asarray(root, dtype=float)


# ---------------------------------------------------------------------------
# overflow-safe special functions


def log_cosh(x):
    """log(cosh(x)) as |x| + log1p(exp(-2|x|)) - log 2; never overflows."""
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - LOG2


def half_log1p_sq(z):
    """0.5 * log(1 + z^2), switching to log|z| once z^2 >= 1e8."""
    z = np.asarray(z, dtype=float)
    big = np.abs(z) >= 1e4
    zs = np.where(big, 0.0, z)
    zb = np.where(big, z, 1.0)
    return np.where(big, np.log(np.abs(zb)), 0.5 * np.log1p(zs * zs))


def softplus(x):
    """log(1 + exp(x)) evaluated without overflow."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logsumexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if axis is None else np.squeeze(out, axis=axis)


# ---------------------------------------------------------------------------
# small 2D DFT (direct matrix form; lattices here are <= 64x64)


@dataclass
class ComplexGrid:
    """Complex L x L momentum grid split into real and imaginary parts."""

    re: np.ndarray
    im: np.ndarray

    @property
    def shape(self):
        return self.re.shape


def _dft_matrices(L: int):
    k = np.arange(L)
    phase = 2.0 * np.pi * np.outer(k, k) / L
    return np.cos(phase), np.sin(phase)


def dft2(field: np.ndarray) -> ComplexGrid:
    """Forward 2D DFT, unnormalized: F_k = sum_x f_x exp(-2 pi i k.x / L).

    The inverse `idft2` carries the 1/L^2 factor, so idft2(dft2(f)) == f.
    Accepts (L, L) or batched (..., L, L) real fields.
    """
    field = np.asarray(field, dtype=float)
    if field.shape[-1] != field.shape[-2]:
        raise ValueError("dft2 requires a square field")
    L = field.shape[-1]
    cos, sin = _dft_matrices(L)
    # W = cos - i sin; F = W f W^T
    a = cos @ field @ cos - sin @ field @ sin
    b = -(cos @ field @ sin + sin @ field @ cos)
    return ComplexGrid(re=a, im=b)


def idft2(grid: ComplexGrid) -> np.ndarray:
    """Inverse of `dft2` (applies 1/L^2); returns the real part."""
    re, im = np.asarray(grid.re, dtype=float), np.asarray(grid.im, dtype=float)
    if re.shape != im.shape or re.shape[-1] != re.shape[-2]:
        raise ValueError("idft2 requires matching square re/im grids")
    L = re.shape[-1]
    cos, sin = _dft_matrices(L)
    # conj(W) = cos + i sin; f = Re[conj(W) F conj(W)^T] / L^2
    out = cos @ re @ cos - sin @ im @ cos - cos @ im @ sin - sin @ re @ sin
    return out / (L * L)


# ---------------------------------------------------------------------------
# seeded splittable PRNG (Philox counter generator under the hood)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass
class Rng:
    """Deterministic random stream keyed by (seed, stream).

    The same (seed, stream) pair always yields the same draw sequence,
    on any platform. `split` derives statistically independent child
    streams without disturbing the parent's own sequence.
    """

    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)
    _splits: int = field(default=0, init=False, repr=False, compare=False)

    def __post_init__(self):
        key = (self.seed & _MASK64, self.stream & _MASK64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape)

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        return self._gen.integers(lo, hi, size=shape)

    def split(self, n: int) -> list["Rng"]:
        self._splits += 1
        base = _splitmix64((self.stream & _MASK64) ^ _splitmix64(self._splits))
        return [Rng(self.seed, _splitmix64(base ^ (i + 1))) for i in range(n)]


def rng_normal(rng: Rng, shape=()) -> np.ndarray:
    return rng.normal(shape)


def rng_uniform(rng: Rng, lo: float, hi: float, shape=()) -> np.ndarray:
    return rng.uniform(lo, hi, shape)


def rng_split(rng: Rng, n: int) -> list[Rng]:
    return rng.split(n)
