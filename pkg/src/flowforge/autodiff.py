"""Tape-based reverse-mode automatic differentiation over dense float64
numpy arrays.

Design notes:

* A `Tape` is an append-only list of nodes in topological order; `backward`
  walks it strictly in reverse. Tapes are single-owner: one recording at a
  time per tape, distinct tapes may run concurrently.
* Every math function here is dual-mode: given a `Variable` it records a
  node, given a plain ndarray/float it just calls numpy. This lets flow and
  target code be written once and run gradient-free at full numpy speed.
* Non-differentiable points (abs, sign/where branches) use subgradient 0;
  they sit on null sets for every use in this package.
* Binary ops follow numpy broadcasting; the adjoint sums gradients back to
  the original operand shapes.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class Variable:
    """A tensor plus its node id on a recording tape."""

    __slots__ = ("value", "tape", "node")

    # force numpy to defer mixed ndarray/Variable arithmetic to the
    # reflected operators below instead of building object arrays
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, value, tape, node):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Variable(node={self.node}, shape={self.value.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return tslice(self, key)


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Recording of primitive applications; owns node storage."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Variable:
        """Register an input tensor; gradients accumulate at leaves."""
        value = np.asarray(value, dtype=float)
        nodes = self.nodes
        nodes.append(_Node((), None))
        return Variable(value, self, len(nodes) - 1)

    def record(self, value, parents, vjp) -> Variable:
        nodes = self.nodes
        nodes.append(_Node(parents, vjp))
        return Variable(value, self, len(nodes) - 1)


def is_variable(x) -> bool:
    return type(x) is Variable


def val(x):
    """Underlying ndarray of a Variable, or the input unchanged."""
    return x.value if type(x) is Variable else x


class Gradients:
    """Result of `backward`: cotangents keyed by tape node id."""

    __slots__ = ("_grads", "_tape")

    def __init__(self, grads, tape):
        self._grads = grads
        self._tape = tape

    def wrt(self, var: Variable) -> np.ndarray:
        """Gradient w.r.t. `var`, zeros if the output does not reach it."""
        g = self._grads[var.node]
        if g is None:
            return np.zeros_like(np.asarray(var.value, dtype=float))
        return np.broadcast_to(g, np.shape(var.value)) if np.shape(g) != np.shape(var.value) else g


def backward(tape: Tape, out: Variable) -> Gradients:
    """Reverse sweep from a scalar output; returns per-leaf gradients."""
    if np.size(out.value) != 1:
        raise ValueError("backward requires a scalar (single-element) output")
    if out.tape is not tape:
        raise ValueError("output was not recorded on this tape")
    nodes = tape.nodes
    ct = [None] * len(nodes)
    ct[out.node] = np.ones_like(np.asarray(out.value, dtype=float))
    for i in range(out.node, -1, -1):
        g = ct[i]
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            ct[p] = pg if ct[p] is None else ct[p] + pg
    return Gradients(ct, tape)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (adjoint of numpy broadcasting)."""
    if np.shape(g) == shape:
        return g
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# binary primitives


def add(x, y):
    xv = type(x) is Variable
    yv = type(y) is Variable
    if not (xv or yv):
        return np.add(x, y)
    out = np.add(x.value if xv else x, y.value if yv else y)
    os = out.shape
    if xv and yv:
        xs, ys = x.value.shape, y.value.shape
        if xs == os and ys == os:
            return x.tape.record(out, (x.node, y.node), lambda g: (g, g))
        return x.tape.record(
            out,
            (x.node, y.node),
            lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)),
        )
    v = x if xv else y
    vs = v.value.shape
    if vs == os:
        return v.tape.record(out, (v.node,), lambda g: (g,))
    return v.tape.record(out, (v.node,), lambda g: (_unbroadcast(g, vs),))


def sub(x, y):
    xv = type(x) is Variable
    yv = type(y) is Variable
    if not (xv or yv):
        return np.subtract(x, y)
    out = np.subtract(x.value if xv else x, y.value if yv else y)
    os = out.shape
    if xv and yv:
        xs, ys = x.value.shape, y.value.shape
        if xs == os and ys == os:
            return x.tape.record(out, (x.node, y.node), lambda g: (g, -g))
        return x.tape.record(
            out,
            (x.node, y.node),
            lambda g: (_unbroadcast(g, xs), -_unbroadcast(g, ys)),
        )
    if xv:
        xs = x.value.shape
        if xs == os:
            return x.tape.record(out, (x.node,), lambda g: (g,))
        return x.tape.record(out, (x.node,), lambda g: (_unbroadcast(g, xs),))
    ys = y.value.shape
    if ys == os:
        return y.tape.record(out, (y.node,), lambda g: (-g,))
    return y.tape.record(out, (y.node,), lambda g: (-_unbroadcast(g, ys),))


def mul(x, y):
    xv = type(x) is Variable
    yv = type(y) is Variable
    if not (xv or yv):
        return np.multiply(x, y)
    a = x.value if xv else x
    b = y.value if yv else y
    out = np.multiply(a, b)
    os = out.shape
    if xv and yv:
        xs, ys = a.shape, b.shape
        if xs == os and ys == os:
            return x.tape.record(
                out, (x.node, y.node), lambda g: (g * b, g * a)
            )
        return x.tape.record(
            out,
            (x.node, y.node),
            lambda g: (_unbroadcast(g * b, xs), _unbroadcast(g * a, ys)),
        )
    if xv:
        xs = a.shape
        if xs == os:
            return x.tape.record(out, (x.node,), lambda g: (g * b,))
        return x.tape.record(out, (x.node,), lambda g: (_unbroadcast(g * b, xs),))
    ys = np.shape(b)
    if ys == os:
        return y.tape.record(out, (y.node,), lambda g: (g * a,))
    return y.tape.record(out, (y.node,), lambda g: (_unbroadcast(g * a, ys),))


def div(x, y):
    xv = type(x) is Variable
    yv = type(y) is Variable
    if not (xv or yv):
        return np.divide(x, y)
    a = x.value if xv else x
    b = y.value if yv else y
    out = np.divide(a, b)
    os = out.shape
    if xv and yv:
        xs, ys = a.shape, b.shape
        if xs == os and ys == os:
            return x.tape.record(
                out, (x.node, y.node), lambda g: (g / b, -g * out / b)
            )
        return x.tape.record(
            out,
            (x.node, y.node),
            lambda g: (_unbroadcast(g / b, xs), _unbroadcast(-g * out / b, ys)),
        )
    if xv:
        xs = a.shape
        if xs == os:
            return x.tape.record(out, (x.node,), lambda g: (g / b,))
        return x.tape.record(out, (x.node,), lambda g: (_unbroadcast(g / b, xs),))
    ys = np.shape(b)
    if ys == os:
        return y.tape.record(out, (y.node,), lambda g: (-g * out / b,))
    return y.tape.record(out, (y.node,), lambda g: (_unbroadcast(-g * out / b, ys),))


def neg(x):
    if type(x) is not Variable:
        return np.negative(x)
    return x.tape.record(np.negative(x.value), (x.node,), lambda g: (-g,))


def matmul(x, y):
    xv = type(x) is Variable
    yv = type(y) is Variable
    if not (xv or yv):
        return np.matmul(x, y)
    a = x.value if xv else np.asarray(x)
    b = y.value if yv else np.asarray(y)
    out = np.matmul(a, b)
    at = np.swapaxes(a, -1, -2)
    bt = np.swapaxes(b, -1, -2)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, bt), a.shape) if xv else None
        gb = _unbroadcast(np.matmul(at, g), b.shape) if yv else None
        return tuple(gg for gg in (ga, gb) if gg is not None)

    if xv and yv:
        return x.tape.record(out, (x.node, y.node), vjp)
    v = x if xv else y
    return v.tape.record(out, (v.node,), vjp)


def power(x, p):
    """x ** p for a constant (non-Variable) exponent."""
    if type(p) is Variable:
        raise TypeError("power exponent must be a constant")
    if type(x) is not Variable:
        return np.power(x, p)
    xval = x.value
    out = np.power(xval, p)
    return x.tape.record(out, (x.node,), lambda g: (g * p * np.power(xval, p - 1),))


def atan2(y, x):
    yv = type(y) is Variable
    xv = type(x) is Variable
    if not (xv or yv):
        return np.arctan2(y, x)
    a = y.value if yv else y
    b = x.value if xv else x
    out = np.arctan2(a, b)
    denom = a * a + b * b

    def vjp(g):
        gy = _unbroadcast(g * b / denom, np.shape(a)) if yv else None
        gx = _unbroadcast(-g * a / denom, np.shape(b)) if xv else None
        return tuple(gg for gg in (gy, gx) if gg is not None)

    if yv and xv:
        return y.tape.record(out, (y.node, x.node), vjp)
    v = y if yv else x
    return v.tape.record(out, (v.node,), vjp)


# ---------------------------------------------------------------------------
# elementwise primitives


def _unary(x, fval, make_vjp):
    if type(x) is not Variable:
        return fval(x)
    out = fval(x.value)
    return x.tape.record(out, (x.node,), make_vjp(x.value, out))


def exp(x):
    return _unary(x, np.exp, lambda xv, out: lambda g: (g * out,))


def log(x):
    return _unary(x, np.log, lambda xv, out: lambda g: (g / xv,))


def log1p(x):
    return _unary(x, np.log1p, lambda xv, out: lambda g: (g / (1.0 + xv),))


def sinh(x):
    return _unary(x, np.sinh, lambda xv, out: lambda g: (g * np.cosh(xv),))


def cosh(x):
    return _unary(x, np.cosh, lambda xv, out: lambda g: (g * np.sinh(xv),))


def arcsinh(x):
    return _unary(
        x, np.arcsinh, lambda xv, out: lambda g: (g / np.sqrt(1.0 + xv * xv),)
    )


def tanh(x):
    return _unary(x, np.tanh, lambda xv, out: lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    return _unary(
        x, kernels.sigmoid, lambda xv, out: lambda g: (g * out * (1.0 - out),)
    )


def softplus(x):
    return _unary(
        x, kernels.softplus, lambda xv, out: lambda g: (g * kernels.sigmoid(xv),)
    )


def sqrt(x):
    return _unary(x, np.sqrt, lambda xv, out: lambda g: (g * 0.5 / out,))


def cbrt(x):
    return _unary(x, np.cbrt, lambda xv, out: lambda g: (g / (3.0 * out * out),))


def absolute(x):
    # subgradient at 0 is 0 (sign(0) == 0)
    return _unary(x, np.abs, lambda xv, out: lambda g: (g * np.sign(xv),))


def sin(x):
    return _unary(x, np.sin, lambda xv, out: lambda g: (g * np.cos(xv),))


def cos(x):
    return _unary(x, np.cos, lambda xv, out: lambda g: (-g * np.sin(xv),))


# ---------------------------------------------------------------------------
# reductions and shape primitives


def tsum(x, axis=None):
    if type(x) is not Variable:
        return np.sum(x, axis=axis)
    xv = x.value
    out = np.sum(xv, axis=axis)
    shape = xv.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        gx = np.expand_dims(g, axis)
        return (np.broadcast_to(gx, shape),)

    return x.tape.record(out, (x.node,), vjp)


def tmean(x, axis=None):
    if type(x) is not Variable:
        return np.mean(x, axis=axis)
    xv = x.value
    if axis is None:
        n = xv.size
    elif isinstance(axis, tuple):
        n = int(np.prod([xv.shape[a] for a in axis]))
    else:
        n = xv.shape[axis]
    out = np.mean(xv, axis=axis)
    shape = xv.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape),)
        gx = np.expand_dims(g, axis) / n
        return (np.broadcast_to(gx, shape),)

    return x.tape.record(out, (x.node,), vjp)


def reshape(x, shape):
    if type(x) is not Variable:
        return np.reshape(x, shape)
    old = x.value.shape
    return x.tape.record(
        np.reshape(x.value, shape), (x.node,), lambda g: (np.reshape(g, old),)
    )


def broadcast_to(x, shape):
    if type(x) is not Variable:
        return np.broadcast_to(x, shape)
    old = x.value.shape
    return x.tape.record(
        np.broadcast_to(x.value, shape), (x.node,), lambda g: (_unbroadcast(g, old),)
    )


def concat(parts, axis=0):
    if not any(type(p) is Variable for p in parts):
        return np.concatenate(parts, axis=axis)
    tape = next(p.tape for p in parts if type(p) is Variable)
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    var_idx = [i for i, p in enumerate(parts) if type(p) is Variable]
    parents = tuple(parts[i].node for i in var_idx)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in var_idx:
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return tape.record(out, parents, vjp)


def tslice(x, key):
    """Basic indexing (slices / ints); adjoint scatters into zeros."""
    if type(x) is not Variable:
        return x[key]
    xv = x.value
    out = xv[key]
    shape = xv.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=float)
        gx[key] = g
        return (gx,)

    return x.tape.record(out, (x.node,), vjp)


def take_axis1(x, idx, inv_perms=None, unique=False):
    """Fancy-index gather along axis 1 (generalized slice); duplicates in
    `idx` accumulate in the adjoint.

    Fast adjoint paths: pass `inv_perms` when `idx` is a permutation of
    axis 1 (or 2D with permutation columns) to turn the scatter into
    gathers, or `unique=True` when indices are distinct (scatter becomes
    plain assignment into zeros).
    """
    if type(x) is not Variable:
        return x[:, idx]
    xv = x.value
    out = xv[:, idx]
    shape = xv.shape

    if inv_perms is not None and np.ndim(idx) == 1:
        inv = inv_perms if isinstance(inv_perms, np.ndarray) else inv_perms[0]

        def vjp(g):
            return (g[:, inv],)
    elif inv_perms is not None:
        def vjp(g):
            gx = g[:, inv_perms[0], 0]
            for k in range(1, len(inv_perms)):
                gx = gx + g[:, inv_perms[k], k]
            return (gx,)
    elif unique:
        def vjp(g):
            gx = np.zeros(shape, dtype=float)
            gx[:, idx] = g
            return (gx,)
    else:
        def vjp(g):
            gx = np.zeros(shape, dtype=float)
            np.add.at(gx, (slice(None), idx), g)
            return (gx,)

    return x.tape.record(out, (x.node,), vjp)


def where(mask, a, b):
    """Branch select with a constant boolean mask."""
    av = type(a) is Variable
    bv = type(b) is Variable
    mask = np.asarray(val(mask))
    if not (av or bv):
        return np.where(mask, a, b)
    aval = a.value if av else a
    bval = b.value if bv else b
    out = np.where(mask, aval, bval)

    def vjp(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), np.shape(aval)) if av else None
        gb = _unbroadcast(np.where(mask, 0.0, g), np.shape(bval)) if bv else None
        return tuple(gg for gg in (ga, gb) if gg is not None)

    if av and bv:
        return a.tape.record(out, (a.node, b.node), vjp)
    v = a if av else b
    return v.tape.record(out, (v.node,), vjp)


# ---------------------------------------------------------------------------
# stable composites (built from primitives, dual-mode like everything else)


def log_cosh(x):
    """|x| + log1p(exp(-2|x|)) - log 2, overflow-safe."""
    ax = absolute(x)
    return ax + log1p(exp(-2.0 * ax)) - kernels.LOG2


def half_log1p_sq(z):
    """0.5*log(1+z^2) switching to log|z| for z^2 >= 1e8."""
    az = absolute(z)
    big = val(az) >= 1e4
    z_small = where(big, 0.0, z)
    z_big = where(big, az, 1.0)
    return where(big, log(z_big), 0.5 * log1p(z_small * z_small))


def gelu(x):
    """tanh approximation of x * Phi(x)."""
    c = 0.7978845608028654  # sqrt(2/pi)
    return 0.5 * (x * (tanh((x + 0.044715 * (x * x * x)) * c) + 1.0))


def logsumexp(x, axis=None):
    m = np.max(val(x), axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = tsum(exp(x - m), axis=axis)
    out = log(s) + (np.squeeze(m, axis=axis) if axis is not None else m.reshape(()))
    return out


def implicit_root(root_value, residual_fn, derivative_fn):
    """Reattach a numerically computed root to the tape.

    `root_value` solves residual_fn(root) == 0 for tape-tracked residual
    parameters. Returns root - residual(root)/derivative(root) with the
    root itself held constant: the value gains one Newton polish and the
    gradients are exactly the implicit-function-theorem cotangents.
    """
    r = val(root_value)
    return r - residual_fn(r) / derivative_fn(r)


# ---------------------------------------------------------------------------
# spec'd operation surface

_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "log1p": log1p,
    "sinh": sinh,
    "arcsinh": arcsinh,
    "cosh": cosh,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "sqrt": sqrt,
    "cbrt": cbrt,
    "abs": absolute,
    "sin": sin,
    "cos": cos,
    "atan2": atan2,
    "power": power,
    "sum": tsum,
    "mean": tmean,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "concat": concat,
    "slice": tslice,
    "take": take_axis1,
    "where": where,
}


def apply_primitive(tape: Tape, op: str, *inputs, **kwargs):
    """Apply a named primitive to Variables/arrays on `tape`.

    Raises KeyError-style contract errors for unknown ops; shape errors
    propagate from numpy as ValueError.
    """
    if op not in _PRIMITIVES:
        raise ValueError(f"unsupported primitive: {op!r}")
    for x in inputs:
        if type(x) is Variable and x.tape is not tape:
            raise ValueError("input recorded on a different tape")
    return _PRIMITIVES[op](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


class ProbeError(RuntimeError):
    """Raised when the function is non-finite at a probe point."""

    def __init__(self, coord, point_desc):
        self.coord = coord
        super().__init__(f"non-finite value probing coordinate {coord} ({point_desc})")


class GradCheckResult:
    """Central-difference comparison for a scalar function of a vector."""

    def __init__(self, max_rel_error, rel_errors, unreliable):
        self.max_rel_error = max_rel_error
        self.rel_errors = rel_errors
        #: coordinates where one-sided slopes disagree (kink at the probe
        #: point); the reported error there is not meaningful
        self.unreliable = unreliable

    def __repr__(self):
        return (
            f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
            f"unreliable={sorted(self.unreliable)})"
        )


def grad_check(f, theta, h=1e-5, max_coords=1000, rng=None) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar `f` against central
    finite differences at `theta`.

    All coordinates are probed unless there are more than `max_coords`,
    in which case a random subset is used. Coordinates where the forward
    and backward one-sided slopes disagree are flagged `unreliable`
    rather than scored (central differences straddle a kink there).
    """
    theta = np.asarray(theta, dtype=float).ravel()
    tape = Tape()
    v = tape.leaf(theta)
    out = f(v)
    if np.size(val(out)) != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    g = backward(tape, out).wrt(v)

    n = theta.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        gen = rng if rng is not None else kernels.Rng(0)
        coords = np.unique(gen.integers(0, n, (max_coords,)))

    f0 = float(val(f(theta)))
    if not np.isfinite(f0):
        raise ProbeError(-1, "center")

    rel_errors = {}
    unreliable = set()
    max_rel = 0.0
    for i in coords:
        step = h * max(1.0, abs(theta[i]))
        tp = theta.copy()
        tp[i] += step
        tm = theta.copy()
        tm[i] -= step
        fp = float(val(f(tp)))
        fm = float(val(f(tm)))
        if not np.isfinite(fp):
            raise ProbeError(int(i), "+h")
        if not np.isfinite(fm):
            raise ProbeError(int(i), "-h")
        fwd = (fp - f0) / step
        bwd = (f0 - fm) / step
        central = (fp - fm) / (2.0 * step)
        # kink detector: one-sided slopes differ by O(1) at a kink but by
        # O(h * f'') for smooth f, so require both a relative and an
        # absolute gap before flagging
        slope_scale = max(abs(fwd), abs(bwd), 1e-8)
        if abs(fwd - bwd) > 0.25 * slope_scale and abs(fwd - bwd) > 1e-3:
            unreliable.add(int(i))
            continue
        scale = max(abs(central), abs(g[i]), 1e-10)
        err = abs(central - g[i]) / scale
        rel_errors[int(i)] = err
        max_rel = max(max_rel, err)
    return GradCheckResult(max_rel, rel_errors, unreliable)
