"""Composable flow layers with exact log-determinants.

Layer types:

* ``BijectionStack``        elementwise stack of scalar bijections
* ``Coupling``              masked coupling on vectors, MLP conditioner
* ``LatticeCoupling``       checkerboard coupling on L x L fields, ConvNet
* ``Radial``                radius bijection about a learned center
* ``FourierRadial``         2D radial layer, parameters Fourier in the angle
* ``MomentumShellScaling``  per-|k| rescaling of lattice Fourier modes
* ``ZeroMode``              sign-preserving bijection of the field mean

Every layer exposes `forward(z, pv)` and `inverse(x, pv)` returning the
transformed tensor and the log-det of the applied map, where `pv` is an
optional list of parameter tensors (autodiff Variables during training,
defaults to the layer's own numpy arrays otherwise). The forward
direction maps base-distribution draws toward data.

A `Flow` composes layers over a standard-normal base and provides exact
`log_prob` and `sample`, plus JSON (de)serialization of all parameters.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from . import bijections as bj
from . import kernels
from .autodiff import val

FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    pass


class EvaluationError(RuntimeError):
    """Non-finite values produced while evaluating a flow."""

    def __init__(self, layer_index, direction):
        self.layer_index = layer_index
        super().__init__(
            f"non-finite values in layer {layer_index} ({direction} direction)"
        )


# ---------------------------------------------------------------------------
# scalar-stack plumbing shared by several layer types


class StackSpec:
    """A stack of scalar bijections applied in sequence.

    `families` lists the family of each copy, first-applied first.
    `inverted[k]` swaps the forward/inverse role of copy k (the optional
    use-the-inverse-as-a-layer variant); off by default.
    """

    def __init__(self, families, inverted=None, suppression=1.0):
        for f in families:
            if f not in bj.FAMILIES:
                raise ConfigurationError(f"unknown family {f!r}")
        self.families = list(families)
        self.inverted = list(inverted) if inverted is not None else [False] * len(families)
        self.suppression = suppression
        self.raw_sizes = [bj.RAW_COUNTS[f] for f in self.families]
        self.total_raw = sum(self.raw_sizes)
        self.offsets = np.cumsum([0] + self.raw_sizes)

    @property
    def homogeneous(self):
        return len(set(self.families)) == 1

    def init_raw(self, rng=None, center_noise=0.0, noise=0.0):
        """Flat raw parameter vector; zeros give the identity stack."""
        raw = np.zeros(self.total_raw)
        if rng is not None and (center_noise > 0 or noise > 0):
            for k, fam in enumerate(self.families):
                off = self.offsets[k]
                n = self.raw_sizes[k]
                raw[off : off + n] += noise * rng.normal((n,))
                if fam != "affine":
                    raw[off] += center_noise * rng.normal(())  # location parameter
        return raw

    def split_params(self, flat):
        params, _ = self.split_params_with_vec(flat)
        return params

    def split_params_with_vec(self, flat):
        """Constrain a flat raw vector into per-copy BijectionParams.

        For homogeneous stacks the constraint transforms run vectorized
        over copies (returned as the second element, a (K,)-vector param
        set) and only the per-copy slicing is sequential.
        """
        K = len(self.families)
        if self.homogeneous and K > 1:
            P = self.raw_sizes[0]
            mat = ad.reshape(flat, (K, P))
            cols = [mat[:, j] for j in range(P)]
            vec = bj.constrain(self.families[0], cols, self.suppression)
            names = list(vec.values.keys())
            out = []
            for k in range(K):
                out.append(
                    bj.BijectionParams(
                        self.families[0], {n: vec.values[n][k] for n in names}
                    )
                )
            return out, vec
        out = []
        for k, fam in enumerate(self.families):
            off = self.offsets[k]
            theta = [flat[off + j] for j in range(self.raw_sizes[k])]
            out.append(bj.constrain(fam, theta, self.suppression))
        return out, None

    def origin_corrections(self, vec_params):
        """f_k(0) for every copy in one vectorized bijection call; valid for
        homogeneous stacks whose copies all run the same direction."""
        if vec_params is None or any(self.inverted):
            return None
        c, _ = bj.forward(vec_params, 0.0)
        return c

    def split_params_batched(self, raw):
        """Constrain conditioner output (batch..., total_raw) into per-copy
        params. Consecutive copies of the same family are constrained in
        one vectorized call over a trailing copy axis, then sliced."""
        out = [None] * len(self.families)
        k = 0
        while k < len(self.families):
            fam = self.families[k]
            k_end = k
            while k_end < len(self.families) and self.families[k_end] == fam:
                k_end += 1
            n_run = k_end - k
            P = self.raw_sizes[k]
            if n_run == 1:
                off = self.offsets[k]
                theta = [raw[..., off + j] for j in range(P)]
                out[k] = bj.constrain(fam, theta, self.suppression)
            else:
                nd = np.ndim(ad.val(raw))
                block = raw[..., self.offsets[k] : self.offsets[k_end]]
                shape = np.shape(ad.val(block))[:-1] + (n_run, P)
                block = ad.reshape(block, shape)
                theta = [block[..., j] for j in range(P)]
                vec = bj.constrain(fam, theta, self.suppression)
                names = list(vec.values.keys())
                for i in range(n_run):
                    out[k + i] = bj.BijectionParams(
                        fam, {n: vec.values[n][..., i] for n in names}
                    )
            k = k_end
        return out

    def forward(self, params, t):
        logd = None
        for k, p in enumerate(params):
            step = bj.inverse if self.inverted[k] else bj.forward
            t, ld = step(p, t)
            logd = ld if logd is None else logd + ld
        return t, logd

    def inverse(self, params, t):
        logd = None
        for k in range(len(params) - 1, -1, -1):
            step = bj.forward if self.inverted[k] else bj.inverse
            t, ld = step(params[k], t)
            logd = ld if logd is None else logd + ld
        return t, logd

    def forward_origin_corrected(self, params, r, corrections=None):
        """Apply the stack with each copy shifted so it fixes 0:
        f~_k(r) = f_k(r) - f_k(0). The log-derivative is unchanged.

        `corrections` may carry precomputed per-copy f_k(0) values
        (from `origin_corrections`) to avoid per-copy scalar evals.
        """
        logd = None
        for k, p in enumerate(params):
            step = bj.inverse if self.inverted[k] else bj.forward
            r, ld = step(p, r)
            if corrections is not None:
                c = corrections[k]
            else:
                c, _ = step(p, 0.0)
            r = r - c
            logd = ld if logd is None else logd + ld
        return r, logd

    def inverse_origin_corrected(self, params, t, corrections=None):
        logd = None
        for k in range(len(params) - 1, -1, -1):
            fwd = bj.inverse if self.inverted[k] else bj.forward
            inv = bj.forward if self.inverted[k] else bj.inverse
            if corrections is not None:
                c = corrections[k]
            else:
                c, _ = fwd(params[k], 0.0)
            t, ld = inv(params[k], t + c)
            logd = ld if logd is None else logd + ld
        return t, logd

    def to_config(self):
        return {
            "families": self.families,
            "inverted": self.inverted,
            "suppression": self.suppression,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["families"], cfg.get("inverted"), cfg.get("suppression", 1.0))


def _event_axes(x):
    return tuple(range(1, np.ndim(val(x))))


# ---------------------------------------------------------------------------
# conditioner networks


class MLP:
    """Fully connected conditioner, GELU activations, zero-initialized
    final layer so the owning coupling layer starts at the identity."""

    def __init__(self, sizes, rng=None):
        self.sizes = list(sizes)
        self.weights = []
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            last = i == len(sizes) - 2
            if last or rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(w)
            self.weights.append(np.zeros(fan_out))

    def param_arrays(self):
        return list(self.weights)

    def set_param_arrays(self, arrs):
        self.weights = [np.asarray(a, dtype=float) for a in arrs]

    def param_labels(self):
        out = []
        for i in range(len(self.sizes) - 1):
            out += [f"w{i}", f"b{i}"]
        return out

    def __call__(self, x, pv=None):
        pv = pv if pv is not None else self.weights
        n_layers = len(self.sizes) - 1
        h = x
        for i in range(n_layers):
            h = ad.matmul(h, pv[2 * i]) + pv[2 * i + 1]
            if i < n_layers - 1:
                h = ad.gelu(h)
        return h


class ConvNet:
    """3x3 circular-padding convolutional conditioner on L x L fields
    (channels-last). Each conv is a sum over the 9 kernel offsets of a
    site permutation (circular shift) followed by a small matmul, which
    keeps both directions of the tape cheap; final layer zero-initialized.
    """

    def __init__(self, L, channels, rng=None):
        self.L = L
        self.channels = list(channels)
        self.weights = []
        for i in range(len(channels) - 1):
            c_in, c_out = channels[i], channels[i + 1]
            last = i == len(channels) - 2
            if last or rng is None:
                w = np.zeros((9 * c_in, c_out))
            else:
                w = rng.normal((9 * c_in, c_out)) * np.sqrt(2.0 / (9 * c_in + c_out))
            self.weights.append(w)
            self.weights.append(np.zeros(c_out))
        sites = np.arange(L * L).reshape(L, L)
        self._perms = []
        self._inv_perms = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                self._perms.append(np.roll(sites, (-di, -dj), axis=(0, 1)).ravel())
                self._inv_perms.append(np.roll(sites, (di, dj), axis=(0, 1)).ravel())

    def param_arrays(self):
        return list(self.weights)

    def set_param_arrays(self, arrs):
        self.weights = [np.asarray(a, dtype=float) for a in arrs]

    def param_labels(self):
        out = []
        for i in range(len(self.channels) - 1):
            out += [f"k{i}", f"b{i}"]
        return out

    def __call__(self, x, pv=None, n_apply=None):
        """x: (batch, L, L, C_in) -> (batch, L, L, C_out).

        With `n_apply` only the first n conv layers run, GELU after each
        (the trunk of a network whose head is applied separately).
        """
        pv = pv if pv is not None else self.weights
        L = self.L
        b = val(x).shape[0]
        n_layers = len(self.channels) - 1 if n_apply is None else n_apply
        h = x
        for i in range(n_layers):
            c = self.channels[i]
            w = pv[2 * i]
            flat = ad.reshape(h, (b, L * L, c))
            acc = None
            for k in range(9):
                shifted = ad.take_axis1(flat, self._perms[k], self._inv_perms[k])
                term = ad.matmul(
                    ad.reshape(shifted, (b * L * L, c)), w[k * c : (k + 1) * c]
                )
                acc = term if acc is None else acc + term
            h = acc + pv[2 * i + 1]
            h = ad.reshape(h, (b, L, L, self.channels[i + 1]))
            if i < n_layers - 1 or n_apply is not None:
                h = ad.gelu(h)
        return h


# ---------------------------------------------------------------------------
# layers


class Layer:
    name = "layer"

    def param_arrays(self) -> list:
        raise NotImplementedError

    def set_param_arrays(self, arrs):
        raise NotImplementedError

    def param_labels(self) -> list:
        raise NotImplementedError

    def forward(self, z, pv=None):
        raise NotImplementedError

    def inverse(self, x, pv=None):
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError


class BijectionStack(Layer):
    """Scalar bijection stack applied elementwise to every coordinate."""

    name = "stack"

    def __init__(self, stack: StackSpec, raw=None):
        self.stack = stack
        self.raw = np.asarray(raw, dtype=float) if raw is not None else stack.init_raw()
        if self.raw.shape != (stack.total_raw,):
            raise ConfigurationError("raw parameter vector has wrong length")

    def param_arrays(self):
        return [self.raw]

    def set_param_arrays(self, arrs):
        (self.raw,) = [np.asarray(a, dtype=float) for a in arrs]

    def param_labels(self):
        return ["raw"]

    def forward(self, z, pv=None):
        flat = pv[0] if pv is not None else self.raw
        params = self.stack.split_params(flat)
        y, logd = self.stack.forward(params, z)
        return y, ad.tsum(logd, axis=_event_axes(z))

    def inverse(self, x, pv=None):
        flat = pv[0] if pv is not None else self.raw
        params = self.stack.split_params(flat)
        z, logd = self.stack.inverse(params, x)
        return z, ad.tsum(logd, axis=_event_axes(x))

    def config(self):
        return {"stack": self.stack.to_config()}

    @classmethod
    def from_config(cls, cfg):
        return cls(StackSpec.from_config(cfg["stack"]))


class Coupling(Layer):
    """Masked coupling on d-vectors: passive coordinates pass through and
    parametrize, via an MLP conditioner, a bijection stack applied to each
    active coordinate."""

    name = "coupling"

    def __init__(self, mask, stack: StackSpec, hidden=(128, 128), rng=None):
        mask = np.asarray(mask, dtype=bool)
        if mask.all() or not mask.any():
            raise ConfigurationError("coupling mask must split coordinates")
        self.mask = mask
        self.stack = stack
        self.hidden = tuple(hidden)
        self.act_idx = np.where(mask)[0]
        self.pass_idx = np.where(~mask)[0]
        self._perm = np.argsort(np.concatenate([self.act_idx, self.pass_idx]))
        n_out = len(self.act_idx) * stack.total_raw
        self.net = MLP([len(self.pass_idx), *hidden, n_out], rng=rng)

    def param_arrays(self):
        return self.net.param_arrays()

    def set_param_arrays(self, arrs):
        self.net.set_param_arrays(arrs)

    def param_labels(self):
        return [f"net.{l}" for l in self.net.param_labels()]

    def _raw(self, x_pass, pv):
        b = val(x_pass).shape[0]
        out = self.net(x_pass, pv)
        return ad.reshape(out, (b, len(self.act_idx), self.stack.total_raw))

    def _recombine(self, y_act, x_pass):
        return ad.take_axis1(ad.concat([y_act, x_pass], axis=1), self._perm)

    def forward(self, z, pv=None):
        z_act = ad.take_axis1(z, self.act_idx)
        z_pass = ad.take_axis1(z, self.pass_idx)
        params = self.stack.split_params_batched(self._raw(z_pass, pv))
        y_act, logd = self.stack.forward(params, z_act)
        return self._recombine(y_act, z_pass), ad.tsum(logd, axis=1)

    def inverse(self, x, pv=None):
        x_act = ad.take_axis1(x, self.act_idx)
        x_pass = ad.take_axis1(x, self.pass_idx)
        params = self.stack.split_params_batched(self._raw(x_pass, pv))
        z_act, logd = self.stack.inverse(params, x_act)
        return self._recombine(z_act, x_pass), ad.tsum(logd, axis=1)

    def config(self):
        return {
            "mask": self.mask.astype(int).tolist(),
            "stack": self.stack.to_config(),
            "hidden": list(self.hidden),
            "mlp_sizes": self.net.sizes,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(
            np.asarray(cfg["mask"], dtype=bool),
            StackSpec.from_config(cfg["stack"]),
            hidden=tuple(cfg["hidden"]),
        )


class LatticeCoupling(Layer):
    """Checkerboard coupling on (batch, L, L) fields with a small circular
    ConvNet conditioner reading the masked (passive-only) field.

    The conditioner trunk runs on the full grid (it needs the passive
    neighborhood) but its final layer and the bijection stack evaluate at
    active sites only.
    """

    name = "lattice_coupling"

    def __init__(self, L, parity, stack: StackSpec, channels=16, n_hidden=2, rng=None):
        self.L = L
        self.parity = int(parity)
        self.stack = stack
        self.channels = channels
        self.n_hidden = n_hidden
        ii, jj = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
        active = ((ii + jj) % 2 == self.parity)
        self.active = active.astype(float)
        self.act_idx = np.where(active.ravel())[0]
        self.pass_idx = np.where(~active.ravel())[0]
        self._perm = np.argsort(np.concatenate([self.act_idx, self.pass_idx]))
        self.net = ConvNet(
            L, [1, *([channels] * n_hidden), stack.total_raw], rng=rng
        )
        # head conv offsets evaluated at active sites only
        self._head_idx = [p[self.act_idx] for p in self.net._perms]

    def param_arrays(self):
        return self.net.param_arrays()

    def set_param_arrays(self, arrs):
        self.net.set_param_arrays(arrs)

    def param_labels(self):
        return [f"net.{l}" for l in self.net.param_labels()]

    def _raw_params(self, field, pv):
        """Conditioner output at active sites: (batch, n_act, total_raw)."""
        pv = pv if pv is not None else self.net.weights
        b = val(field).shape[0]
        L, c = self.L, self.channels
        masked = field * (1.0 - self.active)
        hidden = self.net(
            ad.reshape(masked, (b, L, L, 1)), pv, n_apply=self.n_hidden
        )
        flat = ad.reshape(hidden, (b, L * L, c))
        w = pv[-2]
        acc = None
        for k in range(9):
            gathered = ad.take_axis1(flat, self._head_idx[k], unique=True)
            term = ad.matmul(
                ad.reshape(gathered, (b * len(self.act_idx), c)),
                w[k * c : (k + 1) * c],
            )
            acc = term if acc is None else acc + term
        raw = acc + pv[-1]
        return ad.reshape(raw, (b, len(self.act_idx), self.stack.total_raw))

    def _recombine(self, y_act, x_pass, b):
        flat = ad.take_axis1(
            ad.concat([y_act, x_pass], axis=1), self._perm, inv_perms=np.argsort(self._perm)
        )
        return ad.reshape(flat, (b, self.L, self.L))

    def forward(self, z, pv=None):
        b = val(z).shape[0]
        params = self.stack.split_params_batched(self._raw_params(z, pv))
        flat = ad.reshape(z, (b, self.L * self.L))
        z_act = ad.take_axis1(flat, self.act_idx, unique=True)
        z_pass = ad.take_axis1(flat, self.pass_idx, unique=True)
        y_act, logd = self.stack.forward(params, z_act)
        return self._recombine(y_act, z_pass, b), ad.tsum(logd, axis=1)

    def inverse(self, x, pv=None):
        b = val(x).shape[0]
        params = self.stack.split_params_batched(self._raw_params(x, pv))
        flat = ad.reshape(x, (b, self.L * self.L))
        x_act = ad.take_axis1(flat, self.act_idx, unique=True)
        x_pass = ad.take_axis1(flat, self.pass_idx, unique=True)
        z_act, logd = self.stack.inverse(params, x_act)
        return self._recombine(z_act, x_pass, b), ad.tsum(logd, axis=1)

    def config(self):
        return {
            "L": self.L,
            "parity": self.parity,
            "stack": self.stack.to_config(),
            "channels": self.channels,
            "n_hidden": self.n_hidden,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(
            cfg["L"],
            cfg["parity"],
            StackSpec.from_config(cfg["stack"]),
            channels=cfg["channels"],
            n_hidden=cfg["n_hidden"],
        )


def _radial_push(center, u, r, f_val, logfp, n):
    """Common radial output and log-det: y = c + f(r)/r * u with the
    r -> 0 limit f(r)/r -> f'(r) guarded."""
    small = val(r) < 1e-12
    r_safe = ad.where(small, 1.0, r)
    ratio = ad.where(small, ad.exp(logfp), f_val / r_safe)
    if np.any((val(f_val) <= 0.0) & ~small):
        raise EvaluationError(-1, "radial monotonicity violated (f(r) <= 0)")
    y = center + u * ad.reshape(ratio, (-1, 1))
    logdet = logfp + (n - 1) * ad.log(ratio)
    return y, logdet


class Radial(Layer):
    """Radius bijection about a learned center with per-dimension scaling.

    y = c + f(r) (x - c)/r with r = ||s . (x - c)||; the stack f is
    origin-corrected per copy so f(0) = 0. The per-dimension scales only
    reshape the radius and cancel in the Jacobian.
    """

    name = "radial"

    def __init__(self, dim, stack: StackSpec, center=None, log_scale=None, raw=None):
        self.dim = dim
        self.stack = stack
        self.center = (
            np.asarray(center, dtype=float) if center is not None else np.zeros(dim)
        )
        self.log_scale = (
            np.asarray(log_scale, dtype=float)
            if log_scale is not None
            else np.zeros(dim)
        )
        self.raw = np.asarray(raw, dtype=float) if raw is not None else stack.init_raw()

    def param_arrays(self):
        return [self.center, self.log_scale, self.raw]

    def set_param_arrays(self, arrs):
        self.center, self.log_scale, self.raw = [
            np.asarray(a, dtype=float) for a in arrs
        ]

    def param_labels(self):
        return ["center", "log_scale", "raw"]

    def _radius(self, z, center, log_scale):
        u = z - center
        su = u * ad.exp(log_scale)
        r = ad.sqrt(ad.tsum(su * su, axis=1))
        return u, r

    def forward(self, z, pv=None):
        center, log_scale, flat = pv if pv is not None else self.param_arrays()
        params, vec = self.stack.split_params_with_vec(flat)
        corr = self.stack.origin_corrections(vec)
        u, r = self._radius(z, center, log_scale)
        f_val, logfp = self.stack.forward_origin_corrected(params, r, corr)
        return _radial_push(center, u, r, f_val, logfp, self.dim)

    def inverse(self, x, pv=None):
        center, log_scale, flat = pv if pv is not None else self.param_arrays()
        params, vec = self.stack.split_params_with_vec(flat)
        corr = self.stack.origin_corrections(vec)
        u, big_r = self._radius(x, center, log_scale)
        r, log_inv = self.stack.inverse_origin_corrected(params, big_r, corr)
        small = val(big_r) < 1e-12
        rr_safe = ad.where(small, 1.0, big_r)
        ratio = ad.where(small, ad.exp(log_inv), r / rr_safe)
        z = center + u * ad.reshape(ratio, (-1, 1))
        logdet = log_inv + (self.dim - 1) * ad.log(ratio)
        return z, logdet

    def config(self):
        return {"dim": self.dim, "stack": self.stack.to_config()}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["dim"], StackSpec.from_config(cfg["stack"]))


class FourierRadial(Layer):
    """2D radial layer whose raw bijection parameters are truncated Fourier
    series in the polar angle about the center (odd number of terms so
    cos/sin harmonics pair up).

    With n_terms = 1 the layer reduces exactly to an angle-independent
    radial layer. The log-det keeps the plain radial form because the
    angle is constant along each ray.
    """

    name = "fourier_radial"

    def __init__(self, stack: StackSpec, n_terms=3, center=None, log_scale=None, coeffs=None):
        if n_terms % 2 != 1:
            raise ConfigurationError("number of Fourier terms must be odd")
        self.dim = 2
        self.stack = stack
        self.n_terms = n_terms
        self.center = (
            np.asarray(center, dtype=float) if center is not None else np.zeros(2)
        )
        self.log_scale = (
            np.asarray(log_scale, dtype=float) if log_scale is not None else np.zeros(2)
        )
        # coefficient matrix (total_raw, n_terms): column 0 is the constant
        # a_{j,0}, then alternating cos/sin coefficient pairs per harmonic
        self.coeffs = (
            np.asarray(coeffs, dtype=float)
            if coeffs is not None
            else np.zeros((stack.total_raw, n_terms))
        )
        if self.coeffs.shape != (stack.total_raw, n_terms):
            raise ConfigurationError("Fourier coefficient matrix has wrong shape")

    def param_arrays(self):
        return [self.center, self.log_scale, self.coeffs]

    def set_param_arrays(self, arrs):
        self.center, self.log_scale, self.coeffs = [
            np.asarray(a, dtype=float) for a in arrs
        ]

    def param_labels(self):
        return ["center", "log_scale", "coeffs"]

    def fourier_params(self, xhat, coeffs=None):
        """Raw parameter vector(s) for unit vector(s) `xhat` (batch, 2)."""
        coeffs = coeffs if coeffs is not None else self.coeffs
        phi = ad.atan2(xhat[:, 1], xhat[:, 0])
        return self._raw_from_phi(phi, coeffs)

    def _raw_from_phi(self, phi, coeffs):
        n_harm = (self.n_terms - 1) // 2
        b = val(phi).shape[0]
        cols = [ad.reshape(0.0 * phi + 1.0, (b, 1))]
        for k in range(1, n_harm + 1):
            cols.append(ad.reshape(ad.cos(k * phi), (b, 1)))
            cols.append(ad.reshape(ad.sin(k * phi), (b, 1)))
        basis = ad.concat(cols, axis=1) if len(cols) > 1 else cols[0]
        ct = coeffs.T if isinstance(coeffs, np.ndarray) else _transpose_var(coeffs)
        return ad.matmul(basis, ct)

    def _params_at(self, u, pv_coeffs):
        phi = ad.atan2(u[:, 1], u[:, 0])
        raw = self._raw_from_phi(phi, pv_coeffs)
        return self.stack.split_params_batched(raw)

    def forward(self, z, pv=None):
        center, log_scale, coeffs = pv if pv is not None else self.param_arrays()
        u = z - center
        su = u * ad.exp(log_scale)
        r = ad.sqrt(ad.tsum(su * su, axis=1))
        params = self._params_at(u, coeffs)
        f_val, logfp = self.stack.forward_origin_corrected(params, r)
        return _radial_push(center, u, r, f_val, logfp, 2)

    def inverse(self, x, pv=None):
        center, log_scale, coeffs = pv if pv is not None else self.param_arrays()
        u = x - center
        su = u * ad.exp(log_scale)
        big_r = ad.sqrt(ad.tsum(su * su, axis=1))
        params = self._params_at(u, coeffs)  # direction is ray-preserved
        r, log_inv = self.stack.inverse_origin_corrected(params, big_r)
        small = val(big_r) < 1e-12
        rr_safe = ad.where(small, 1.0, big_r)
        ratio = ad.where(small, ad.exp(log_inv), r / rr_safe)
        z = center + u * ad.reshape(ratio, (-1, 1))
        return z, log_inv + ad.log(ratio)

    def config(self):
        return {"stack": self.stack.to_config(), "n_terms": self.n_terms}

    @classmethod
    def from_config(cls, cfg):
        return cls(StackSpec.from_config(cfg["stack"]), n_terms=cfg["n_terms"])


def _transpose_var(coeffs):
    """Transpose a (J, K) Variable via reshape/take (J*K permutation)."""
    j, k = val(coeffs).shape
    flat = ad.reshape(coeffs, (1, j * k))
    perm = np.arange(j * k).reshape(j, k).T.ravel()
    return ad.reshape(ad.take_axis1(flat, perm), (k, j))


def shell_assignments(L):
    """Group lattice momenta by |k|^2 with k folded into [-L/2, L/2].

    Returns (shell_map (L, L) int, n_shells, counts) where counts[j] is the
    number of grid momenta in shell j, which equals the number of real
    degrees of freedom the shell carries (self-conjugate modes contribute
    one real dof each and conjugate pairs two).
    """
    k = np.arange(L)
    fold = np.minimum(k, L - k)
    k2 = fold[:, None] ** 2 + fold[None, :] ** 2
    values = np.unique(k2)
    shell_map = np.searchsorted(values, k2)
    counts = np.bincount(shell_map.ravel(), minlength=len(values)).astype(float)
    return shell_map, len(values), counts


class MomentumShellScaling(Layer):
    """Rescale lattice Fourier modes by exp(s_{|k|}), one learnable scale
    per momentum shell (shared across modes related by the lattice's 90
    degree rotation / reflection symmetry).

    log-det = sum_k s_{shell(k)} over the full momentum grid, which counts
    real degrees of freedom correctly: a conjugate pair {k, -k} holds two
    real dofs and appears twice in the grid sum, a self-conjugate mode
    holds one and appears once.
    """

    name = "momentum_shell"

    def __init__(self, L, s=None):
        self.L = L
        self.shell_map, self.n_shells, self.counts = shell_assignments(L)
        self.s = np.asarray(s, dtype=float) if s is not None else np.zeros(self.n_shells)
        cos, sin = kernels._dft_matrices(L)
        self._cos = cos
        self._sin = sin
        self._flat_map = self.shell_map.ravel()

    def param_arrays(self):
        return [self.s]

    def set_param_arrays(self, arrs):
        (self.s,) = [np.asarray(a, dtype=float) for a in arrs]

    def param_labels(self):
        return ["s"]

    def _apply(self, z, s_vec, sign):
        L, cos, sin = self.L, self._cos, self._sin
        # forward DFT of the real field: W z W^T with W = cos - i sin
        re = ad.matmul(ad.matmul(cos, z), cos) - ad.matmul(ad.matmul(sin, z), sin)
        im = -(ad.matmul(ad.matmul(cos, z), sin) + ad.matmul(ad.matmul(sin, z), cos))
        e_grid = ad.reshape(
            ad.take_axis1(ad.reshape(ad.exp(sign * s_vec), (1, self.n_shells)), self._flat_map),
            (L, L),
        )
        re = re * e_grid
        im = im * e_grid
        # real part of conj(W) F conj(W)^T / L^2
        out = (
            ad.matmul(ad.matmul(cos, re), cos)
            - ad.matmul(ad.matmul(sin, im), cos)
            - ad.matmul(ad.matmul(cos, im), sin)
            - ad.matmul(ad.matmul(sin, re), sin)
        )
        out = out * (1.0 / (L * L))
        logdet = ad.tsum(s_vec * (sign * self.counts))
        return out, logdet

    def forward(self, z, pv=None):
        s_vec = pv[0] if pv is not None else self.s
        out, logdet = self._apply(z, s_vec, +1.0)
        return out, logdet + np.zeros(val(z).shape[0])

    def inverse(self, x, pv=None):
        s_vec = pv[0] if pv is not None else self.s
        out, logdet = self._apply(x, s_vec, -1.0)
        return out, logdet + np.zeros(val(x).shape[0])

    def config(self):
        return {"L": self.L}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["L"])


class ZeroMode(Layer):
    """Sign-preserving bijection of the lattice-field mean: the stack f
    (origin-corrected, so R+ maps to R+) acts on |mean| and the sign is
    carried through, keeping exact Z2 equivariance:

        m' = sign(m) f(|m|),   phi' = phi - m + m'.

    Only the mean mode changes, so log-det = log f'(|m|).
    """

    name = "zero_mode"

    def __init__(self, stack: StackSpec, raw=None):
        self.stack = stack
        self.raw = np.asarray(raw, dtype=float) if raw is not None else stack.init_raw()

    def param_arrays(self):
        return [self.raw]

    def set_param_arrays(self, arrs):
        (self.raw,) = [np.asarray(a, dtype=float) for a in arrs]

    def param_labels(self):
        return ["raw"]

    def _shift(self, z, m_new, m_old):
        b = val(z).shape[0]
        delta = m_new - m_old
        extra = (1,) * (np.ndim(val(z)) - 1)
        return z + ad.reshape(delta, (b, *extra))

    def forward(self, z, pv=None):
        flat = pv[0] if pv is not None else self.raw
        params, vec = self.stack.split_params_with_vec(flat)
        corr = self.stack.origin_corrections(vec)
        m = ad.tmean(z, axis=_event_axes(z))
        am = ad.absolute(m)
        f_val, logfp = self.stack.forward_origin_corrected(params, am, corr)
        neg = val(m) < 0
        m_new = ad.where(neg, -f_val, f_val)
        return self._shift(z, m_new, m), logfp

    def inverse(self, x, pv=None):
        flat = pv[0] if pv is not None else self.raw
        params, vec = self.stack.split_params_with_vec(flat)
        corr = self.stack.origin_corrections(vec)
        m_new = ad.tmean(x, axis=_event_axes(x))
        am_new = ad.absolute(m_new)
        am, log_inv = self.stack.inverse_origin_corrected(params, am_new, corr)
        neg = val(m_new) < 0
        m = ad.where(neg, -am, am)
        return self._shift(x, m, m_new), log_inv

    def config(self):
        return {"stack": self.stack.to_config()}

    @classmethod
    def from_config(cls, cfg):
        return cls(StackSpec.from_config(cfg["stack"]))


_LAYER_TYPES = {
    cls.name: cls
    for cls in (
        BijectionStack,
        Coupling,
        LatticeCoupling,
        Radial,
        FourierRadial,
        MomentumShellScaling,
        ZeroMode,
    )
}


# ---------------------------------------------------------------------------
# whole flows


class Flow:
    """Ordered composition of layers over a standard-normal base.

    `forward` maps base draws to model samples; `log_prob` pulls data back
    through the inverse direction and applies the change of variables.
    """

    def __init__(self, layers, event_shape):
        self.layers = list(layers)
        self.event_shape = tuple(event_shape)
        self.dim = int(np.prod(self.event_shape)) if self.event_shape else 1

    # -- parameter plumbing

    def param_arrays(self):
        return [a for layer in self.layers for a in layer.param_arrays()]

    def set_param_arrays(self, arrs):
        i = 0
        for layer in self.layers:
            n = len(layer.param_arrays())
            layer.set_param_arrays(arrs[i : i + n])
            i += n
        if i != len(arrs):
            raise ValueError("parameter list length mismatch")

    def param_labels(self):
        out = []
        for li, layer in enumerate(self.layers):
            out += [f"L{li}.{layer.name}.{l}" for l in layer.param_labels()]
        return out

    def param_layer_indices(self):
        out = []
        for li, layer in enumerate(self.layers):
            out += [li] * len(layer.param_arrays())
        return out

    def num_params(self):
        return int(sum(a.size for a in self.param_arrays()))

    def _split_pv(self, pv):
        if pv is None:
            return [None] * len(self.layers)
        out = []
        i = 0
        for layer in self.layers:
            n = len(layer.param_arrays())
            out.append(pv[i : i + n])
            i += n
        return out

    # -- densities and sampling

    def base_log_prob(self, z):
        zz = ad.tsum(z * z, axis=_event_axes(z))
        return -0.5 * zz - 0.5 * self.dim * np.log(2.0 * np.pi)

    def forward(self, z, pv=None):
        logdet = None
        for layer, lp in zip(self.layers, self._split_pv(pv)):
            z, ld = layer.forward(z, lp)
            logdet = ld if logdet is None else logdet + ld
        if logdet is None:
            logdet = np.zeros(val(z).shape[0])
        return z, logdet

    def inverse(self, x, pv=None):
        logdet = None
        split = self._split_pv(pv)
        for li in range(len(self.layers) - 1, -1, -1):
            x, ld = self.layers[li].inverse(x, split[li])
            if not np.all(np.isfinite(val(x))):
                raise EvaluationError(li, "inverse")
            logdet = ld if logdet is None else logdet + ld
        if logdet is None:
            logdet = np.zeros(val(x).shape[0])
        return x, logdet

    def log_prob(self, x, pv=None):
        z, logdet_inv = self.inverse(x, pv)
        return self.base_log_prob(z) + logdet_inv

    def sample(self, rng, n, pv=None):
        """Draw n samples; returns (samples, exact model log-probs)."""
        z = rng.normal((n, *self.event_shape))
        base_lp = self.base_log_prob(z)
        x, logdet = self.forward(z, pv)
        return x, base_lp - logdet

    def push(self, z, pv=None):
        """Forward-transform given base draws; returns (x, log q(x))."""
        base_lp = self.base_log_prob(val(z))
        x, logdet = self.forward(z, pv)
        return x, base_lp - logdet

    # -- serialization

    def to_json(self, path=None):
        doc = {
            "format_version": FORMAT_VERSION,
            "event_shape": list(self.event_shape),
            "layers": [
                {
                    "type": layer.name,
                    "config": layer.config(),
                    "params": {
                        lbl: np.asarray(arr).tolist()
                        for lbl, arr in zip(layer.param_labels(), layer.param_arrays())
                    },
                }
                for layer in self.layers
            ],
        }
        if path is not None:
            with open(path, "w") as fh:
                json.dump(doc, fh)
        return doc

    @classmethod
    def from_json(cls, doc_or_path):
        if isinstance(doc_or_path, (str,)):
            with open(doc_or_path) as fh:
                doc = json.load(fh)
        else:
            doc = doc_or_path
        if doc.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError(
                f"unsupported flow format version: {doc.get('format_version')}"
            )
        layers = []
        for spec in doc["layers"]:
            cls_ = _LAYER_TYPES[spec["type"]]
            layer = cls_.from_config(spec["config"])
            arrs = [
                np.asarray(spec["params"][lbl], dtype=float)
                for lbl in layer.param_labels()
            ]
            layer.set_param_arrays(arrs)
            layers.append(layer)
        return cls(layers, tuple(doc["event_shape"]))
