"""Losses, optimizer, schedules, metrics, and the experiment procedures.

The experiment presets mirror the hyperparameter table of the study this
package reproduces; each ships in a "paper" tier and a reduced "desk"
tier. `train` executes one configuration deterministically under its
seed; `pretrain_then_resume` implements the two-phase strategy for the
bimodal lattice runs (momentum-shell scales and the zero-mode bijection
first, couplings frozen, then everything).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from . import flows as fl
from . import targets as tg
from .autodiff import val
from .kernels import Rng


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics


def ess(log_weights) -> float:
    """Effective sample size fraction (sum w)^2 / (N sum w^2).

    Accepts log-weights; exactly invariant to constant shifts because the
    max is subtracted before exponentiation.
    """
    lw = np.asarray(val(log_weights), dtype=float)
    if lw.size == 0:
        raise ValueError("ess of empty weight vector")
    w = np.exp(lw - np.max(lw))
    return float(np.sum(w) ** 2 / (lw.size * np.sum(w * w)))


def reverse_kl_loss(flow: fl.Flow, target, z_batch, pv=None):
    """Pathwise reverse-KL estimate E_q[log q - log p~] over pre-drawn base
    noise; gradients flow through the sample path only."""
    x, logq = flow.push(z_batch, pv)
    lp = target.log_unnorm(x)
    return ad.tmean(logq - lp)


def forward_kl_loss(flow: fl.Flow, samples, pv=None):
    """Negative log-likelihood of target samples under the flow. Adding the
    target's (quadrature) entropy turns the value into forward KL."""
    lp = flow.log_prob(samples, pv)
    return ad.tmean(0.0 - lp)


# ---------------------------------------------------------------------------
# optimizer and schedules


class AdamState:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8.

    Non-finite gradients are skipped (step counted, parameters and moments
    untouched) and reported via `n_skipped`.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.n_skipped = 0

    def step(self, params, grads, lr, frozen=()):
        """Update `params` in place (list of arrays); returns True if the
        update was applied, False if skipped for non-finite gradients."""
        self.step_count += 1
        if any(not np.all(np.isfinite(g)) for g in grads):
            self.n_skipped += 1
            return False
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for i, g in enumerate(grads):
            if i in frozen:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            params[i] = params[i] - lr * mhat / (np.sqrt(vhat) + self.eps)
        return True


def adam_step(state: AdamState, params, grads, lr):
    """Functional wrapper: returns (state, updated params)."""
    params = [p.copy() for p in params]
    state.step(params, grads, lr)
    return state, params


def make_schedule(kind: str, lr: float, total_steps: int, warmup: int = 100):
    """lr(step) factory: 'constant', 'exp_decay' (10x decay over training),
    or 'warmup_decay' (linear warmup then 10x decay)."""
    if kind == "constant":
        return lambda step: lr
    if kind == "exp_decay":
        return lambda step: lr * 10.0 ** (-step / max(total_steps, 1))
    if kind == "warmup_decay":
        tail = max(total_steps - warmup, 1)
        return lambda step: (
            lr * (step + 1) / warmup
            if step < warmup
            else lr * 10.0 ** (-(step - warmup) / tail)
        )
    raise ValueError(f"unknown schedule {kind!r}")


def clip_global_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if np.isfinite(total) and total > max_norm:
        scale = max_norm / total
        return [g * scale for g in grads], total
    return grads, total


# ---------------------------------------------------------------------------
# run configuration

PRESETS = (
    "onedim",
    "coupling2d",
    "radial2d",
    "fourier2d",
    "gmm_radial",
    "gmm_coupling",
    "phi4_coupling",
    "phi4_bimodal",
)

_CONFIG_KEYS = {
    "preset", "tier", "bijection", "K", "steps", "batch", "lr", "schedule",
    "seed", "eval_interval", "eval_batch", "n_centers", "n_copies", "n_terms",
    "coupling_layers", "hidden", "channels", "lattice_L", "m2", "lam",
    "clip_norm", "strategy", "pretrain_steps", "loss",
}


@dataclass
class RunConfig:
    """One experiment cell. Fields not meaningful for a preset keep their
    defaults and are ignored by the builder."""

    preset: str
    tier: str = "desk"
    bijection: str = "cubic_poly"
    K: int = 8                      # bijections per stack
    steps: int = 1000
    batch: int = 128
    lr: float = 1e-3
    schedule: str = "constant"
    seed: int = 0
    eval_interval: int = 500
    eval_batch: int = 4096
    n_centers: int = 10             # radial layers
    n_copies: int = 8               # bijections per radial layer
    n_terms: int = 1                # Fourier terms (odd)
    coupling_layers: int = 12
    hidden: int = 128               # MLP conditioner width
    channels: int = 16              # ConvNet conditioner channels
    lattice_L: int = 8
    m2: float = -4.0
    lam: object = "auto_unimodal"   # float or "auto_unimodal"/"auto_bimodal"
    clip_norm: object = None
    strategy: str = "pretrain"      # phi4_bimodal: "pretrain" | "naive"
    pretrain_steps: int = 0
    loss: str = "reverse_kl"

    def resolved(self) -> dict:
        d = asdict(self)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _tier(cfg_tier, desk, paper):
    return desk if cfg_tier == "desk" else paper


def preset_defaults(preset: str, tier: str = "desk") -> dict:
    """Default RunConfig fields per experiment preset and scale tier."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    base = {"preset": preset, "tier": tier}
    if preset == "onedim":
        base.update(
            bijection="cubic_poly", K=27, steps=15000, batch=128, lr=1e-3,
            schedule="exp_decay", loss="reverse_kl", eval_interval=500,
            eval_batch=4096,
        )
    elif preset == "coupling2d":
        base.update(
            bijection="cubic_poly", K=9, steps=5000, batch=256, lr=4e-4,
            schedule="warmup_decay", loss="forward_kl", coupling_layers=12,
            hidden=128, clip_norm=10.0, eval_interval=500, eval_batch=4096,
        )
    elif preset == "radial2d":
        base.update(
            bijection="cubic_poly", n_centers=40, n_copies=16,
            steps=_tier(tier, 3000, 10000), batch=128, lr=5e-3,
            schedule="constant", loss="forward_kl", eval_interval=500,
            eval_batch=4096,
        )
    elif preset == "fourier2d":
        base.update(
            bijection="cubic_poly", n_centers=1, n_copies=8, n_terms=5,
            steps=_tier(tier, 2000, 5000), batch=256, lr=1e-2,
            schedule="constant", loss="forward_kl", eval_interval=500,
            eval_batch=4096,
        )
    elif preset == "gmm_radial":
        base.update(
            bijection="cubic_poly", n_centers=32, n_copies=12,
            steps=_tier(tier, 2500, 5000), batch=256, lr=1e-2,
            schedule="constant", loss="forward_kl", eval_interval=500,
            eval_batch=4096,
        )
    elif preset == "gmm_coupling":
        base.update(
            bijection="cubic_poly", K=12, steps=_tier(tier, 2500, 5000),
            batch=256, lr=5e-4, schedule="warmup_decay", loss="forward_kl",
            coupling_layers=16, hidden=128, clip_norm=10.0,
            eval_interval=500, eval_batch=4096,
        )
    elif preset == "phi4_coupling":
        base.update(
            bijection="cubic_rational", K=8,
            steps=_tier(tier, 20000, 100000), batch=64, lr=1e-3,
            schedule="constant", loss="reverse_kl",
            coupling_layers=_tier(tier, 6, 12), channels=16,
            lattice_L=_tier(tier, 8, 20), m2=-4.0,
            lam=_tier(tier, "auto_unimodal", 4.807),
            clip_norm=10.0, eval_interval=1000, eval_batch=1024,
        )
    elif preset == "phi4_bimodal":
        base.update(
            bijection="cubic_poly", K=8,
            steps=_tier(tier, 8000, 100000), pretrain_steps=_tier(tier, 4000, 100000),
            batch=64, lr=1e-3, schedule="constant", loss="reverse_kl",
            coupling_layers=_tier(tier, 6, 12), channels=16,
            lattice_L=_tier(tier, 8, 20), m2=-4.0, lam="auto_bimodal",
            clip_norm=10.0, eval_interval=500, eval_batch=1024,
            strategy="pretrain",
        )
    return base


def make_config(preset: str, tier: str = "desk", **overrides) -> RunConfig:
    d = preset_defaults(preset, tier)
    unknown = set(overrides) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    d.update(overrides)
    return RunConfig(**d)


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    unknown = set(d) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    preset = d.pop("preset")
    tier = d.pop("tier", "desk")
    return make_config(preset, tier, **d)


# ---------------------------------------------------------------------------
# flow builders


def _coupling_suppressed_stack(cfg, families=None):
    families = families if families is not None else [cfg.bijection] * cfg.K
    return fl.StackSpec(families, suppression=10.0)


def build_flow(cfg: RunConfig, rng: Rng, lam_resolved=None):
    """Instantiate the flow and target for a configuration. Returns
    (flow, target, chosen) where `chosen` records resolved open values."""
    chosen = {"suppression_mode": "divide_by_10_and_zero_init"}
    p = cfg.preset
    if p == "onedim":
        target = tg.OscPoly()
        spec = fl.StackSpec([cfg.bijection] * cfg.K)
        raw = spec.init_raw(rng, center_noise=1.0, noise=0.01)
        flow = fl.Flow([fl.BijectionStack(spec, raw)], (1,))
        return flow, target, chosen
    if p in ("coupling2d", "gmm_coupling"):
        target = tg.Spiral() if p == "coupling2d" else tg.GMM()
        layers = []
        for i in range(cfg.coupling_layers):
            if cfg.bijection == "affine":
                spec = fl.StackSpec(["affine"], suppression=10.0)
            else:
                spec = _coupling_suppressed_stack(cfg)
            mask = np.zeros(2, dtype=bool)
            mask[i % 2] = True
            layers.append(
                fl.Coupling(mask, spec, hidden=(cfg.hidden, cfg.hidden), rng=rng)
            )
        return fl.Flow(layers, (2,)), target, chosen
    if p in ("radial2d", "fourier2d", "gmm_radial"):
        target = {"radial2d": tg.Spiral, "fourier2d": tg.Spiral, "gmm_radial": tg.GMM}[p]()
        layers = []
        for _ in range(cfg.n_centers):
            spec = fl.StackSpec([cfg.bijection] * cfg.n_copies)
            center = rng.normal((2,))
            if p == "fourier2d":
                coeffs = 0.01 * rng.normal((spec.total_raw, cfg.n_terms))
                layers.append(
                    fl.FourierRadial(spec, n_terms=cfg.n_terms, center=center, coeffs=coeffs)
                )
            else:
                raw = spec.init_raw(rng, center_noise=0.0, noise=0.01)
                layers.append(fl.Radial(2, spec, center=center, raw=raw))
        return fl.Flow(layers, (2,)), target, chosen
    if p in ("phi4_coupling", "phi4_bimodal"):
        L = cfg.lattice_L
        lam = lam_resolved if lam_resolved is not None else cfg.lam
        if not isinstance(lam, (int, float)):
            raise ValueError("phi4 coupling lambda must be resolved before build")
        target = tg.Phi4(L, cfg.m2, float(lam))
        chosen["lam"] = float(lam)
        layers = [fl.MomentumShellScaling(L)]
        if p == "phi4_bimodal" and cfg.strategy == "pretrain":
            zspec = fl.StackSpec(["cubic_poly"] * 8)
            layers.append(fl.ZeroMode(zspec, raw=zspec.init_raw(rng, noise=0.01)))
        for i in range(cfg.coupling_layers):
            if cfg.bijection == "affine":
                spec = fl.StackSpec(["affine"], suppression=10.0)
            else:
                spec = fl.StackSpec(
                    [cfg.bijection] * cfg.K + ["affine"], suppression=10.0
                )
            layers.append(
                fl.LatticeCoupling(L, i % 2, spec, channels=cfg.channels, rng=rng)
            )
        return fl.Flow(layers, (L, L)), target, chosen
    raise ValueError(f"no builder for preset {cfg.preset!r}")


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # dicts: step, ess, kl, ...
    chosen: dict = field(default_factory=dict)
    status: str = "ok"
    n_skipped: int = 0
    wall_time: float = 0.0

    def final_eval(self, key, default=None):
        for ev in reversed(self.evals):
            if key in ev and ev[key] is not None:
                return ev[key]
        return default

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "status": self.status,
            "n_skipped": self.n_skipped,
            "wall_time": self.wall_time,
            "chosen": self.chosen,
            "final": {
                "loss": self.losses[-1] if self.losses else None,
                "ess": self.final_eval("ess"),
                "kl": self.final_eval("kl"),
                "frac_negative_M": self.final_eval("frac_negative_M"),
            },
            "evals": self.evals,
        }

    def metrics_rows(self):
        """Rows for metrics.csv: step, loss, lr, ess, kl, frac_negative_M."""
        ev_by_step = {ev["step"]: ev for ev in self.evals}
        rows = []
        for i, (loss, lr) in enumerate(zip(self.losses, self.lrs)):
            ev = ev_by_step.get(i + 1, {})
            rows.append(
                (
                    i + 1,
                    loss,
                    lr,
                    ev.get("ess"),
                    ev.get("kl"),
                    ev.get("frac_negative_M"),
                )
            )
        return rows


# ---------------------------------------------------------------------------
# evaluation


def evaluate_flow(flow: fl.Flow, target, rng: Rng, n: int) -> dict:
    """ESS / KL metrics on fresh batches (pure numpy, no tape).

    * ess: importance weights p~/q on flow samples (needs target density)
    * kl:  forward KL over target samples; when the normalized target
      density is available the paired estimator mean[log p - log q] is
      used (same mean as NLL minus entropy, far lower variance), else
      NLL minus the quadrature entropy
    * rkl: reverse-KL loss value on flow samples (unnormalized target)
    * frac_negative_M: fraction of flow samples with negative field mean
    """
    out = {}
    if getattr(target, "has_density", False) or hasattr(target, "log_unnorm"):
        xs, logq = flow.sample(rng, n)
        lw = val(target.log_unnorm(xs)) - logq
        out["ess"] = ess(lw)
        out["rkl"] = float(np.mean(-lw))
        if xs.ndim > 2:
            out["frac_negative_M"] = float(np.mean(val(tg.magnetization(xs)) < 0))
    if getattr(target, "has_sampler", False):
        ys = target.sample(rng, n)
        logq_y = flow.log_prob(ys)
        nll = -float(np.mean(logq_y))
        out["nll"] = nll
        if getattr(target, "has_density", False) and hasattr(target, "log_density"):
            out["kl"] = float(np.mean(target.log_density(ys) - logq_y))
        elif hasattr(target, "entropy"):
            out["kl"] = nll - target.entropy()
    return out


# ---------------------------------------------------------------------------
# training loops


def _loss_and_grads(flow, target, params, cfg, rng):
    tape = ad.Tape()
    pv = [tape.leaf(a) for a in params]
    if cfg.loss == "reverse_kl":
        z = rng.normal((cfg.batch, *flow.event_shape))
        loss = reverse_kl_loss(flow, target, z, pv)
    else:
        xs = target.sample(rng, cfg.batch)
        loss = forward_kl_loss(flow, xs, pv)
    loss_val = float(val(loss))
    if not np.isfinite(loss_val):
        return loss_val, None
    grads = backward_grads(tape, loss, pv)
    return loss_val, grads


def backward_grads(tape, loss, pv):
    g = ad.backward(tape, loss)
    return [g.wrt(p) for p in pv]


def _resolve_lambda(cfg: RunConfig, rng: Rng, chosen: dict):
    lam = cfg.lam
    if isinstance(lam, str):
        mode = "unimodal" if lam == "auto_unimodal" else "bimodal"
        lam_val, scan = tg.choose_phi4_lambda(rng, cfg.lattice_L, cfg.m2, mode)
        chosen["lam_scan"] = {str(k): v for k, v in scan.items()}
        return lam_val
    return float(lam)


def _frozen_indices(flow: fl.Flow, freeze_coupling: bool):
    if not freeze_coupling:
        return set()
    idx = set()
    layer_of = flow.param_layer_indices()
    for i, li in enumerate(layer_of):
        if isinstance(flow.layers[li], (fl.Coupling, fl.LatticeCoupling)):
            idx.add(i)
    return idx


def _run_loop(flow, target, cfg, params, adam, sched, rng_train, rng_eval,
              record, frozen=(), phase_offset=0, n_steps=None, progress=None):
    n_steps = n_steps if n_steps is not None else cfg.steps
    consecutive_bad = 0
    for step in range(n_steps):
        lr = sched(step)
        try:
            loss_val, grads = _loss_and_grads(flow, target, params, cfg, rng_train)
        except fl.EvaluationError:
            loss_val, grads = float("nan"), None
        record.losses.append(loss_val)
        record.lrs.append(lr)
        bad = grads is None
        if not bad:
            if cfg.clip_norm is not None:
                grads, _ = clip_global_norm(grads, float(cfg.clip_norm))
            applied = adam.step(params, grads, lr, frozen=frozen)
            bad = not applied
        else:
            adam.step_count += 1
            adam.n_skipped += 1
        consecutive_bad = consecutive_bad + 1 if bad else 0
        if consecutive_bad >= 10:
            record.status = "failed"
            record.n_skipped = adam.n_skipped
            return False
        global_step = phase_offset + step + 1
        if global_step % cfg.eval_interval == 0 or step == n_steps - 1:
            flow.set_param_arrays([p.copy() for p in params])
            ev = evaluate_flow(flow, target, rng_eval, cfg.eval_batch)
            ev["step"] = global_step
            record.evals.append(ev)
        if progress is not None and (step + 1) % progress == 0:
            print(f"  step {global_step}: loss {loss_val:.4f}", flush=True)
    record.n_skipped = adam.n_skipped
    return True


def train(cfg: RunConfig, progress=None):
    """Run one configuration; returns (flow, RunRecord).

    Deterministic under (config, seed): all randomness flows from
    Rng(seed) splits in a fixed order.
    """
    t0 = time.time()
    root = Rng(cfg.seed)
    r_init, r_train, r_eval, r_aux = root.split(4)
    chosen = {}
    lam_resolved = None
    if cfg.preset.startswith("phi4"):
        lam_resolved = _resolve_lambda(cfg, r_aux, chosen)
    flow, target, build_chosen = build_flow(cfg, r_init, lam_resolved)
    chosen.update(build_chosen)
    record = RunRecord(
        config=cfg.resolved(), config_hash=cfg.config_hash(), seed=cfg.seed,
        chosen=chosen,
    )
    params = [a.copy() for a in flow.param_arrays()]
    adam = AdamState(params)
    sched = make_schedule(cfg.schedule, cfg.lr, cfg.steps)
    if cfg.steps == 0:
        flow.set_param_arrays(params)
        ev = evaluate_flow(flow, target, r_eval, cfg.eval_batch)
        ev["step"] = 0
        record.evals.append(ev)
    else:
        _run_loop(flow, target, cfg, params, adam, sched, r_train, r_eval,
                  record, progress=progress)
    flow.set_param_arrays(params)
    record.wall_time = time.time() - t0
    return flow, record


def pretrain_then_resume(cfg: RunConfig, progress=None):
    """Two-phase bimodal training: phase 1 updates only the momentum-shell
    scales and zero-mode bijection (coupling parameters are masked out of
    the optimizer and stay bit-identical); phase 2 unfreezes everything."""
    if cfg.preset != "phi4_bimodal":
        raise ValueError("pretrain_then_resume requires the phi4_bimodal preset")
    t0 = time.time()
    root = Rng(cfg.seed)
    r_init, r_train, r_eval, r_aux = root.split(4)
    chosen = {}
    lam_resolved = _resolve_lambda(cfg, r_aux, chosen)
    flow, target, build_chosen = build_flow(cfg, r_init, lam_resolved)
    chosen.update(build_chosen)
    record = RunRecord(
        config=cfg.resolved(), config_hash=cfg.config_hash(), seed=cfg.seed,
        chosen=chosen,
    )
    params = [a.copy() for a in flow.param_arrays()]
    adam = AdamState(params)
    frozen = _frozen_indices(flow, True)
    sched1 = make_schedule(cfg.schedule, cfg.lr, cfg.pretrain_steps)
    ok = _run_loop(flow, target, cfg, params, adam, sched1, r_train, r_eval,
                   record, frozen=frozen, n_steps=cfg.pretrain_steps,
                   progress=progress)
    record.chosen["pretrain_end_step"] = cfg.pretrain_steps
    if ok:
        sched2 = make_schedule(cfg.schedule, cfg.lr, cfg.steps)
        _run_loop(flow, target, cfg, params, adam, sched2, r_train, r_eval,
                  record, phase_offset=cfg.pretrain_steps, n_steps=cfg.steps,
                  progress=progress)
    flow.set_param_arrays(params)
    record.wall_time = time.time() - t0
    return flow, record


def run_experiment(cfg: RunConfig, progress=None):
    """Dispatch on strategy: the bimodal pretrain preset uses the two-phase
    procedure, everything else plain training."""
    if cfg.preset == "phi4_bimodal" and cfg.strategy == "pretrain":
        return pretrain_then_resume(cfg, progress=progress)
    return train(cfg, progress=progress)
