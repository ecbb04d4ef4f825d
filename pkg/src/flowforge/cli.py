"""Command-line experiment runner.

Grammar:
    flowforge <train|sweep|eval|sample|oracle> [config] [--set key=value]*
              [--seed N] [--out DIR]

Configs are JSON files (or bare preset names); `--set` overrides individual
keys with JSON-parsed values. Every command is deterministic under --seed.
Run directories are content-addressed by the hash of the resolved config,
so distinct configurations never overwrite each other silently.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys

import numpy as np

from . import flows as fl
from . import targets as tg
from . import training as tr
from .kernels import Rng


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    return out


def load_config(path_or_name: str, overrides=None, seed=None) -> tr.RunConfig:
    """Resolve a config file path or bare preset name plus overrides."""
    if os.path.exists(path_or_name):
        try:
            with open(path_or_name) as fh:
                base = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON in {path_or_name}: line {e.lineno} column {e.colno}")
        if not isinstance(base, dict) or "preset" not in base:
            raise ConfigError(f"{path_or_name} must be a JSON object with a 'preset' key")
    elif path_or_name in tr.PRESETS:
        base = {"preset": path_or_name}
    else:
        raise ConfigError(f"no such config file or preset: {path_or_name}")
    base.update(overrides or {})
    if seed is not None:
        base["seed"] = seed
    try:
        return tr.config_from_dict(base)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e))


def run_dir_for(cfg: tr.RunConfig, out_root: str) -> str:
    return os.path.join(out_root, f"{cfg.preset}-{cfg.config_hash()}")


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "ess", "kl", "frac_negative_M"])
        for r in rows:
            w.writerow(["" if v is None else v for v in r])


def _write_run(out_dir, cfg, flow, record):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg.resolved(), fh, indent=1, sort_keys=True)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), record.metrics_rows())
    flow.to_json(os.path.join(out_dir, "flow.json"))
    with open(os.path.join(out_dir, "record.json"), "w") as fh:
        json.dump(record.to_json(), fh, indent=1)


def cmd_train(args) -> int:
    cfg = load_config(args.config, _parse_overrides(args.set), args.seed)
    flow, record = tr.run_experiment(cfg, progress=args.progress)
    out_dir = args.out or run_dir_for(cfg, "runs")
    _write_run(out_dir, cfg, flow, record)
    print(f"run written to {out_dir} (status: {record.status})")
    return 0 if record.status == "ok" else 3


def cmd_sweep(args) -> int:
    overrides = _parse_overrides(args.set)
    grid = {}
    for spec in args.grid or []:
        if "=" not in spec:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {spec!r}")
        k, vs = spec.split("=", 1)
        grid[k.strip()] = [_parse_value(v) for v in vs.split(",")]
    seeds = [int(s) for s in str(args.seed if args.seed is not None else 0).split(",")]
    if "seed" in grid:
        seeds = grid.pop("seed")
    axes = sorted(grid)
    out_root = args.out or "runs"
    rows = []
    cells = list(itertools.product(*[grid[a] for a in axes])) or [()]
    for combo in cells:
        cell = dict(zip(axes, combo))
        cell_kls, statuses = [], []
        for seed in seeds:
            cfg = load_config(args.config, {**overrides, **cell}, seed)
            flow, record = tr.run_experiment(cfg)
            _write_run(run_dir_for(cfg, out_root), cfg, flow, record)
            statuses.append(record.status)
            cell_kls.append(record.final_eval("kl"))
        good = [k for k in cell_kls if k is not None]
        rows.append(
            {
                **cell,
                "n_seeds": len(seeds),
                "kl_mean": float(np.mean(good)) if good else None,
                "kl_std": float(np.std(good)) if good else None,
                "status": "ok" if all(s == "ok" for s in statuses) else "failed",
            }
        )
        print(f"cell {cell}: kl={rows[-1]['kl_mean']} ({rows[-1]['status']})")
    os.makedirs(out_root, exist_ok=True)
    sweep_path = os.path.join(out_root, "sweep.csv")
    with open(sweep_path, "w", newline="") as fh:
        cols = axes + ["n_seeds", "kl_mean", "kl_std", "status"]
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    # heatmap layout (rows = centers, cols = copies) when both axes present
    if "n_centers" in axes and "n_copies" in axes:
        centers = sorted(set(grid["n_centers"]))
        copies = sorted(set(grid["n_copies"]))
        with open(os.path.join(out_root, "heatmap.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["centers\\copies"] + copies)
            for c in centers:
                line = [c]
                for k in copies:
                    match = [
                        r["kl_mean"] for r in rows
                        if r["n_centers"] == c and r["n_copies"] == k
                    ]
                    line.append(match[0] if match else "")
                w.writerow(line)
    print(f"sweep summary written to {sweep_path}")
    return 0


def _load_flow_and_target(flow_path, args):
    if not os.path.exists(flow_path):
        raise ConfigError(f"flow file not found: {flow_path}")
    try:
        flow = fl.Flow.from_json(flow_path)
    except (KeyError, ValueError, fl.ConfigurationError) as e:
        raise ConfigError(f"bad flow file: {e}")
    overrides = _parse_overrides(args.set)
    target = None
    cfg_path = os.path.join(os.path.dirname(flow_path), "config.json")
    if args.target:
        kw = {}
        if args.target == "phi4":
            kw = {
                "L": flow.event_shape[0],
                "m2": overrides.get("m2", -4.0),
                "lam": overrides.get("lam", 6.975),
            }
        target = tg.make_target(args.target, **kw)
    elif os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            cfg = tr.config_from_dict(json.load(fh))
        name = {
            "onedim": "osc_poly",
            "coupling2d": "spiral", "radial2d": "spiral", "fourier2d": "spiral",
            "gmm_radial": "gmm", "gmm_coupling": "gmm",
            "phi4_coupling": "phi4", "phi4_bimodal": "phi4",
        }[cfg.preset]
        kw = {}
        if name == "phi4":
            lam = cfg.lam
            if isinstance(lam, str):
                with open(os.path.join(os.path.dirname(flow_path), "record.json")) as fh:
                    lam = json.load(fh)["chosen"]["lam"]
            kw = {"L": cfg.lattice_L, "m2": cfg.m2, "lam": lam}
        target = tg.make_target(name, **kw)
    else:
        raise ConfigError("no target: pass --target or keep config.json next to flow.json")
    if target.event_shape != flow.event_shape:
        raise ConfigError(
            f"dimension mismatch: flow {flow.event_shape} vs target {target.event_shape}"
        )
    return flow, target


def cmd_eval(args) -> int:
    flow, target = _load_flow_and_target(args.flow, args)
    rng = Rng(args.seed if args.seed is not None else 0)
    out = tr.evaluate_flow(flow, target, rng, args.n)
    out["n"] = args.n
    out["seed"] = args.seed if args.seed is not None else 0
    text = json.dumps(out, indent=1)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            fh.write(text)
    print(text)
    return 0


def cmd_sample(args) -> int:
    if not os.path.exists(args.flow):
        raise ConfigError(f"flow file not found: {args.flow}")
    try:
        flow = fl.Flow.from_json(args.flow)
    except (KeyError, ValueError, fl.ConfigurationError) as e:
        raise ConfigError(f"bad flow file: {e}")
    rng = Rng(args.seed if args.seed is not None else 0)
    path = args.out or "samples.csv"
    d = int(np.prod(flow.event_shape))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["log_prob"])
        if args.n > 0:
            xs, lq = flow.sample(rng, args.n)
            flat = xs.reshape(args.n, d)
            for i in range(args.n):
                w.writerow(list(flat[i]) + [lq[i]])
    print(f"samples written to {path}")
    return 0


def cmd_oracle(args) -> int:
    rng = Rng(args.seed if args.seed is not None else 0)
    width = tg.tune_proposal_width(rng, args.L, args.m2, args.lam)
    out = tg.metropolis_phi4(
        rng, args.L, args.m2, args.lam, sweeps=args.sweeps,
        proposal_width=width, burn_in=min(args.sweeps // 10, 1000),
    )
    out_dir = args.out or "oracle"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "magnetization.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "M", "S", "accept_rate"])
        for i, (m, s) in enumerate(zip(out["M"], out["S"])):
            w.writerow([i, m, s, out["accept_rate"]])
    hist, edges = np.histogram(out["M"], bins=args.bins, density=True)
    with open(os.path.join(out_dir, "histogram.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "density"])
        for i in range(len(hist)):
            w.writerow([edges[i], edges[i + 1], hist[i]])
    print(
        f"oracle written to {out_dir} (acceptance {out['accept_rate']:.3f}, "
        f"mean |M| {np.abs(out['M']).mean():.4f})"
    )
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="flowforge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training configuration")
    t.add_argument("config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--progress", type=int, default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="grid of training runs with aggregation")
    s.add_argument("config")
    s.add_argument("--grid", action="append", metavar="KEY=V1,V2,...")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--seed", type=str, default=None, help="seed or comma list")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="metrics for a serialized flow")
    e.add_argument("flow")
    e.add_argument("--target", choices=["osc_poly", "spiral", "gmm", "phi4"])
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("-n", type=int, default=4096)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("sample", help="draw samples from a serialized flow")
    m.add_argument("flow")
    m.add_argument("-n", type=int, default=1000)
    m.add_argument("--seed", type=int)
    m.add_argument("--out")
    m.set_defaults(func=cmd_sample)

    o = sub.add_parser("oracle", help="phi^4 Metropolis reference chain")
    o.add_argument("--L", type=int, default=8)
    o.add_argument("--m2", type=float, default=-4.0)
    o.add_argument("--lam", type=float, default=4.0)
    o.add_argument("--sweeps", type=int, default=20000)
    o.add_argument("--bins", type=int, default=40)
    o.add_argument("--seed", type=int)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except tr.DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
