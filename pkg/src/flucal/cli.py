"""Command-line surface: data generation, training, evaluation, sweeps, oracles.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Every failure
prints one structured ``error: <kind>: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import oracles
from . import train as train_mod
from . import uncertainty as unc
from .autodiff import ContractError
from .model import ConfigError, load_checkpoint

PROBE_EPS_LADDER = (1e-1, 1e-2, 1e-3, 1e-4)


def _load_config(path, overrides):
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    else:
        doc = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return doc


def _train_config(args):
    doc = _load_config(args.config, args.set)
    if args.out:
        doc["out_dir"] = args.out
    try:
        return train_mod.TrainConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc


def _cmd_gen_data(args):
    doc = _load_config(args.config, args.set)
    spec = data_mod.TaskSpec.from_dict(doc.get("task", {}))
    seed = int(doc.get("seed", args.seed))
    examples = data_mod.generate_task(spec, seed)
    examples += data_mod.generate_shifted_split(spec, args.shift_level, seed)
    os.makedirs(args.out or ".", exist_ok=True)
    path = os.path.join(args.out or ".", "dataset.jsonl")
    data_mod.write_dataset(examples, path)
    print(f"wrote {len(examples)} examples to {path}")
    return 0


def _cmd_train(args):
    config = _train_config(args)
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
    _, record = train_mod.train(config, quiet=args.quiet)
    for split, report in record.final_reports.items():
        print(f"{split}: acc={report.accuracy:.4f} ece={report.ece:.4f}")
    return 0


def _cmd_eval(args):
    model, step = load_checkpoint(args.checkpoint)
    examples = data_mod.read_dataset(args.data)
    part = data_mod.split_examples(examples, args.split)
    if not part:
        raise ConfigError(f"dataset has no {args.split!r} split")
    report = train_mod.evaluate(model, part)
    print(f"step={step} split={args.split} n={report.n} "
          f"acc={report.accuracy:.4f} ece={report.ece:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        unc.reliability_bins_export(report, os.path.join(args.out, "bins.csv"))
    return 0


def _cmd_sweep_beta(args):
    config = _train_config(args)
    betas = [float(b) for b in args.betas.split(",")] if args.betas \
        else list(train_mod.DEFAULT_BETA_GRID)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds \
        else list(train_mod.DEFAULT_SWEEP_SEEDS)
    rows = train_mod.beta_sweep(config, betas, seeds, quiet=True)
    _emit_sweep(rows, args.out, "beta")
    return 0


def _cmd_sweep_topk(args):
    config = _train_config(args)
    ks = [int(k) for k in args.ks.split(",")] if args.ks \
        else list(train_mod.DEFAULT_TOPK_GRID)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds \
        else list(train_mod.DEFAULT_SWEEP_SEEDS)
    rows = train_mod.topk_sweep(config, ks, seeds, quiet=True)
    _emit_sweep(rows, args.out, "top_k")
    return 0


def _emit_sweep(rows, out, param_name):
    for param, seed, acc, ece in rows:
        print(f"{param_name}={param} seed={seed} acc={acc:.4f} ece={ece:.4f}")
    if out:
        os.makedirs(out, exist_ok=True)
        train_mod.sweep_to_csv(rows, os.path.join(out, "sweep.csv"), param_name)


def _cmd_probe_fact1(args):
    net = oracles.MixtureResidualNet(dim=args.dim, n_layers=args.layers,
                                     n_experts=args.experts,
                                     expert_scale=args.scale, seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    x = rng.normal(size=args.dim)
    direction = oracles.mass_preserving_direction(args.experts, args.layers,
                                                  args.seed + 2)
    result = oracles.perturbation_probe(net, x, direction, list(PROBE_EPS_LADDER))
    zero = oracles.perturbation_probe(net, x, direction, [0.0])
    slope = result.loglog_slope()
    for eps, res, lin in zip(result.epsilons, result.residual_norms,
                             result.linear_norms):
        print(f"eps={eps:.0e} residual={res:.6e} linear={lin:.6e}")
    print(f"eps=0e+00 residual={zero.residual_norms[0]:.6e}")
    print(f"loglog_slope={slope:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        result.export_csv(os.path.join(args.out, "probe.csv"))
    return 0


def _cmd_oracle_prop1(args):
    max_dev = 0.0
    for p in np.arange(0.0, 1.0 + 1e-9, 0.05):
        u_star = oracles.calibration_minimizer_oracle(float(p))
        max_dev = max(max_dev, abs(u_star - p))
    print(f"grid minimizer matches correctness probability; max deviation {max_dev:.2e}")
    if args.checkpoint and args.data:
        model, _ = load_checkpoint(args.checkpoint)
        examples = data_mod.split_examples(data_mod.read_dataset(args.data), args.split)
        for regime, mean_flu, acc in oracles.empirical_prop1_check(model, examples):
            print(f"regime={regime} mean_flu={mean_flu:.4f} acc={acc:.4f}")
    return 0


def _cmd_check_decomp(args):
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for n_experts, n_layers in ((2, 3), (3, 2)):
        dim = args.dim
        mats = [[rng.normal(size=(dim, dim)) for _ in range(n_experts)]
                for _ in range(n_layers)]
        experts = [[(lambda h, m=m: m @ h) for m in layer] for layer in mats]
        weights = [rng.dirichlet(np.ones(n_experts)) for _ in range(n_layers)]
        x = rng.normal(size=dim)
        diff = oracles.check_hierarchical_naive_equivalence(experts, weights, x)
        worst = max(worst, diff)
        print(f"K={n_experts} L={n_layers}: max abs diff {diff:.3e}")
    print(f"max diff {worst:.3e}")
    return 0 if worst < 1e-10 else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flucal",
        description="Calibrated fine-tuning of mixture-of-adapters models "
                    "via router-mass uncertainty.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a (dotted) config key")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift-level", default="large", choices=data_mod.SHIFT_LEVELS)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-beta", help="train/evaluate over a beta grid")
    common(p)
    p.add_argument("--betas", help="comma-separated beta values")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(func=_cmd_sweep_beta)

    p = sub.add_parser("sweep-topk", help="train/evaluate over a top-k grid")
    common(p)
    p.add_argument("--ks", help="comma-separated k values")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(func=_cmd_sweep_topk)

    p = sub.add_parser("probe-fact1",
                       help="router-mass perturbation probe on a residual mixture net")
    common(p, config=False)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--scale", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_probe_fact1)

    p = sub.add_parser("oracle-prop1",
                       help="check the calibration-risk minimizer (and, with a "
                            "checkpoint, the per-regime score/accuracy ordering)")
    common(p, config=False)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="val")
    p.set_defaults(func=_cmd_oracle_prop1)

    p = sub.add_parser("check-decomp",
                       help="layer-wise mixture vs path enumeration for linear modules")
    common(p, config=False)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_check_decomp)

    return parser


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args)
    except (ConfigError, data_mod.DatasetParseError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (ContractError, oracles.CapacityError, RuntimeError, OSError,
            ValueError) as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
