"""Command-line harness.

Five subcommands cover the experiment lifecycle: `generate` writes recipe
datasets, `train` fits one model on a dataset directory, `eval` scores a
checkpoint (or the oracle sentinel), `counterexample` demonstrates the
frozen-edge construction, and `sweep` runs a full grid.

Exit codes: 0 success, 2 configuration error, 3 runtime failure (partial
results are left on disk).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import __version__
from .datasets import load_dataset, save_dataset
from .errors import ConfigError, SchemaVersionError
from .experiments import (ExperimentConfig, cell_dataset, counterexample_report,
                          load_experiment, mode_for, run_sweep, save_sweep)
from .training import (evaluate, evaluate_oracle, load_checkpoint, train)


def _write_json(doc: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _need_out(args) -> str:
    if not args.out:
        raise ConfigError("--out is required for this command")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    config = load_experiment(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seeds=(args.seed,))
    return config


def cmd_generate(args) -> int:
    config = _load_config(args)
    out = _need_out(args)
    for ell in config.ells:
        for seed in config.seeds:
            ds = cell_dataset(config, ell, seed)
            d = os.path.join(out, f"{config.tag}-l{ell}-s{seed}")
            save_dataset(ds, d)
            with open(os.path.join(d, "meta.scm-v1")) as fh:
                check = json.load(fh)["env_check"]
            flag = "" if check.get("passed") else "  [environment check FAILED]"
            if flag:
                print(f"warning: {d}: insufficient environment variation",
                      file=sys.stderr)
            print(f"wrote {d} ({ds.rows} rows){flag}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    out = _need_out(args)
    dataset = load_dataset(args.data)
    method = "baseline" if args.baseline else "proposed"
    mode = mode_for(config, method)
    tc = config.train
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
    params, record = train(dataset, mode, tc, checkpoint_dir=out)
    print(f"status {record.status}  epochs {len(record.epochs)}  "
          f"checkpoint {record.checkpoint_path}")
    if record.epochs:
        print(f"final bound {record.curve['elbo'][-1]:.4f}")
    if record.status == "aborted-nonfinite":
        print(f"error: {record.diagnostic}", file=sys.stderr)
        return 3
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    if args.checkpoint == "oracle":
        report = evaluate_oracle(dataset)
    else:
        params, mode = load_checkpoint(args.checkpoint)
        report = evaluate(params, mode, dataset)
    print(f"mpc {report.mpc.mean:.4f}")
    print("per-node " + " ".join(f"{v:.4f}" for v in report.mpc.per_node))
    print("pairing " + " ".join(str(p + 1) for p in report.mpc.pairing))
    print(f"shd {report.shd.shd} (tau {report.tau})")
    if args.out:
        out = _need_out(args)
        _write_json({"schema": "eval-v1", "checkpoint": args.checkpoint,
                     **report.to_dict()}, os.path.join(out, "eval.json"))
        with open(os.path.join(out, "eval.csv"), "w") as fh:
            fh.write("node,mpc_node,paired_with\n")
            for i, v in enumerate(report.mpc.per_node):
                fh.write(f"{i + 1},{float(v)!r},{report.mpc.pairing[i] + 1}\n")
        print(f"wrote {out}/eval.json and {out}/eval.csv")
    return 0


def cmd_counterexample(args) -> int:
    config = _load_config(args)
    report = counterexample_report(config)
    print(f"frozen edge z{report['frozen_edge'][0] + 1} -> "
          f"z{report['frozen_edge'][1] + 1}  (family {report['family']})")
    print(f"max observation discrepancy {report['max_observation_discrepancy']:.3e}")
    print("per-node corr(z, z') " +
          " ".join(f"{c:.4f}" for c in report["per_node_corr"]))
    print(f"witness: node {report['witness']['node']}, "
          f"adds {report['witness']['lambda']:.6f} * {report['witness']['monomial']}")
    if args.out:
        out = _need_out(args)
        _write_json(report, os.path.join(out, "counterexample.json"))
        print(f"wrote {out}/counterexample.json")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    out = _need_out(args)
    done = []

    def progress(ell, seed, method):
        done.append(None)
        total = len(config.ells) * len(config.seeds) * len(config.methods)
        print(f"[{len(done)}/{total}] l{ell} seed {seed} {method}", flush=True)

    report = run_sweep(config, workers=args.workers, progress=progress)
    save_sweep(report, out)
    for key, agg in sorted(report.aggregates.items()):
        print(f"{key}: median mpc {agg['median_mpc']:.4f} "
              f"(iqr {agg['iqr_mpc']:.4f}), median shd {agg['median_shd']:.1f}")
    for f in report.failures:
        print(f"failed cell l{f['ell']} seed {f['seed']} {f['method']}: "
              f"{f['error']}", file=sys.stderr)
    print(f"wrote {out}/sweep.json, sweep.csv, nodes.csv, runtimes.json")
    return 3 if report.failures else 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polycause",
        description="Multi-environment polynomial latent causal models.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the seed list")
        p.add_argument("--workers", type=int, default=1,
                       help="concurrent sweep cells")

    p = sub.add_parser("generate", help="write recipe datasets")
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="fit one model on a dataset directory")
    p.add_argument("data", help="dataset directory (data.csv + meta.scm-v1)")
    p.add_argument("--baseline", action="store_true",
                   help="train the independent-prior baseline instead")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("checkpoint", help="ckpt-v1 file, or 'oracle'")
    p.add_argument("data", help="dataset directory")
    common(p, config=False)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("counterexample",
                       help="frozen-edge indistinguishability demo")
    common(p)
    p.set_defaults(fn=cmd_counterexample)

    p = sub.add_parser("sweep", help="run an (ell x seed x method) grid")
    common(p)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SchemaVersionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
