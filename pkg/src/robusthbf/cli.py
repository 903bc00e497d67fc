"""Command-line entry point.

Subcommands: gen (dataset generation), train (primal-dual training),
eval (checkpoint evaluation to CSV), bench (greedy baselines to CSV),
gradcheck (implicit-gradient finite-difference suite).

Exit codes: 0 success, 1 validation/config error, 2 numerical divergence.
All dB-to-linear conversions happen in the scenario configs or named dB
arguments; the numerical modules work in linear scale.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import bench
from . import scenario as sc
from . import training as tr


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser():
    p = _Parser(prog="robusthbf")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset directory")
    g.add_argument("--config", required=True,
                   help="JSON: scenario config fields plus n_instances "
                        "and optional m_rf (feasibility filter)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a model on one fold")
    t.add_argument("--config", required=True, help="run-config JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--folds", type=int, default=5)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--csv", default=None, help="training history CSV")
    t.add_argument("--seed", type=int, default=None,
                   help="override the run-config seed")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--csv", required=True)
    e.add_argument("--fold", type=int, default=0)
    e.add_argument("--jobs", type=int, default=1)

    b = sub.add_parser("bench", help="run a greedy baseline")
    b.add_argument("--data", required=True)
    b.add_argument("--csv", required=True)
    b.add_argument("--method", required=True,
                   choices=["ghbf_perf", "ghbf_est", "ghbf_marg"])
    b.add_argument("--config", default=None,
                   help="JSON overrides: m_rf, l_rf, p_out, bisect_tol")
    b.add_argument("--fold", type=int, default=0,
                   help="validation fold used for margin bisection")
    b.add_argument("--folds", type=int, default=5)
    b.add_argument("--jobs", type=int, default=1)

    c = sub.add_parser("gradcheck", help="implicit-gradient FD suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--instances", type=int, default=5)
    return p


def _cmd_gen(args):
    with open(args.config) as f:
        raw = json.load(f)
    n = int(raw.pop("n_instances"))
    m_rf = raw.pop("m_rf", None)
    oversample = raw.pop("oversample_factor", 3)
    config = sc.GenConfig.from_dict(raw)
    codebook = sc.dft_codebook(config.m_x, config.m_y)
    dataset = sc.generate_dataset(config, n, args.seed, codebook=codebook,
                                  m_rf=m_rf, oversample_factor=oversample)
    sc.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} instances to {args.out} "
          f"(checksum {sc.dataset_checksum(args.out)})")
    return 0


def _cmd_train(args):
    cfg = tr.RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    dataset = sc.load_dataset(args.data)
    state, history = tr.train(dataset, args.fold, cfg, n_folds=args.folds)
    if args.csv:
        tr.history_to_csv(history, args.csv)
    if state["diverged"]:
        print("training diverged (convergence metric exceeded the guard)",
              file=sys.stderr)
        return 2
    bench.save_model(args.out, state["best_params"], state["net_cfg"],
                     variant=cfg.variant, m_rf=cfg.m_rf, l_rf=cfg.l_rf,
                     beta_m=cfg.beta_m, weight_mode=cfg.weight_mode,
                     extra_meta={"best_jcm": state["best_jcm"],
                                 "best_step": state["best_step"],
                                 "fold": args.fold})
    print(f"best J_cm {state['best_jcm']:.6g} at step {state['best_step']}; "
          f"checkpoint {args.out}")
    return 0


def _cmd_eval(args):
    model = bench.load_model(args.model)
    dataset = sc.load_dataset(args.data)
    codebook = sc.dft_codebook(dataset.config.m_x, dataset.config.m_y)
    reports = bench.run_learned(dataset.instances, model, codebook,
                                fold=args.fold, n_jobs=args.jobs)
    bench.reports_to_csv(reports, args.csv)
    for r in reports:
        print(r.csv_row())
    return 0


def _cmd_bench(args):
    over = {}
    if args.config:
        with open(args.config) as f:
            over = json.load(f)
    dataset = sc.load_dataset(args.data)
    codebook = sc.dft_codebook(dataset.config.m_x, dataset.config.m_y)
    m_rf = int(over.get("m_rf", 2))
    l_rf = over.get("l_rf")
    if args.method == "ghbf_perf":
        reports = bench.run_ghbf_perf(dataset.instances, codebook, m_rf,
                                      l_rf=l_rf, fold=args.fold,
                                      n_jobs=args.jobs)
    elif args.method == "ghbf_est":
        reports = bench.run_ghbf_est(dataset.instances, codebook, m_rf,
                                     l_rf=l_rf, fold=args.fold,
                                     n_jobs=args.jobs,
                                     margin_db=float(over.get("margin_db",
                                                              0.0)))
    else:
        test, val = tr.split_fold(dataset.instances, args.fold, args.folds)
        reports, info = bench.run_ghbf_marg(
            test, val, codebook, m_rf, l_rf=l_rf,
            p_out=float(over.get("p_out", 0.1)),
            bisect_tol=float(over.get("bisect_tol", 0.1)),
            fold=args.fold, n_jobs=args.jobs)
        print(f"margin {info['margin_db']:.4f} dB, validation outage "
              f"{info['val_outage_pct']:.3f}% ({info['evals']} evals)")
    bench.reports_to_csv(reports, args.csv)
    for r in reports:
        print(r.csv_row())
    return 0


def _cmd_gradcheck(args):
    worst = bench.gradcheck(args.seed, n_instances=args.instances)
    print(f"max relative error {worst:.3e} (tol {args.tol:g})")
    return 0 if worst <= args.tol else 1


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
                "bench": _cmd_bench, "gradcheck": _cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
