"""Command-line entry point: run, sweep, similarity, gradcheck."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import report as report_mod
from . import runner
from . import similarity as sim
from .config import ExperimentConfig


def _load_config(path):
    return ExperimentConfig.from_file(path) if path else ExperimentConfig()


def cmd_run(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.baseline is not None:
        cfg = cfg.with_overrides(train={"baseline_mode": args.baseline})
    outdir = args.out or cfg.output

    def progress(task_report, matrix):
        col = matrix.column(task_report.t)
        print(f"task {task_report.t}: J_t={task_report.j_t} "
              f"sim_t={'-' if task_report.sim_t is None else f'{task_report.sim_t:.3f}'} "
              f"mean accuracy so far={col.mean():.3f}")

    record, _, _ = runner.run(cfg, progress=progress)
    runner.save_record(record, os.path.join(outdir, "run_record.json"))
    report_mod.write_run_outputs(record, outdir)
    print(f"A_T = {record['A_T']:.4f}")
    ft = record["F_T"]
    print(f"F_T = {'n/a' if ft is None else f'{ft:.4f}'}")
    print(f"trainable/total params = "
          f"{record['trainable_params_final']}/{record['total_params']}")
    print(f"outputs written to {outdir}")
    return 0


def cmd_sweep(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    values = args.values.split(",")
    if args.param in ("l_p", "k", "j_max"):
        values = [int(v) for v in values]
    elif args.param == "lambda":
        values = [float(v) for v in values]
    records = runner.sweep(cfg, args.param, values)
    outdir = args.out or cfg.output
    os.makedirs(outdir, exist_ok=True)
    for rec in records:
        name = f"run_{args.param}_{rec['sweep']['value']}.json"
        runner.save_record(rec, os.path.join(outdir, name))
    report_mod.write_sweep_outputs(records, args.param, outdir)
    for rec in records:
        print(f"{args.param}={rec['sweep']['value']}: A_T={rec['A_T']:.4f} "
              f"F_T={rec['F_T'] if rec['F_T'] is None else round(rec['F_T'], 4)}")
    print(f"outputs written to {outdir}")
    return 0


def cmd_similarity(args):
    scfg = sim.SimilarityConfig(j_max=args.j_max, mode=args.mode)
    tasks, _ = sim.load_attribute_file(args.attributes, scfg)
    # labels are embedded with the deterministic embedder; attribute files
    # only carry precomputed vectors for attribute texts
    label_embedder = sim.TextEmbedder(scfg)
    pool = sim.AttributePool()
    label_pool = []
    for task_id, records in tasks:
        if args.mode == "class_label":
            labels = sorted({r.class_name for r in records})
            s = sim.class_label_similarity(task_id, labels, label_pool,
                                           label_embedder)
            label_pool.extend(label_embedder.embed(lbl) for lbl in labels)
        else:
            s = sim.task_similarity(task_id, records, pool)
            pool.add(records)
        j_t = sim.num_generators(s, args.j_max)
        shown = "no-history" if s is sim.NO_HISTORY else f"{s:.4f}"
        print(f"task {task_id}: sim_t={shown} J_t={j_t}")
    return 0


def cmd_gradcheck(args):
    report, groups = runner.gradcheck_suite()
    tol = 1e-5
    ok = report.passed(tol)
    for name in sorted(groups):
        status = "ok" if groups[name] < tol else "FAIL"
        print(f"{name:12s} max rel err = {groups[name]:.3e}  [{status}]")
    print(f"overall max rel err = {report.max_relative_error:.3e} "
          f"({'pass' if ok else 'FAIL'} at {tol:g})")
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="convprompt",
        description="Continual-learning engine with convolutional prompt "
                    "generation on a frozen toy transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate one configuration")
    p.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p.add_argument("--seed", type=int, help="master seed overriding all sub-seeds")
    p.add_argument("--baseline", choices=["convprompt", "seq_ft", "se_only"])
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one configuration over a parameter grid")
    p.add_argument("--config")
    p.add_argument("--param", required=True, choices=list(runner.SWEEPABLE))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("similarity", help="print sim_t and J_t per task")
    p.add_argument("--attributes", required=True, help="attribute JSON file")
    p.add_argument("--mode", default="attribute",
                   choices=["attribute", "class_label"])
    p.add_argument("--j-max", type=int, default=5)
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
