"""Command-line front door: generate, measure, solve, evaluate, report.

Stages communicate only through files, so replicates can be distributed
across processes.  Exit status is 0 on success, 1 on a stage failure (with
a diagnostic line on stderr), 2 on bad arguments.
"""

import argparse
import json
import sys

import numpy as np

from .errors import HierBlueError, SchemaError
from .blue import solve_tree_blue
from .evaluation import (
    baseline_topdown,
    read_metrics_csv,
    run_experiment,
    summarize_metrics,
    write_metrics_csv,
)
from .integer_pass import bluedown
from .linalg import SuccinctMatrix
from .noise import measure_tree, read_measurements, write_measurements
from .schema import build_instance, load_instance_spec, read_tree, with_seed, write_tree

_ALGORITHMS = ("blue", "bluedown", "topdown")


def _parse_passes(text):
    """Per-level pass lists: levels split by '/', kinds by ',', e.g.
    ``full/total,full/full``."""
    if text is None:
        return None
    return [tuple(level.split(",")) for level in text.split("/")]


def _load_spec(args):
    spec = load_instance_spec(args.spec)
    if getattr(args, "seed", None) is not None:
        spec = with_seed(spec, args.seed)
    return spec


def _write_estimates(report, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for node_id in sorted(report.estimates):
            est = report.estimates[node_id]
            rec = {"id": node_id}
            if report.integral:
                rec["counts"] = [int(round(v)) for v in est.z]
            else:
                rec["z"] = [float(v) for v in est.z]
                if isinstance(est.omega, SuccinctMatrix):
                    rec["cov"] = {
                        "kind": "succinct",
                        "a": est.omega.a.tolist(),
                        "b": est.omega.b.tolist(),
                        "d": est.omega.d,
                    }
                elif est.omega is not None:
                    rec["cov"] = {"kind": "dense", "m": np.asarray(est.omega).tolist()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _cmd_generate(args):
    spec = _load_spec(args)
    tree = build_instance(spec)
    write_tree(tree, args.out)
    print(f"wrote {len(tree.nodes)} nodes to {args.out}")
    return 0


def _cmd_measure(args):
    spec = _load_spec(args)
    tree = read_tree(args.tree, spec)
    measurements = measure_tree(tree, args.seed if args.seed is not None else spec.seed)
    write_measurements(tree, measurements, args.out)
    print(f"wrote measurements for {len(measurements)} nodes to {args.out}")
    return 0


def _cmd_solve(args):
    spec = _load_spec(args)
    tree = read_tree(args.tree, spec)
    measurements = read_measurements(args.nmf, tree)
    passes = _parse_passes(args.passes)
    if args.algo == "blue":
        report = solve_tree_blue(tree, measurements)
    elif args.algo == "bluedown":
        report = bluedown(tree, measurements, passes=passes, alpha=args.alpha)
    elif args.algo == "topdown":
        report = baseline_topdown(tree, measurements, passes=passes, alpha=args.alpha)
    else:  # pragma: no cover - argparse enforces choices
        raise SchemaError(f"unknown algorithm {args.algo!r}")
    _write_estimates(report, args.out)
    print(f"solved {len(report.estimates)} nodes with {args.algo} -> {args.out}")
    return 0


def _cmd_evaluate(args):
    spec = _load_spec(args)
    algorithms = []
    for chunk in args.algo or ["topdown,bluedown"]:
        algorithms.extend(a for a in chunk.split(",") if a)
    for algorithm in algorithms:
        if algorithm not in _ALGORITHMS:
            raise SchemaError(f"unknown algorithm {algorithm!r}")
    rows, failures = run_experiment(
        spec,
        n_replicates=args.replicates,
        algorithms=algorithms,
        passes=_parse_passes(args.passes),
    )
    write_metrics_csv(rows, args.out)
    print(f"wrote {len(rows)} metric rows to {args.out}")
    for replicate, algorithm, message in failures:
        print(f"failure: replicate {replicate} {algorithm}: {message}", file=sys.stderr)
    return 1 if failures else 0


def _cmd_report(args):
    rows = read_metrics_csv(args.metrics)
    summary = summarize_metrics(rows)
    widths = (10, 6, 16, 12, 12, 12, 12)
    header = ("algorithm", "level", "query", "pop_bin", "raw_l1", "normalized", "bias")
    print("".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for cell in summary:
        line = (
            cell["algorithm"],
            cell["level"],
            cell["query"],
            cell["pop_bin"] or "-",
            f"{cell['mean_raw_l1']:.4g}",
            f"{cell['mean_normalized']:.4g}",
            f"{cell['mean_bias']:.4g}",
        )
        print("".join(str(v).ljust(w) for v, w in zip(line, widths)))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hierblue",
        description="Hierarchical count post-processing pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="build an instance and write tree + truth")
    gen.add_argument("--spec", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_generate)

    mea = sub.add_parser("measure", help="write a noisy measurement file")
    mea.add_argument("--spec", required=True)
    mea.add_argument("--tree", required=True)
    mea.add_argument("--seed", type=int, default=None)
    mea.add_argument("--out", required=True)
    mea.set_defaults(func=_cmd_measure)

    sol = sub.add_parser("solve", help="solve a measured instance")
    sol.add_argument("--spec", required=True)
    sol.add_argument("--tree", required=True)
    sol.add_argument("--nmf", required=True)
    sol.add_argument("--algo", choices=_ALGORITHMS, default="blue")
    sol.add_argument("--passes", default=None)
    sol.add_argument("--alpha", type=float, default=1.0)
    sol.add_argument("--out", required=True)
    sol.set_defaults(func=_cmd_solve)

    ev = sub.add_parser("evaluate", help="run replicates and write metrics CSV")
    ev.add_argument("--spec", required=True)
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--replicates", type=int, default=10)
    ev.add_argument("--algo", action="append", default=None,
                    help="algorithm name, repeatable or comma-separated")
    ev.add_argument("--passes", default=None)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=_cmd_evaluate)

    rep = sub.add_parser("report", help="print a summary table from a metrics CSV")
    rep.add_argument("--metrics", required=True)
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HierBlueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
