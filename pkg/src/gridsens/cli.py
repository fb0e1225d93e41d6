"""Command line interface: ``gridsens gen | lme | bench``.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 infeasible case,
4 degenerate KKT system.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from gridsens.errors import (
    CaseFormatError,
    CaseValidationError,
    DegeneracyError,
    GridSensError,
    InfeasibleError,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DEGENERATE = 0, 1, 2, 3, 4
FD_CHECK_RTOL = 1e-3

METHOD_NAMES = {
    "central-fwd": "central_fwd",
    "central-rev": "central_rev",
    "decentral-fwd": "decentral_fwd",
    "decentral-rev": "decentral_rev",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridsens", description="Locational marginal emissions for DC dispatch with storage.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic case file")
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--batteries", type=int, default=0)
    g.add_argument("--horizon", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    m = sub.add_parser("lme", help="solve a case and write its LMEs as CSV")
    m.add_argument("--case", required=True)
    m.add_argument("--method", choices=sorted(METHOD_NAMES), default="central-rev")
    m.add_argument("--parallelism", type=_positive_int, default=1)
    m.add_argument("--reg-eps", type=float, default=1e-6)
    m.add_argument("--tol", type=float, default=1e-8)
    m.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    m.add_argument("--fd-check", action="store_true", help="compare against finite differences")
    m.add_argument("--fd-step", type=float, default=1e-4)
    m.add_argument("--dump-kkt", metavar="PATH", help="write d1F as 'row col value' text")

    b = sub.add_parser("bench", help="run a benchmark config (JSON)")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--format", choices=["json", "csv"], default="json")
    return p


def _cmd_gen(args) -> int:
    from gridsens.model import generate_synthetic, save_case

    try:
        case = generate_synthetic(args.nodes, args.batteries, args.horizon, args.seed)
    except ValueError as exc:
        print(f"gridsens gen: {exc}", file=sys.stderr)
        return EXIT_USAGE
    save_case(case, args.out)
    return EXIT_OK


def _write_lme_csv(lam: np.ndarray, out) -> None:
    rows = [("node", "period", "lambda")]
    N, T = lam.shape
    for n in range(N):
        for t in range(T):
            rows.append((n + 1, t + 1, repr(float(lam[n, t]))))
    if out == "-":
        csv.writer(sys.stdout, lineterminator="\n").writerows(rows)
    else:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)


def _cmd_lme(args) -> int:
    from gridsens.bench import METHODS
    from gridsens.dispatch import solve_dispatch
    from gridsens.kkt import assemble_kkt, dump_coo
    from gridsens.model import load_case
    from gridsens.oracle import compare_lme, lme_finite_difference

    if args.reg_eps <= 0 or args.tol <= 0 or args.fd_step <= 0:
        print("gridsens lme: --reg-eps, --tol and --fd-step must be > 0", file=sys.stderr)
        return EXIT_USAGE
    case = load_case(args.case)
    sol = solve_dispatch(case, args.reg_eps, args.tol)
    kkt = assemble_kkt(case, sol, tol=args.tol)
    if args.dump_kkt:
        dump_coo(kkt.d1F, args.dump_kkt)
    fn = METHODS[METHOD_NAMES[args.method]]
    res = fn(case, sol, kkt=kkt, parallelism=args.parallelism)
    _write_lme_csv(res.lam, args.out)
    if res.degeneracy_flag:
        print("warning: weakly active constraints at the solution", file=sys.stderr)
    if args.fd_check:
        fd = lme_finite_difference(case, args.fd_step, args.reg_eps, args.tol,
                                   parallelism=args.parallelism, solution=sol)
        rep = compare_lme(res, fd)
        stream = sys.stderr if args.out == "-" else sys.stdout
        print(f"fd-check: {rep} flagged={int(fd.degenerate_mask.sum())}", file=stream)
        if rep.max_rel_diff > FD_CHECK_RTOL:
            return EXIT_CHECK
    return EXIT_OK


def _cmd_bench(args) -> int:
    from gridsens.bench import BenchConfig, emit_report, run_benchmark

    try:
        with open(args.config, encoding="utf-8") as fh:
            config = BenchConfig.from_dict(json.load(fh))
    except (OSError, ValueError, TypeError) as exc:
        print(f"gridsens bench: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = run_benchmark(config)
    emit_report(report, args.format, args.out)
    for err in report.errors:
        print(f"warning: {err}", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"gen": _cmd_gen, "lme": _cmd_lme, "bench": _cmd_bench}[args.command]
    try:
        return handler(args)
    except (CaseFormatError, CaseValidationError, FileNotFoundError) as exc:
        print(f"gridsens {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleError as exc:
        print(f"gridsens {args.command}: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DegeneracyError as exc:
        print(f"gridsens {args.command}: degenerate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except GridSensError as exc:
        print(f"gridsens {args.command}: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
