"""Command-line interface: ``cpawarp <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or parse error, 2 numerical failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import csvio
from .align import AlignConfig, joint_align
from .basis import (
    BasisKind,
    PriorConfig,
    basis_metrics,
    make_basis,
    make_tessellation,
    sample_prior,
)
from .cluster import CLUSTER_ALIGN, adjusted_rand, run_stream
from .errors import CpaWarpError, DimensionMismatch, IoError, NumericalError, UsageError
from .fastexp import DOMAINS, ExpBenchRow, available_methods, bench_exp, default_methods
from .flow import FlowConfig, integrate_batch
from .grad import flow_derivatives
from .oracle import rk4_adaptive, rk4_fixed

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

BENCH_WARP_HEADER = ["backend", "pass", "cells", "points", "batch", "tol", "seconds",
                     "max_abs_err"]
BASIS_HEADER = ["kind", "n_cells", "d", "norm", "inv_norm", "cond", "orth", "sparsity"]
WARP_DUMP_HEADER = ["x", "phi", "dphi_dx"]
SUMMARY_HEADER = "variance_before,variance_after,reduction_pct"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (np.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _float_pair(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError("domain needs lo < hi")
    return lo, hi


def _global_flags(parser, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--seed", type=int, help="random seed (default 0)",
                        **(kw or {"default": 0}))
    parser.add_argument("--threads", type=_positive_int,
                        help="cap on parallel width (default: $CPAWARP_THREADS or all cores)",
                        **(kw or {"default": None}))
    parser.add_argument("--out", help="output path (default: stdout where applicable)",
                        **(kw or {"default": None}))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpawarp", description="CPA warps: bases, flows, alignment, clustering.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("basis-report", parents=[common], help="basis property table")
    p.add_argument("--cells", type=_positive_int, default=50)
    p.add_argument("--kinds", default="all", help="comma list of svd,qr,rref,sparse or 'all'")
    zb = p.add_mutually_exclusive_group()
    zb.add_argument("--zero-boundary", dest="zero_boundary", action="store_true", default=True)
    zb.add_argument("--no-zero-boundary", dest="zero_boundary", action="store_false")
    p.add_argument("--raw", action="store_true", help="use the pre-normalization RREF matrix")
    p.add_argument("--dump", help="also write basis entries as kind,row,col,value")
    p.set_defaults(func=cmd_basis_report)

    p = sub.add_parser("bench-warp", parents=[common], help="closed form vs RK4 timings")
    p.add_argument("--cells", type=_positive_int, default=30)
    p.add_argument("--points", type=_positive_int, default=1000)
    p.add_argument("--batch", type=_positive_int, default=40)
    p.add_argument("--backend", choices=["closed", "rk4", "both"], default="both")
    p.add_argument("--tol", type=_positive_float, default=1e-6,
                   help="RK4 accuracy: measured error target (fixed) or local tolerance (adaptive)")
    p.add_argument("--rk4", choices=["fixed", "adaptive"], default="fixed",
                   help="fixed: fewest equal steps reaching --tol; adaptive: step doubling")
    p.add_argument("--repeats", type=_positive_int, default=3)
    p.add_argument("--no-timing", action="store_true", help="write nan in timing columns")
    p.set_defaults(func=cmd_bench_warp)

    p = sub.add_parser("bench-exp", parents=[common], help="fast exponential accuracy and speed")
    p.add_argument("--precision", choices=["single", "double"], default="double")
    p.add_argument("--methods", default="all",
                   help="comma list or 'all' (default set; schraudolph_lut is opt-in)")
    p.add_argument("--n", type=int, default=10**6)
    p.add_argument("--repeats", type=_positive_int, default=5)
    p.add_argument("--domain", type=_float_pair, default=None, help="lo,hi")
    p.add_argument("--no-timing", action="store_true", help="write nan in timing columns")
    p.set_defaults(func=cmd_bench_exp)

    p = sub.add_parser("align", parents=[common], help="joint alignment and elastic mean")
    p.add_argument("--input", required=True)
    p.add_argument("--labels", help="optional series_id,label CSV for per-class alignment")
    _align_flags(p, AlignConfig())
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("cluster", parents=[common], help="streaming elastic clustering")
    p.add_argument("--input", required=True)
    p.add_argument("--warmup", type=_positive_int, default=60)
    p.add_argument("--k", type=_positive_int, default=8)
    p.add_argument("--radius", type=_positive_float, default=2.0)
    p.add_argument("--n-init", type=_positive_int, default=3)
    p.add_argument("--n-iter", type=_positive_int, default=5)
    p.add_argument("--gate", choices=["std", "printed"], default="std")
    p.add_argument("--euclidean", action="store_true", help="disable alignment")
    p.add_argument("--truth", help="series_id,label CSV; prints the adjusted Rand index")
    p.add_argument("--snapshot", help="directory for per-cluster snapshot CSVs")
    _align_flags(p, CLUSTER_ALIGN)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("warp-dump", parents=[common], help="tabulate phi and dphi/dx")
    p.add_argument("--cells", type=_positive_int, default=16)
    p.add_argument("--kind", default="svd")
    zb = p.add_mutually_exclusive_group()
    zb.add_argument("--zero-boundary", dest="zero_boundary", action="store_true", default=True)
    zb.add_argument("--no-zero-boundary", dest="zero_boundary", action="store_false")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--theta", help="explicit comma-separated parameters")
    src.add_argument("--prior", action="store_true", help="draw parameters from the prior (default)")
    p.add_argument("--lambda-sigma", type=_positive_float, default=PriorConfig.lambda_sigma)
    p.add_argument("--lambda-s", type=_positive_float, default=PriorConfig.lambda_s)
    p.add_argument("--grid-n", type=int, default=101)
    p.set_defaults(func=cmd_warp_dump)
    return parser


def _align_flags(p, defaults: AlignConfig):
    p.add_argument("--cells", type=_positive_int, default=defaults.n_cells)
    p.add_argument("--basis", default=defaults.basis_kind)
    p.add_argument("--iters", type=_positive_int, default=defaults.n_iters)
    p.add_argument("--lr", type=_positive_float, default=defaults.learning_rate)
    p.add_argument("--lambda-sigma", type=_positive_float, default=defaults.lambda_sigma)
    p.add_argument("--lambda-s", type=_positive_float, default=defaults.lambda_s)


def _align_cfg(args) -> AlignConfig:
    return AlignConfig(n_cells=args.cells, basis_kind=BasisKind.parse(args.basis).value,
                       zero_boundary=True, learning_rate=args.lr, n_iters=args.iters,
                       lambda_sigma=args.lambda_sigma, lambda_s=args.lambda_s)


def _emit(args, header, rows):
    """Write CSV rows to ``--out`` or stdout."""
    if args.out:
        csvio.write_rows(args.out, header, rows)
        return
    out = sys.stdout
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(v if isinstance(v, str) else csvio.fmt(v) for v in row) + "\n")


def _kinds(text):
    if text == "all":
        return list(BasisKind)
    return [BasisKind.parse(k.strip()) for k in text.split(",") if k.strip()]


def cmd_basis_report(args) -> int:
    if args.cells < 2:
        raise UsageError("--cells must be at least 2")
    tess = make_tessellation(0.0, 1.0, args.cells)
    rows, dump = [], []
    for kind in _kinds(args.kinds):
        basis = make_basis(tess, kind, args.zero_boundary, normalize=not args.raw)
        m = basis_metrics(basis)
        rows.append([kind.value, args.cells, basis.d, m.frobenius_norm, m.inverse_norm,
                     m.condition_number, m.orthogonality_defect, m.sparsity])
        for (r, c), v in np.ndenumerate(basis.B):
            dump.append([kind.value, r, c, v])
    if args.dump:
        csvio.write_rows(args.dump, ["kind", "row", "col", "value"], dump)
    _emit(args, BASIS_HEADER, rows)
    return EXIT_OK


def _timed(fn, repeats):
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def matched_rk4_steps(basis, thetas, xs, reference, target, max_steps=4096) -> int:
    """Smallest step count whose fixed-step RK4 error against ``reference``
    is within ``target`` (doubling, then bisection)."""
    def ok(n):
        return float(np.max(np.abs(rk4_fixed(basis, thetas, xs, 1.0, n) - reference))) <= target
    hi = 1
    while not ok(hi):
        hi *= 2
        if hi > max_steps:
            raise NumericalError(f"fixed-step RK4 did not reach {target:g} within {max_steps} "
                                 "steps; try --rk4 adaptive")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def cmd_bench_warp(args) -> int:
    basis = make_basis(make_tessellation(0.0, 1.0, args.cells), "svd", zero_boundary=True)
    thetas = sample_prior(basis, PriorConfig(seed=args.seed), args.batch)
    xs = np.linspace(0.0, 1.0, args.points)
    closed = lambda: integrate_batch(basis, thetas, xs, record=False)
    phi, batch = integrate_batch(basis, thetas, xs)
    # correctness gate before any timing
    check = rk4_adaptive(basis, thetas, xs, tol=1e-12)
    gate_err = float(np.max(np.abs(check - phi)))
    if gate_err > 1e-8:
        raise NumericalError(f"closed form and RK4 disagree by {gate_err:.3e}")
    timing = not args.no_timing
    seconds = (lambda fn: _timed(fn, args.repeats)) if timing else (lambda fn: float("nan"))
    rows = []
    t_closed = t_rk4 = None
    if args.backend in ("closed", "both"):
        t_closed = seconds(closed)
        rows.append(["closed", "forward", args.cells, args.points, args.batch, 0.0, t_closed, 0.0])
        grad = lambda: flow_derivatives(basis, thetas, integrate_batch(basis, thetas, xs)[1],
                                        second_order=False)
        t_grad = seconds(grad)
        rows.append(["closed", "gradient", args.cells, args.points, args.batch, 0.0, t_grad, 0.0])
        h = 1e-7
        eye = np.eye(basis.d) * h

        def forward_differences():
            base = closed()[0]
            return [(integrate_batch(basis, thetas + e, xs, record=False)[0] - base) / h
                    for e in eye]
        fd = np.stack(forward_differences(), axis=-1)
        fd_err = float(np.max(np.abs(fd - flow_derivatives(basis, thetas, batch,
                                                           second_order=False).d_theta)))
        rows.append(["closed_fd", "gradient", args.cells, args.points, args.batch, h,
                     seconds(forward_differences), fd_err])
    if args.backend in ("rk4", "both"):
        if args.rk4 == "fixed":
            steps = matched_rk4_steps(basis, thetas, xs, phi, args.tol)
            rk4 = lambda: rk4_fixed(basis, thetas, xs, 1.0, steps)
        else:
            rk4 = lambda: rk4_adaptive(basis, thetas, xs, tol=args.tol)
        err = float(np.max(np.abs(rk4() - phi)))
        t_rk4 = seconds(rk4)
        rows.append([f"rk4_{args.rk4}", "forward", args.cells, args.points, args.batch, args.tol, t_rk4, err])
    _emit(args, BENCH_WARP_HEADER, rows)
    if timing and t_closed and t_rk4:
        print(f"forward speedup closed/rk4: {t_rk4 / t_closed:.2f}x", file=sys.stderr)
    return EXIT_OK


def cmd_bench_exp(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    table = available_methods()
    if args.methods == "all":
        names = default_methods()
    else:
        names = [m.strip() for m in args.methods.split(",") if m.strip()]
        unknown = [m for m in names if m not in table]
        if unknown:
            raise UsageError(f"unknown methods {unknown}; choose from {sorted(table)}")
    rows = bench_exp(names, args.precision, args.domain or DOMAINS[args.precision], args.n,
                     args.repeats, timing=not args.no_timing)
    header = ExpBenchRow.HEADER.split(",")
    _emit(args, header, [r.csv_row().split(",") for r in rows])
    return EXIT_OK


def cmd_align(args) -> int:
    series = csvio.read_series_csv(args.input)
    ids = list(series)
    lengths = {v.shape for v in series.values()}
    if len(lengths) != 1:
        raise UsageError("all series must share length and channel count")
    labels = None
    if args.labels:
        table = csvio.read_labels_csv(args.labels)
        missing = [s for s in ids if s not in table]
        if missing:
            raise UsageError(f"labels missing for series {missing[:5]}")
        labels = [table[s] for s in ids]
    res = joint_align([series[s] for s in ids], labels, _align_cfg(args))
    reduction = (0.0 if res.variance_before == 0.0 else
                 100.0 * (res.variance_after - res.variance_before) / res.variance_before)
    if args.out:
        rows = []
        for sid, w in zip(ids, res.warped):
            rows += list(csvio._series_rows({sid: w}, (1,)))
        cents = res.centroids if labels is not None else {None: res.centroid}
        for label, c in cents.items():
            name = "__centroid__" if label is None else f"__centroid__{label}"
            rows += list(csvio._series_rows({name: c}, (0,)))
        csvio.write_rows(args.out, csvio.SERIES_HEADER + ["warped"], rows)
    print(SUMMARY_HEADER)
    print(f"{res.variance_before:.10g},{res.variance_after:.10g},{reduction:.4f}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    stream = csvio.read_stream_csv(args.input)
    shapes = {a.shape[1] for _, a in stream}
    if len(shapes) != 1:
        raise UsageError("all stream series must share the channel count")
    model, out = run_stream([a for _, a in stream], warmup_size=args.warmup, k=args.k,
                            radius_factor=args.radius, n_init=args.n_init, n_iter=args.n_iter,
                            cfg=_align_cfg(args), seed=args.seed,
                            use_alignment=not args.euclidean, gate=args.gate)
    rows = [(sid, a.cluster_id, a.created, a.distance) for (sid, _), a in zip(stream, out)]
    if args.out:
        csvio.write_assignments_csv(args.out, rows)
    else:
        _emit(args, csvio.ASSIGN_HEADER, ([s, c, cr, d] for s, c, cr, d in rows))
    if args.snapshot:
        csvio.write_snapshot(args.snapshot, model.clusters)
    summary = (f"n_series={len(stream)} n_clusters={model.n_clusters} "
               f"created={sum(a.created for a in out)}")
    if args.truth:
        truth = csvio.read_labels_csv(args.truth)
        missing = [s for s, _ in stream if s not in truth]
        if missing:
            raise UsageError(f"truth labels missing for series {missing[:5]}")
        ari = adjusted_rand([truth[s] for s, _ in stream], [a.cluster_id for a in out])
        summary += f" ari={ari:.4f}"
    print(summary, file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_warp_dump(args) -> int:
    if args.grid_n < 2:
        raise UsageError("--grid-n must be at least 2")
    basis = make_basis(make_tessellation(0.0, 1.0, args.cells), args.kind, args.zero_boundary)
    if args.theta is not None:
        try:
            theta = np.array([float(v) for v in args.theta.split(",") if v.strip()])
        except ValueError:
            raise UsageError(f"--theta must be comma-separated numbers: {args.theta!r}") from None
        if theta.shape != (basis.d,):
            raise DimensionMismatch(f"--theta has {theta.size} values, basis needs {basis.d}")
    else:
        theta = sample_prior(basis, PriorConfig(args.lambda_sigma, args.lambda_s, args.seed), 1)[0]
    xs = np.linspace(0.0, 1.0, args.grid_n)
    phi, batch = integrate_batch(basis, theta, xs, FlowConfig())
    der = flow_derivatives(basis, theta, batch, second_order=False)
    _emit(args, WARP_DUMP_HEADER,
          ([x, p, d] for x, p, d in zip(xs, np.ravel(phi), np.ravel(der.d_x))))
    return EXIT_OK


def _thread_cap(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("CPAWARP_THREADS")
    if env:
        try:
            v = int(env)
        except ValueError:
            raise UsageError(f"CPAWARP_THREADS must be a positive integer, got {env!r}") from None
        if v < 1:
            raise UsageError("CPAWARP_THREADS must be a positive integer")
        return v
    return os.cpu_count() or 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=_thread_cap(args)):
            return args.func(args)
    except IoError as exc:
        print(f"cpawarp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"cpawarp: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CpaWarpError, ValueError) as exc:
        print(f"cpawarp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cpawarp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
