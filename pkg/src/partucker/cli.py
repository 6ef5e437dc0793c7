"""Command-line interface: ``partucker <command> ...``.

Exit codes are 0 on success, 1 for usage errors and 2 for data errors.
Modes and index ranges are zero-based.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

import numpy as np

from . import analysis, cost, io
from .decompose import DecomposeOptions, TuckerModel, hooi, reconstruct, sthosvd
from .distributed import distribute, par_hooi, par_sthosvd
from .runtime import Harness, HarnessError

ENV_RANKS = "PARTUCKER_RANKS"

log = logging.getLogger("partucker")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _int_list(values) -> tuple[int, ...]:
    # --dims 4 5 6 and --dims 4,5,6 are both accepted
    return tuple(v for part in values for v in part)


def _range(text: str):
    try:
        mode, span = text.split("=", 1)
        a, b = span.split(":", 1)
        return int(mode), slice(int(a) if a else None, int(b) if b else None)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected mode=a:b, got {text!r}")


def _mode_order(text: str):
    if text.startswith("explicit:"):
        return _ints(text[len("explicit:"):])
    if text not in ("natural", "greedy-flops", "max-ratio", "max-compression-ratio"):
        raise argparse.ArgumentTypeError(
            f"expected natural, greedy-flops, max-ratio or explicit:<perm>, got {text!r}"
        )
    return text


def _g(v) -> str:
    return f"{v:.6g}"


def _fmt(vals) -> str:
    return ",".join(str(v) for v in vals)


def _check_grid(grid, ndim: int):
    if grid is None:
        return None
    if len(grid) != ndim:
        raise UsageError(f"--grid has {len(grid)} entries but the tensor has {ndim} modes")
    if any(p < 1 for p in grid):
        raise UsageError(f"--grid entries must be positive, got {_fmt(grid)}")
    want = os.environ.get(ENV_RANKS)
    if want is not None and math.prod(grid) != int(want):
        raise UsageError(f"--grid {_fmt(grid)} has {math.prod(grid)} ranks but {ENV_RANKS}={want}")
    return grid


def cmd_compress(args) -> int:
    x = io.read_tensor(args.input)
    grid = _check_grid(args.grid, x.ndim)
    record = None
    if args.variable_mode is not None:
        if not 0 <= args.variable_mode < x.ndim:
            raise UsageError(f"--variable-mode {args.variable_mode} out of range for {x.ndim} modes")
        x, record = analysis.center_scale(x, args.variable_mode)
    opts = DecomposeOptions(epsilon=args.tolerance, mode_order=args.mode_order,
                            max_hooi_iters=args.hooi_iters, hooi_rel_tol=args.hooi_tol)
    if grid is None or math.prod(grid) == 1 and not args.serialize_ranks:
        model = hooi(x, opts) if args.hooi_iters > 0 else sthosvd(x, opts)
    else:
        harness = Harness(grid, "serial" if args.serialize_ranks else None)
        dx = distribute(x, grid)
        run = par_hooi if args.hooi_iters > 0 else par_sthosvd
        model = run(dx, opts, harness=harness).gather()
        log.info("communication: %s", harness.ledger.report())
    model.scaling = record
    io.write_model(args.output, model)
    print(f"dims {_fmt(model.dims)}")
    print(f"ranks {_fmt(model.ranks)}")
    print(f"compression ratio {_g(analysis.compression_ratio(model.dims, model.ranks))}")
    fit = max(model.fit_history[-1], 0.0)
    rel = math.sqrt(fit) / model.original_norm if model.original_norm > 0 else 0.0
    print(f"normalized rms {_g(rel)}")
    return 0


def cmd_reconstruct(args) -> int:
    model = io.read_model(args.input)
    ranges = {}
    for mode, sl in args.range or ():
        if not 0 <= mode < model.ndim:
            raise UsageError(f"--range mode {mode} out of range for {model.ndim} modes")
        if mode in ranges:
            raise UsageError(f"--range given twice for mode {mode}")
        ranges[mode] = sl
    x = reconstruct(model, ranges)
    if args.physical_units:
        rec = model.scaling
        if rec is None:
            raise UsageError("--physical-units needs a model compressed with --variable-mode")
        sel = ranges.get(rec.variable_mode)
        if sel is not None:
            rows = np.arange(rec.means.size)[sel]
            rec = analysis.ScalingRecord(rec.variable_mode, rec.means[rows], rec.stds[rows],
                                         rec.divided[rows])
        x = analysis.inverse_center_scale(x, rec)
    io.write_tensor(args.output, x)
    print(f"dims {_fmt(x.dims)}")
    return 0


def cmd_analyze(args) -> int:
    if args.input is None:
        if args.dims is None or args.ranks is None:
            raise UsageError("analyze needs --input or both --dims and --ranks")
        dims, ranks = _int_list(args.dims), _int_list(args.ranks)
        print(f"ranks {_fmt(ranks)}")
        print(f"compression ratio {_g(analysis.compression_ratio(dims, ranks))}")
        return 0
    x = io.read_tensor(args.input)
    curves = analysis.error_curves(x)
    if args.ranks is not None:
        ranks = _int_list(args.ranks)
        if len(ranks) != x.ndim:
            raise UsageError(f"--ranks has {len(ranks)} entries but the tensor has {x.ndim} modes")
    elif args.tolerance is not None:
        ranks = tuple(c.rank_for(args.tolerance, x.ndim) for c in curves)
    else:
        raise UsageError("analyze --input needs --tolerance or --ranks")
    bound = math.sqrt(math.fsum(float(c.normalized_tail[r]) ** 2 for c, r in zip(curves, ranks)))
    for c, r in zip(curves, ranks):
        print(f"mode {c.mode}: rank {r} of {x.dims[c.mode]}, tail {_g(c.normalized_tail[r])}")
    print(f"ranks {_fmt(ranks)}")
    print(f"compression ratio {_g(analysis.compression_ratio(x.dims, ranks))}")
    print(f"normalized rms bound {_g(bound)}")
    if args.curves_out:
        with open(args.curves_out, "w", newline="") as f:
            analysis.curves_to_csv(curves, f)
    return 0


def cmd_estimate_cost(args) -> int:
    params = cost.CostParams(args.alpha, args.beta, args.gamma, _int_list(args.grid),
                             _int_list(args.dims), _int_list(args.ranks), args.mode_order)
    report = cost.estimate_cost(params, args.algorithm)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_generate(args) -> int:
    x = io.generate_synthetic(_int_list(args.dims), _int_list(args.ranks), args.noise, args.seed)
    io.write_tensor(args.output, x)
    print(f"dims {_fmt(x.dims)}")
    print(f"norm {_g(x.norm())}")
    return 0


def cmd_stats(args) -> int:
    m: TuckerModel = io.read_model(args.input)
    print(f"dims {_fmt(m.dims)}")
    print(f"ranks {_fmt(m.ranks)}")
    print(f"compression ratio {_g(analysis.compression_ratio(m.dims, m.ranks))}")
    print(f"norm {_g(m.original_norm)}")
    if m.scaling is not None:
        print(f"variable mode {m.scaling.variable_mode}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="partucker", description="Tucker compression of dense tensors.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compress", help="compress a tensor file into a model file")
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--tolerance", type=float, required=True, help="relative error target")
    c.add_argument("--grid", type=_ints, help="processor grid p0,...,pN-1")
    c.add_argument("--mode-order", type=_mode_order, default="max-ratio",
                   help="natural, greedy-flops, max-ratio or explicit:<perm> (default max-ratio)")
    c.add_argument("--hooi-iters", type=int, default=25)
    c.add_argument("--hooi-tol", type=float, default=1e-6)
    c.add_argument("--variable-mode", type=int, help="center and scale slices along this mode first")
    c.add_argument("--serialize-ranks", action="store_true",
                   help="run simulated ranks one at a time")
    c.set_defaults(func=cmd_compress)

    r = sub.add_parser("reconstruct", help="expand a model file back to a tensor file")
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--range", type=_range, action="append", metavar="MODE=A:B",
                   help="keep indices A..B-1 of MODE (repeatable)")
    r.add_argument("--physical-units", action="store_true", help="undo centering and scaling")
    r.set_defaults(func=cmd_reconstruct)

    a = sub.add_parser("analyze", help="mode-wise error curves and suggested ranks")
    a.add_argument("--input")
    a.add_argument("--curves-out")
    a.add_argument("--tolerance", type=float)
    a.add_argument("--dims", type=_ints, nargs="+")
    a.add_argument("--ranks", type=_ints, nargs="+")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("estimate-cost", help="predicted alpha-beta-gamma cost as CSV")
    e.add_argument("--dims", type=_ints, nargs="+", required=True)
    e.add_argument("--ranks", type=_ints, nargs="+", required=True)
    e.add_argument("--grid", type=_ints, nargs="+", required=True)
    e.add_argument("--alpha", type=float, required=True)
    e.add_argument("--beta", type=float, required=True)
    e.add_argument("--gamma", type=float, required=True)
    e.add_argument("--algorithm", choices=("sthosvd", "hooi"), default="sthosvd")
    e.add_argument("--mode-order", type=_ints)
    e.set_defaults(func=cmd_estimate_cost)

    g = sub.add_parser("generate", help="write a seeded synthetic low-rank tensor")
    g.add_argument("--dims", type=_ints, nargs="+", required=True)
    g.add_argument("--ranks", type=_ints, nargs="+", required=True)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--output", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("stats", help="summarize a model file")
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"partucker: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, IndexError, HarnessError) as exc:
        print(f"partucker: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
