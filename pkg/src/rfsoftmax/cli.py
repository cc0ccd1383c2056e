"""``rfsoftmax`` command-line experiment runner.

Every subcommand writes one CSV: a ``#``-prefixed JSON metadata line with the
full configuration, a header row, then data rows.  Exit codes: 0 on success,
2 for configuration errors, 3 for runtime failures.

Examples
--------
::

    rfsoftmax bench-kernel-mse --d 256 --num-rff 100 1000 --repeats 5 --out mse.csv
    rfsoftmax bench-walltime --scheme rff exp --n 8192 524288 --num-rff 50 --out time.csv
    rfsoftmax bias-report --n 64 --m 10 --trials 100000 --repeats 10 --rff-temp 0.3
    rfsoftmax ratio-check --n 32 --softmax-temp 0.5 --rff-temp 0.5
    rfsoftmax train --synthetic --n 1000 --d 32 --m 20 --scheme exp rff uniform --epochs 3
"""

import argparse
import csv
import json
import logging
import math
import sys

from rfsoftmax import __version__, experiments
from rfsoftmax._kernels import BACKEND
from rfsoftmax.data import DatasetFormatError, load_dataset, train_test_split
from rfsoftmax.samplers import SCHEMES
from rfsoftmax.trainer import DEFAULT_RFF_TEMP, DEFAULT_SOFTMAX_TEMP, tau_from_temperature

logger = logging.getLogger("rfsoftmax")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

ALL_SCHEMES = SCHEMES + ("full",)


class _ArgumentParser(argparse.ArgumentParser):
    """argparse already exits with 2 on bad usage; keep that but route the message through us."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise experiments.ConfigError(message)


def _positive_int(text):
    value = int(float(text))
    if value < 1 or value != float(text):
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0 or not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return value


def _common(parser):
    parser.add_argument("--seed", type=int, default=0, help="base seed; repeats use seed, seed+1, ...")
    parser.add_argument("--repeats", type=_positive_int, default=1, help="number of seeds")
    parser.add_argument("--softmax-temp", type=_positive_float, default=DEFAULT_SOFTMAX_TEMP,
                        help="softmax temperature T, tau = 1/T^2 (default %(default)s)")
    parser.add_argument("--rff-temp", type=_positive_float, default=DEFAULT_RFF_TEMP,
                        help="RFF temperature T, nu = 1/T^2 (default %(default)s)")
    parser.add_argument("--alpha", type=_positive_float, default=100.0,
                        help="quadratic kernel alpha (default %(default)s)")
    parser.add_argument("--out", default="-", help="output CSV path ('-' for stdout)")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _ArgumentParser(prog="rfsoftmax", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    p = sub.add_parser("bench-kernel-mse", help="MSE of kernel approximations on random unit pairs")
    _common(p)
    p.add_argument("--d", type=_positive_int, default=256)
    p.add_argument("--num-rff", type=_positive_int, nargs="+", default=[100, 1000], metavar="D")
    p.add_argument("--pairs", type=_positive_int, default=1000)
    p.add_argument("--kernel-tau", type=_positive_float, default=0.5,
                   help="tau of the target kernel exp(tau x.y); RFF uses nu = tau (default %(default)s)")
    p.add_argument("--no-maclaurin", action="store_true")
    p.add_argument("--no-quadratic", action="store_true")

    p = sub.add_parser("bench-walltime", help="per-sample time of sampling plus sampled loss")
    _common(p)
    p.add_argument("--scheme", nargs="+", choices=SCHEMES, default=["rff", "exp"])
    p.add_argument("--n", type=_positive_int, nargs="+", default=[2**13, 2**19])
    p.add_argument("--d", type=_positive_int, default=64)
    p.add_argument("--num-rff", type=_positive_int, nargs="+", default=[50], metavar="D")
    p.add_argument("--m", type=_positive_int, default=10)
    p.add_argument("--batch", type=_positive_int, default=10)
    p.add_argument("--samples", type=_positive_int, default=10_000)
    p.add_argument("--max-memory-gb", type=_positive_float, default=None,
                   help="memory budget for the pre-flight check (default: available RAM)")

    p = sub.add_parser("bias-report", help="Monte Carlo or exact gradient bias with bound terms")
    _common(p)
    p.add_argument("--scheme", nargs="+", choices=SCHEMES, default=list(SCHEMES))
    p.add_argument("--n", type=_positive_int, default=64)
    p.add_argument("--d", type=_positive_int, default=32)
    p.add_argument("--m", type=_positive_int, default=10)
    p.add_argument("--num-rff", type=_positive_int, default=4096, metavar="D")
    p.add_argument("--trials", type=_positive_int, default=100_000)
    p.add_argument("--spread", type=float, default=1.0,
                   help="class spread around the query; <= 0 for uniform on the sphere")
    p.add_argument("--exact", action="store_true", help="enumerate all m-tuples instead of MC")

    p = sub.add_parser("ratio-check", help="RFF law vs softmax ratio r_i = e^{o_i}/(q_i Z_t)")
    _common(p)
    p.add_argument("--n", type=_positive_int, default=32)
    p.add_argument("--d", type=_positive_int, default=32)
    p.add_argument("--num-rff", type=_positive_int, nargs="+", default=[2**10, 2**12, 2**14, 2**16],
                   metavar="D")
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--band", type=_positive_float, default=0.1)

    p = sub.add_parser("train", help="train the sparse-input classifier with sampled softmax")
    _common(p)
    p.add_argument("--scheme", nargs="+", choices=ALL_SCHEMES, default=["rff"])
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", metavar="PATH", help="dataset in the sparse text format")
    source.add_argument("--synthetic", action="store_true", help="use the synthetic class mixture")
    p.add_argument("--n", type=_positive_int, default=1000, help="classes (synthetic)")
    p.add_argument("--v", type=_positive_int, default=5000, help="input features (synthetic)")
    p.add_argument("--per-class", type=_positive_int, default=20, help="examples per class (synthetic)")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--d", type=_positive_int, default=128)
    p.add_argument("--m", type=_positive_int, default=100)
    p.add_argument("--num-rff", type=_positive_int, default=256, metavar="D")
    p.add_argument("--epochs", type=_non_negative_int, default=5)
    p.add_argument("--rff-precision", choices=["double", "single"], default="double",
                   help="float width of the RFF cos/sin evaluation (single is several times faster)")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--absolute", action="store_true",
                   help="absolute-softmax loss for the quadratic scheme")
    return parser


def _metadata(args):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in {"verbose", "out"}}
    return {"tool": "rfsoftmax", "version": __version__, "backend": BACKEND, "config": config}


def write_csv(out, metadata, columns, rows):
    """Write ``# {json}``, the header and ``rows`` (dicts keyed by ``columns``)."""
    handle = sys.stdout if out == "-" else open(out, "w", newline="")
    try:
        handle.write("# " + json.dumps(metadata, sort_keys=True) + "\n")
        writer = csv.DictWriter(handle, fieldnames=columns, extrasaction="raise", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    finally:
        if handle is not sys.stdout:
            handle.close()


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def _check_output(out):
    if out == "-":
        return
    try:
        with open(out, "a"):
            pass
    except OSError as exc:
        raise experiments.ConfigError(f"cannot write output {out!r}: {exc.strerror}") from exc


def cmd_bench_kernel_mse(args):
    rows = experiments.kernel_mse_rows(
        args.d, args.num_rff, args.pairs, experiments.seed_list(args.seed, args.repeats), args.kernel_tau,
        maclaurin=not args.no_maclaurin, quadratic=not args.no_quadratic,
    )
    return ["method", "target", "D", "features", "seed", "mse"], rows


def cmd_bench_walltime(args):
    limit = None if args.max_memory_gb is None else args.max_memory_gb * 2**30
    rows = experiments.walltime_rows(
        args.scheme, args.n, args.num_rff, d=args.d, m=args.m, batch=args.batch, num_samples=args.samples,
        seed=args.seed, tau=tau_from_temperature(args.softmax_temp), nu=tau_from_temperature(args.rff_temp),
        alpha=args.alpha, memory_limit=limit,
    )
    return ["scheme", "n", "D", "m", "batch", "samples", "mean_us", "p50_us"], rows


def cmd_bias_report(args):
    rows = experiments.bias_rows(
        args.scheme, args.n, args.d, args.m, args.trials, experiments.seed_list(args.seed, args.repeats),
        tau_from_temperature(args.softmax_temp), tau_from_temperature(args.rff_temp), args.num_rff,
        alpha=args.alpha, spread=args.spread, exact=args.exact,
    )
    columns = ["scheme", "m", "seed", "bias_l2", "stderr_l2", "lb_term_l2", "ub1", "ub2", "sum_sq_ratio",
               "z_t_sq", "max_ratio_gap", "mean_partition_gap"]
    return columns, rows


def cmd_ratio_check(args):
    rows = experiments.ratio_rows(
        args.n, args.d, args.num_rff, experiments.seed_list(args.seed, args.repeats),
        tau_from_temperature(args.softmax_temp), tau_from_temperature(args.rff_temp),
        spread=args.spread, band=args.band,
    )
    return ["kind", "D", "nu", "seed", "max_dev", "mean_dev", "fraction_in_band", "envelope_corr"], rows


def cmd_train(args):
    if not 0.0 < args.test_fraction < 1.0:
        raise experiments.ConfigError("--test-fraction must lie in (0, 1)")
    if args.lr < 0:
        raise experiments.ConfigError("--lr must be non-negative")
    if args.data:
        try:
            data = load_dataset(args.data)
        except OSError as exc:
            raise experiments.ConfigError(f"cannot read dataset {args.data!r}: {exc.strerror}") from exc
        except DatasetFormatError as exc:
            raise experiments.ConfigError(str(exc)) from exc
        train, test = train_test_split(data, args.test_fraction, seed=args.seed)
    else:
        if args.n < 2:
            raise experiments.ConfigError("--n must be at least 2")
        train, test = experiments.synthetic_split(args.n, args.v, args.per_class, args.test_fraction, args.seed)
    if args.m >= train.num_labels:
        raise experiments.ConfigError(f"--m must be below the number of classes ({train.num_labels})")
    columns = experiments.train_columns(num_labels=train.num_labels)
    rows = []
    if args.epochs > 0:
        rows = experiments.train_rows(
            train, test, args.scheme, args.d, args.m, args.epochs, args.lr,
            experiments.seed_list(args.seed, args.repeats), tau_from_temperature(args.softmax_temp),
            tau_from_temperature(args.rff_temp), args.num_rff, alpha=args.alpha, absolute=args.absolute,
            rff_precision=args.rff_precision,
        )
    return columns, rows


COMMANDS = {
    "bench-kernel-mse": cmd_bench_kernel_mse,
    "bench-walltime": cmd_bench_walltime,
    "bias-report": cmd_bias_report,
    "ratio-check": cmd_ratio_check,
    "train": cmd_train,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except experiments.ConfigError as exc:
        print(f"rfsoftmax: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_output(args.out)
        columns, rows = COMMANDS[args.command](args)
        write_csv(args.out, _metadata(args), columns, rows)
    except experiments.ConfigError as exc:
        print(f"rfsoftmax: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError, OSError, MemoryError) as exc:
        print(f"rfsoftmax: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
