"""Command line interface: ``nestnorm {decouple,transfer,gradcheck,bench}``."""

from __future__ import annotations

import argparse
import os
import re
import sys

import numpy as np

from . import io as nio
from .core import filter_set, moment_set, standardized_set
from .diagnostics import (discrimination_experiment, do_matrix, family_exclusions,
                          family_gradients, family_labels, FAMILIES as DO_FAMILIES)
from .errors import InvalidInputError, NestNormError
from .filterbank import builtin_bank
from .harness import (ExperimentSpec, regression_benchmark, synthetic_textures,
                      texture_benchmark, TEXTURE_MODES)
from .nen import IntegratorOptions, decouple, transfer
from .perturb import choose_theta, ranked_ramp, spectral_floor

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_IO = 2
EXIT_PARSE = 3

EPILOG = """\
exit codes:
  0  success
  1  unexpected internal error
  2  I/O error (missing or unwritable file)
  3  parse error (bad arguments, malformed CSV, PGM or JSON)
  4  invalid input (shapes, orders, parameters)
  5  degenerate signal (constant, too few distinct values, critical point)
  6  unreachable feature value
  7  integration failure (step budget exhausted)
  8  solver did not converge
  9  other library error

files:
  vector   CSV, one real per line
  image    PGM (P2 or P5, 8/16 bit), chosen by the .pgm extension
  bank     JSON {"kernels": [[...nested rows...], ...]}

output CSV schemas:
  decouple   index,feature,value
  gradcheck  i,j,feature_i,feature_j,abs_mean,abs_std,trials
             (last row: i=j=-1, feature_i=summary, pooled |DO| over included pairs)
  bench      regression:      family,N,regressor,mode,rmse_mean,rmse_std,repeats
             texture:         mode,error_mean,error_std,repeats
             discrimination:  seed,thetas,coupled,decoupled
  reals use 17 significant digits; all randomness flows from --seed.
  NESTNORM_THREADS sets the default BLAS thread count.
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def parse_orders(text: str) -> tuple[int, ...]:
    """``"1..4"`` -> (1, 2, 3, 4); ``"2,4"`` -> (2, 4)."""
    m = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*", text)
    try:
        if m:
            a, b = int(m.group(1)), int(m.group(2))
            if a < 1 or b < a:
                raise ValueError
            return tuple(range(a, b + 1))
        vals = tuple(int(t) for t in text.split(","))
        if not vals or min(vals) < 1:
            raise ValueError
        return vals
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad order range {text!r} (use a..b or a,b,c)")


def _bank_for(args, shape):
    if getattr(args, "bank", None):
        return nio.read_bank(args.bank)
    if len(shape) == 2:
        return builtin_bank("separable_9band_2d", shape)
    return builtin_bank("complementary_pair_1d", shape)


def _feature_set(kind: str, orders, bank):
    if kind == "mm":
        return moment_set(orders)
    if kind == "msm":
        return standardized_set(orders)
    if kind == "mf":
        return filter_set(bank, orders)
    return filter_set(bank, (2,))


def _perturb(x, args, bank):
    if args.perturb == "none":
        return x
    q = args.quant_step
    if q is None:
        q = 1.0 if nio.is_pgm(args.input) else 1e-6 * max(1.0, float(np.max(np.abs(x))))
    if args.perturb == "ramp":
        shape = x.shape if x.ndim == 2 else (x.size, 1)
        return x + q * ranked_ramp(shape, args.seed).reshape(x.shape)
    theta = choose_theta(x, q, bank, seed=args.seed)
    if theta <= 0:
        return x
    return np.asarray(spectral_floor(x, bank, theta, args.seed,
                                     support=None if bank is not None else np.ones(x.shape, bool)))


def _options(args) -> IntegratorOptions:
    return IntegratorOptions(step_tol=args.step_tol, analytic_arcs=not args.numeric_arcs)


def cmd_decouple(args) -> int:
    x = nio.read_signal(args.input)
    needs_bank = args.features in ("mf", "vf") or args.perturb == "spectral"
    bank = _bank_for(args, x.shape) if needs_bank else None
    x = _perturb(x, args, bank if args.features in ("mf", "vf") or args.bank else None)
    fs = _feature_set(args.features, args.orders, bank)
    vals = decouple(x, fs, _options(args))
    rows = [(i + 1, f.label, float(v)) for i, (f, v) in enumerate(zip(fs.features, vals.values))]
    nio.write_table(args.out, ("index", "feature", "value"), rows)
    return EXIT_OK


def cmd_transfer(args) -> int:
    src = nio.read_signal(args.source)
    tgt = nio.read_signal(args.target)
    bank = _bank_for(args, src.shape) if args.features in ("mf", "vf") else None
    fs = _feature_set(args.features, args.orders, bank)
    out = transfer(src, tgt, fs, _options(args))
    nio.write_signal(args.out, np.asarray(out))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    bank = None
    shape = (args.n,)
    if args.family in ("vf", "df_vf", "mf", "df_mf"):
        side = int(round(np.sqrt(args.n)))
        if side * side != args.n:
            raise InvalidInputError(f"filter families need a square N, got {args.n}")
        shape = (side, side)
        bank = nio.read_bank(args.bank) if args.bank else builtin_bank("separable_9band_2d", shape)
    xs = [rng.standard_normal(shape) for _ in range(args.trials)]
    grads = family_gradients(args.family, args.orders, bank)
    d = do_matrix(grads, xs, exclude=family_exclusions(args.family, args.orders),
                  labels=family_labels(args.family, args.orders, bank))
    rows = []
    M = len(d.labels)
    for i in range(M):
        for j in range(i + 1, M):
            rows.append((i + 1, j + 1, d.labels[i], d.labels[j],
                         float(d.abs_mean[i, j]), float(d.abs_std[i, j]), args.trials))
    rows.append((-1, -1, "summary", "", d.summary_mean, d.summary_std, args.trials))
    nio.write_table(args.out, ("i", "j", "feature_i", "feature_j", "abs_mean", "abs_std",
                               "trials"), rows)
    return EXIT_OK


def _spec(args) -> dict:
    if not args.spec:
        return {}
    obj = nio.read_json(args.spec)
    if not isinstance(obj, dict):
        raise nio.ParseError(f"{args.spec}: experiment spec must be a JSON object")
    return obj


def cmd_bench(args) -> int:
    spec = _spec(args)
    if args.experiment == "regression":
        es = ExperimentSpec.from_dict(spec)
        res = regression_benchmark(es)
        header = ("family", "N", "regressor", "mode", "rmse_mean", "rmse_std", "repeats")
        nio.write_table(args.out, header, list(res.rows()))
    elif args.experiment == "texture":
        spec = dict(spec)
        dims = tuple(spec.pop("dims", (32, 32)))
        ps = synthetic_textures(spec.pop("n_classes", 8), spec.pop("patches_per_class", 16),
                                dims, spec.get("seed", 0))
        bank = builtin_bank("separable_9band_2d", dims)
        modes = spec.pop("modes", list(TEXTURE_MODES))
        orders = tuple(spec.pop("orders", (2, 3, 4)))
        rows = []
        for mode in modes:
            try:
                r = texture_benchmark(ps, bank, orders, mode, **spec)
            except TypeError as exc:
                raise nio.ParseError(str(exc)) from None
            rows.append((mode, r.mean, r.std, len(r.errors)))
        nio.write_table(args.out, ("mode", "error_mean", "error_std", "repeats"), rows)
    else:
        try:
            seeds = spec.pop("seeds", [spec.pop("seed", 0)]) if spec else [0]
            reps = [discrimination_experiment(seed=s, **spec) for s in seeds]
        except TypeError as exc:
            raise nio.ParseError(str(exc)) from None
        rows = [(s, " ".join("%g" % t for t in r.thetas), r.coupled, r.decoupled)
                for s, r in zip(seeds, reps)]
        nio.write_table(args.out, ("seed", "thetas", "coupled", "decoupled"), rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nestnorm", description="Hierarchically decoupled signal statistics.",
                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("decouple", help="decoupled feature values of one signal",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    d.add_argument("input")
    d.add_argument("--features", choices=("mm", "msm", "mf", "vf"), default="msm")
    d.add_argument("--orders", type=parse_orders, default=(1, 2, 3, 4))
    d.add_argument("--bank", help="filter bank JSON (default: built-in for the grid)")
    d.add_argument("--perturb", choices=("none", "ramp", "spectral"), default="none")
    d.add_argument("--quant-step", type=float, default=None,
                   help="quantization step scaling the perturbation "
                        "(default 1 for PGM, 1e-6*max|x| for CSV)")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--step-tol", type=float, default=1e-9)
    d.add_argument("--numeric-arcs", action="store_true",
                   help="integrate every arc numerically (default: closed-form arcs where known)")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decouple)

    t = sub.add_parser("transfer", help="impose the decoupled features of TARGET on SOURCE",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("source")
    t.add_argument("target")
    t.add_argument("--features", choices=("mm", "msm", "mf", "vf"), default="msm")
    t.add_argument("--orders", type=parse_orders, default=(1, 2, 3, 4))
    t.add_argument("--bank")
    t.add_argument("--step-tol", type=float, default=1e-9)
    t.add_argument("--numeric-arcs", action="store_true",
                   help="integrate every arc numerically (default: closed-form arcs where known)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_transfer)

    g = sub.add_parser("gradcheck", help="deviation-from-orthogonality table",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    g.add_argument("--family", choices=DO_FAMILIES, default="msm")
    g.add_argument("--orders", type=parse_orders, default=(1, 2, 3, 4, 5, 6))
    g.add_argument("--n", type=int, default=512)
    g.add_argument("--trials", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bank")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="run a benchmark harness",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    b.add_argument("--experiment", choices=("regression", "texture", "discrimination"),
                   required=True)
    b.add_argument("--spec", help="experiment parameters as a JSON object")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("NESTNORM_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except nio.ParseError as exc:
        print(f"ParseError: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"IOError: {exc}", file=sys.stderr)
        return EXIT_IO
    except NestNormError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit code 1
        print(f"InternalError: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
