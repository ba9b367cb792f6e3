"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every option can
also come from ``--config FILE`` (``key=value`` per line, ``#`` comments);
options given on the command line win.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ContractError, SagcrfError
from .features import load_tabular, synth_split, write_tabular
from .harness import OPTIMIZERS, RunOptions, benchmark, compute_reference_optimum, emit_outputs, run_optimizer
from .memory import MODES, memory_report, memory_report_csv
from .objective import CrfObjective

log = logging.getLogger("sagcrf")

SYNTH_DEFAULTS = {"n": 500, "test": 200, "k": 4, "law": "heavy", "noise": 0.1, "seed": 0, "tmax": 80}


class UsageError(Exception):
    pass


def parse_synth(spec: str) -> dict:
    """``default`` or comma-separated ``key=value`` overrides of :data:`SYNTH_DEFAULTS`."""
    out = dict(SYNTH_DEFAULTS)
    if spec in ("", "default"):
        return out
    for part in spec.split(","):
        key, sep, val = part.partition("=")
        key = key.strip().lower()
        if not sep or key not in out:
            raise UsageError(f"bad --synth entry {part!r}; keys are {sorted(out)}")
        typ = type(SYNTH_DEFAULTS[key])
        try:
            out[key] = typ(val.strip())
        except ValueError:
            raise UsageError(f"bad value for synth key {key!r}: {val!r}") from None
    return out


def read_config(path) -> list[str]:
    """Turn a ``key=value`` file into command-line tokens."""
    tokens = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{no}: expected key=value")
        key = key.strip().replace("_", "-")
        val = val.strip()
        if val.lower() in ("true", "yes", "on"):
            tokens.append(f"--{key}")
        elif val.lower() in ("false", "no", "off"):
            continue
        else:
            tokens += [f"--{key}", val]
    return tokens


def _float_list(s: str) -> tuple:
    try:
        vals = tuple(float(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _int_list(s: str) -> tuple:
    try:
        return tuple(int(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="training file (whitespace columns, blank line between sequences)")
    p.add_argument("--test", help="held-out file in the same format")
    p.add_argument("--synth", help="synthetic data instead of --data: 'default' or key=value list "
                                   "(n, test, k, law, noise, seed, tmax)")
    p.add_argument("--label-column", type=int, default=-1, help="label column index (default: last)")


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="ridge weight (default 1/n)")
    p.add_argument("--passes", type=float, default=30.0, help="effective-pass budget")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--memory", choices=MODES, default="mixed")
    p.add_argument("--delta", type=float, default=1e-4, help="SAG stopping tolerance")
    p.add_argument("--eta", type=float, default=None, help="fixed baseline step constant (skips tuning)")
    p.add_argument("--eta-grid", type=_float_list, default=None, help="comma-separated baseline step grid")
    p.add_argument("--adagrad-delta", type=float, default=1.0)
    p.add_argument("--log-interval", type=float, default=1.0, help="effective passes between log rows")
    p.add_argument("--wall-clock", action="store_true", help="record wall time in the time_s column")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--cache", default=None, help="reference-optimum cache directory (default OUT/cache)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sagcrf", description="SAG training for linear-chain CRFs")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="key=value file with default options")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train", help="train one optimizer")
    _data_args(p)
    _run_args(p)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="sag-nus-star")

    p = sub.add_parser("benchmark", help="all optimizers on one dataset with a shared reference optimum")
    _data_args(p)
    _run_args(p)
    p.add_argument("--optimizers", default=",".join(OPTIMIZERS), help="comma-separated subset")

    p = sub.add_parser("verify-convergence", help="Monte-Carlo check of the SAGA convergence bounds")
    p.add_argument("--variant", choices=("a", "b", "both"), default="both")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--checkpoints", type=_int_list, default=(10, 100, 1000))
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p = sub.add_parser("inspect-memory", help="gradient-memory sizes per storage mode")
    _data_args(p)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p = sub.add_parser("gen-synth", help="write a synthetic dataset to disk")
    p.add_argument("--n", type=int, default=SYNTH_DEFAULTS["n"])
    p.add_argument("--k", type=int, default=SYNTH_DEFAULTS["k"])
    p.add_argument("--length-law", default=SYNTH_DEFAULTS["law"])
    p.add_argument("--noise", type=float, default=SYNTH_DEFAULTS["noise"])
    p.add_argument("--seed", type=int, default=SYNTH_DEFAULTS["seed"])
    p.add_argument("--tmax", type=int, default=SYNTH_DEFAULTS["tmax"])
    p.add_argument("--test-n", type=int, default=0)
    p.add_argument("--out", required=True, help="training file to write")
    p.add_argument("--test-out", default=None, help="held-out file to write (needs --test-n)")
    return parser


def load_data(args, parser):
    """(train, test-or-None) from --data/--test or --synth."""
    if bool(args.data) == bool(args.synth):
        parser.error("give exactly one of --data PATH or --synth SPEC")
    if args.synth:
        s = parse_synth(args.synth)
        train, test = synth_split(s["n"], max(s["test"], 1), s["k"], s["law"], s["noise"], s["seed"],
                                  t_max=s["tmax"])
        return train, (test if s["test"] > 0 else None)
    for path in (args.data, args.test):
        if path and not Path(path).is_file():
            parser.error(f"dataset file not found: {path}")
    train = load_tabular(args.data, args.label_column)
    test = None
    if args.test:
        test = load_tabular(args.test, args.label_column, alphabet=train.alphabet,
                            feature_index=train.feature_index)
    return train, test


def _options(args) -> RunOptions:
    opts = RunOptions(passes=args.passes, seed=args.seed, memory=args.memory, delta=args.delta, eta=args.eta,
                      adagrad_delta=args.adagrad_delta, log_interval=args.log_interval,
                      wall_clock=args.wall_clock)
    if args.eta_grid is not None:
        opts.eta_grid = args.eta_grid
    return opts


def _progress(passes, evals, objective, grad_inf):
    log.info("pass %.3f  evals %d  f %.10g  |grad|_inf %.3e", passes, evals, objective, grad_inf)


def cmd_train(args, parser) -> int:
    train, test = load_data(args, parser)
    obj = CrfObjective(train, args.lam)
    cache = args.cache or str(Path(args.out) / "cache")
    ref = compute_reference_optimum(train, obj.lam, cache_dir=cache)
    res = run_optimizer(args.optimizer, obj, _options(args), test, _progress)
    extra = {f"{args.optimizer}-second": res.extra["second"]} if "second" in res.extra else None
    paths = emit_outputs({args.optimizer: res.log}, ref.f, args.out, extra)
    final = res.log.final
    print(f"{args.optimizer}: passes {final.passes:.3f}  f {final.objective:.10g}  gap {final.objective - ref.f:.3e}"
          + (f"  test_err {final.test_error:.4f}" if final.test_error is not None else ""))
    for p in paths:
        print(p)
    return 0


def cmd_benchmark(args, parser) -> int:
    train, test = load_data(args, parser)
    names = [x.strip() for x in args.optimizers.split(",") if x.strip()]
    bad = [x for x in names if x not in OPTIMIZERS]
    if bad or not names:
        parser.error(f"unknown optimizer(s) {bad}; choose from {', '.join(OPTIMIZERS)}")
    cache = args.cache or str(Path(args.out) / "cache")
    res = benchmark(train, test, names, args.lam, _options(args), args.out, cache, _progress)
    print(f"f* = {res.reference.f:.12g} (|grad|_inf {res.reference.grad_inf:.2e})")
    for name, r in res.runs.items():
        final = r.log.final
        print(f"{name:14s} passes {final.passes:8.3f}  gap {final.objective - res.reference.f:.3e}")
    return 0


def _emit_text(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_verify(args, parser) -> int:
    from .saga import verification_csv, verify_convergence

    if any(k < 0 or k > args.steps for k in args.checkpoints):
        parser.error("checkpoints must lie in [0, steps]")
    variants = ("a", "b") if args.variant == "both" else (args.variant,)
    rows = []
    for v in variants:
        rows += verify_convergence(v, steps=args.steps, n_seeds=args.seeds, checkpoints=args.checkpoints)
    _emit_text(verification_csv(rows), args.out)
    bad = [r for r in rows if r.empirical_mean > r.bound]
    for r in bad:
        log.warning("variant %s at k=%d: mean %.3e exceeds bound %.3e", r.variant, r.k, r.empirical_mean, r.bound)
    return 0


def cmd_memory(args, parser) -> int:
    train, _ = load_data(args, parser)
    _emit_text(memory_report_csv(memory_report(train)), args.out)
    return 0


def cmd_gen(args, parser) -> int:
    if args.test_out and args.test_n < 1:
        parser.error("--test-out needs --test-n >= 1")
    train, test = synth_split(args.n, max(args.test_n, 1), args.k, args.length_law, args.noise, args.seed,
                              t_max=args.tmax)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_tabular(train, args.out)
    print(args.out)
    if args.test_out:
        Path(args.test_out).parent.mkdir(parents=True, exist_ok=True)
        write_tabular(test, args.test_out)
        print(args.test_out)
    return 0


COMMANDS = {"train": cmd_train, "benchmark": cmd_benchmark, "verify-convergence": cmd_verify,
            "inspect-memory": cmd_memory, "gen-synth": cmd_gen}


def _with_config(argv: list[str]) -> list[str]:
    """Insert config-file options right after the subcommand so command-line options override them."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return argv
    tokens = read_config(known.config)
    for k, tok in enumerate(argv):
        if tok in COMMANDS:
            return argv[:k + 1] + tokens + argv[k + 1:]
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _with_config(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sagcrf: error: {exc}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return COMMANDS[args.command](args, sub)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        sub.print_usage(sys.stderr)
        print(f"sagcrf: error: {exc}", file=sys.stderr)
        return 2
    except (SagcrfError, ContractError, OSError) as exc:
        print(f"sagcrf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
