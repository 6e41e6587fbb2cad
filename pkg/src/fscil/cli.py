"""Command-line front end.

Verbs: ``train-base`` (base-session training to a checkpoint),
``run-sessions`` (walk the few-shot sessions with a chosen method),
``eval`` (score a checkpoint on a cumulative test union), ``gradcheck``
(the dual gradient audit), and ``report`` (render a run directory into a
table, CSV, and figures).

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import os
import sys

from . import errors
from .data import load_checkpoint, load_config, save_checkpoint
from .gradcheck import CLOSED_TOLERANCE, FD_TOLERANCE, run_gradcheck
from .report import (
    ASSIGNMENT_CSV,
    RUN_REPORT,
    TRAIN_REPORT,
    format_table,
    read_run_report,
    render_report,
    write_assignment_csv,
    write_run_report,
    write_train_report,
)
from .runner import (
    METHODS,
    checkpoint_from_state,
    dataset_from_config,
    infer_config,
    run_base_training,
    run_sessions,
    state_from_checkpoint,
    stream_from_config,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_DATA_ERRORS = (
    errors.ParseError,
    errors.InsufficientClassesError,
    errors.InsufficientShotsError,
    errors.CoverageMismatchError,
    errors.DuplicateLabelError,
    errors.EmptyDatasetError,
    errors.EmptyClassError,
    errors.CheckpointError,
    errors.InvalidParameterError,
    errors.DimensionMismatchError,
)
_NUMERIC_ERRORS = (
    errors.NonFiniteError,
    errors.ZeroNormError,
    errors.AssumptionViolatedError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fscil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_overrides(p):
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--gamma", type=float, default=None,
                       help="override the masked-term weight")
        p.add_argument("--virtual", type=int, default=None,
                       help="override the virtual prototype count")
        p.add_argument("--eta", type=float, default=None,
                       help="override the inference mixture weight")

    p = sub.add_parser("train-base", help="train the base session, write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    add_overrides(p)

    p = sub.add_parser("run-sessions", help="walk the few-shot sessions with a method")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    add_overrides(p)

    p = sub.add_parser("eval", help="score a checkpoint on a cumulative test union")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", default="fact", choices=("fact", "protonet"))
    p.add_argument("--session", type=int, default=0,
                   help="cumulative test union runs through this session")
    add_overrides(p)

    p = sub.add_parser("gradcheck", help="audit analytic gradients against both oracles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--corrupt", action="store_true",
                   help="test hook: inject a known gradient fault")

    p = sub.add_parser("report", help="render a run directory (table, CSV, figures)")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    return parser


def _load_config_with_overrides(args):
    if not os.path.exists(args.config):
        raise UsageError(f"config file {args.config!r} does not exist")
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "gamma", None) is not None:
        cfg.gamma = args.gamma
    if getattr(args, "virtual", None) is not None:
        cfg.num_virtual = args.virtual
    if getattr(args, "eta", None) is not None:
        cfg.eta = args.eta
    return cfg


def _cmd_train_base(args) -> int:
    cfg = _load_config_with_overrides(args)
    os.makedirs(args.out, exist_ok=True)
    run = run_base_training(cfg)
    save_checkpoint(os.path.join(args.out, "checkpoint.bin"),
                    checkpoint_from_state(run.state, cfg))
    write_train_report(os.path.join(args.out, TRAIN_REPORT), run.report)
    print(f"trained {cfg.epochs} epochs on {len(run.stream.base_train)} instances "
          f"({cfg.num_base} base classes, {run.state.head.num_virtual} virtual prototypes)")
    print(f"final train accuracy {run.report.final_train_acc:.4f}")
    print(f"wrote {os.path.join(args.out, 'checkpoint.bin')}")
    return EXIT_OK


def _cmd_run_sessions(args) -> int:
    cfg = _load_config_with_overrides(args)
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint {args.checkpoint!r} does not exist")
    os.makedirs(args.out, exist_ok=True)
    cp = load_checkpoint(args.checkpoint)
    state = state_from_checkpoint(cp)
    train, test = dataset_from_config(cfg)
    stream = stream_from_config(cfg, train, test)
    metrics, final_state = run_sessions(state, stream, cfg, args.method)
    write_run_report(os.path.join(args.out, RUN_REPORT), metrics)
    write_assignment_csv(os.path.join(args.out, ASSIGNMENT_CSV), metrics.assignment,
                         stream.base_classes)
    save_checkpoint(os.path.join(args.out, "checkpoint_final.bin"),
                    checkpoint_from_state(final_state, cfg))
    for b, acc in enumerate(metrics.acc):
        print(f"session {b}: acc {100 * acc:.2f}%")
    print(f"pd {100 * metrics.pd:.2f}")
    print(f"wrote {os.path.join(args.out, RUN_REPORT)}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .protocol import evaluate_session

    cfg = _load_config_with_overrides(args)
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint {args.checkpoint!r} does not exist")
    cp = load_checkpoint(args.checkpoint)
    state = state_from_checkpoint(cp)
    train, test = dataset_from_config(cfg)
    stream = stream_from_config(cfg, train, test)
    acc = evaluate_session(state, stream, args.session, infer_config(cfg), args.method)
    print(f"acc={100 * acc:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    result = run_gradcheck(args.seed, args.trials, corrupt=args.corrupt)
    print(f"finite-difference audit over {result.trials} instances "
          f"(tolerance {FD_TOLERANCE:g}):")
    for key in sorted(result.fd_max):
        print(f"  {key:10s} max rel err {result.fd_max[key]:.3e}")
    print(f"closed-form audit (tolerance {CLOSED_TOLERANCE:g}):")
    for key in sorted(result.closed_max):
        print(f"  {key:10s} max rel err {result.closed_max[key]:.3e}")
    if not result.ok:
        failing = [k for k, v in result.fd_max.items() if v > FD_TOLERANCE]
        failing += [k for k, v in result.closed_max.items() if v > CLOSED_TOLERANCE]
        print(f"FAIL: {', '.join(sorted(set(failing)))}")
        return EXIT_NUMERIC
    print("OK")
    return EXIT_OK


def _cmd_report(args) -> int:
    run_path = os.path.join(args.run, RUN_REPORT)
    if not os.path.exists(run_path):
        raise errors.ParseError(f"no {RUN_REPORT} under {args.run!r}")
    written = render_report(args.run, args.out)
    print(format_table(read_run_report(run_path)), end="")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


_HANDLERS = {
    "train-base": _cmd_train_base,
    "run-sessions": _cmd_run_sessions,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.verb](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
