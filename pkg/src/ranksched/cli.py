"""Command-line interface.

Exit codes: 0 on success, 2 for usage/configuration errors (argparse uses
the same code), 3 for runtime failures such as replay verification errors
or unreadable files.

Any subcommand accepts --config FILE with ``key = value`` lines (keys are
the long option names, dashes or underscores); explicit command-line
options override the file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .engine import COST_PRESETS, ReplayError, replay, run
from .predictors import (
    CrossSeedOracleScorer,
    NoisyOracleScorer,
    OracleScorer,
    PerceptionOnlyScorer,
    TrainConfig,
    load_scorer,
    save_scorer,
    train_classifier,
    train_ranking,
)
from .presets import DESKS, run_desk
from .schedulers import SchedulerConfig
from .workload import Trace, load_trace, parse_generator_spec, resample_lengths


def _load_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            out[key.strip().lower().replace("-", "_")] = val.strip()
    return out


def _apply_config_defaults(parser: argparse.ArgumentParser, cfg: dict) -> None:
    known = {}
    for action in parser._actions:
        known[action.dest] = action
    unknown = [k for k in cfg if k not in known]
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    defaults = {}
    for key, raw in cfg.items():
        action = known[key]
        if isinstance(action, (argparse._StoreTrueAction,)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            defaults[key] = action.type(raw)
        else:
            defaults[key] = raw
    parser.set_defaults(**defaults)


def _get_trace(args) -> Trace:
    if getattr(args, "trace", None) and getattr(args, "generator", None):
        raise ValueError("give either --trace or --generator, not both")
    if getattr(args, "trace", None):
        return load_trace(args.trace)
    if getattr(args, "generator", None):
        return parse_generator_spec(args.generator)
    raise ValueError("a workload is required: --trace FILE or --generator SPEC")


def _make_scorer(spec: str, trace: Trace):
    """A scorer file path, or a builtin spec like ``oracle``,
    ``noisy-oracle:0.5``, ``perception:15,0.35``, ``cross-seed:7,0.3``."""
    if os.path.exists(spec):
        return load_scorer(spec)
    name, _, argstr = spec.partition(":")
    parts = [p for p in argstr.split(",") if p]
    if name == "oracle":
        return OracleScorer()
    if name == "noisy-oracle":
        return NoisyOracleScorer(float(parts[0]) if parts else 0.5)
    if name == "perception":
        warmup = int(parts[0]) if parts else 15
        sigma = float(parts[1]) if len(parts) > 1 else 0.35
        return PerceptionOnlyScorer(warmup, sigma)
    if name == "cross-seed":
        seed = int(parts[0]) if parts else 1
        sigma = float(parts[1]) if len(parts) > 1 else 0.3
        return CrossSeedOracleScorer.from_trace(
            resample_lengths(trace, seed, sigma))
    raise ValueError(f"no such scorer file or builtin scorer: {spec!r}")


def _sched_from_args(args) -> SchedulerConfig:
    return SchedulerConfig(
        max_batch=args.max_batch,
        preemption=not args.no_preemption,
        starvation_threshold=args.starvation_threshold,
        priority_quantum=args.priority_quantum,
        mlfq_base_quantum=args.mlfq_base_quantum,
        mlfq_growth=args.mlfq_growth,
        mlfq_num_queues=args.mlfq_num_queues,
    )


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    trace = _get_trace(args)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        bucket_width=args.bucket_width,
        hidden=args.hidden,
        seed=args.seed,
    )
    if args.model == "ranking":
        result = train_ranking(trace, cfg)
    else:
        n_buckets = args.n_buckets
        if n_buckets is None and args.bucket_size is None:
            n_buckets = 10
        result = train_classifier(trace, cfg, n_buckets=n_buckets,
                                  bucket_size=args.bucket_size)
    if args.out:
        save_scorer(result.scorer, args.out)
    _emit({"report": result.report, "saved_to": args.out})
    return 0


def cmd_simulate(args) -> int:
    trace = _get_trace(args)
    scorer = _make_scorer(args.scorer, trace) if args.scorer else None
    result = run(
        trace,
        policy=args.policy,
        scorer=scorer,
        sched=_sched_from_args(args),
        cost=COST_PRESETS[args.cost_preset],
        kv_budget=args.kv_budget,
        seed=args.seed,
        rescore=args.rescore,
        stop_after_finished=args.stop_after,
        time_limit_s=args.time_limit,
        event_log_path=args.event_log,
    )
    if args.out:
        result.to_json(args.out + ".json")
        result.to_csv(args.out + ".csv")
    _emit({
        "config_hash": result.config["config_hash"],
        "metrics": result.metrics,
        "result_digest": result.digest(),
    })
    return 0


def cmd_sweep(args) -> int:
    out = run_desk(args.desk, jobs=args.jobs)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _emit(out)
    return 0


def cmd_bucket_study(args) -> int:
    args.desk = "bucket-study-desk"
    return cmd_sweep(args)


def cmd_replay(args) -> int:
    trace = None
    if args.generator:
        trace = parse_generator_spec(args.generator)
    result = replay(args.log, trace=trace, trace_path=args.trace)
    _emit({
        "verified": True,
        "config_hash": result.config["config_hash"],
        "metrics": result.metrics,
        "result_digest": result.digest(),
    })
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def _add_workload_args(p):
    p.add_argument("--trace", help="JSONL trace file")
    p.add_argument("--generator",
                   help="synthetic workload spec, e.g. "
                        "'poisson:rate=2,n=1000,dist=lognormal(5.0,1.0),seed=7'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ranksched",
        description="Deterministic simulator for rank-based LLM request "
                    "scheduling.")
    parser.add_argument("--version", action="version",
                        version=f"ranksched {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a length scorer on a workload")
    _add_workload_args(p)
    p.add_argument("--config", help="key = value defaults file")
    p.add_argument("--model", choices=["ranking", "classifier"],
                   default="ranking")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--bucket-width", type=int, default=10,
                   help="label granularity for the ranking loss")
    p.add_argument("--hidden", type=int, default=0,
                   help="hidden units; 0 trains a linear model")
    p.add_argument("--n-buckets", type=int, default=None,
                   help="classifier: number of buckets")
    p.add_argument("--bucket-size", type=int, default=None,
                   help="classifier: fixed bucket width in tokens")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="where to write the scorer JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run one policy over a workload")
    _add_workload_args(p)
    p.add_argument("--config", help="key = value defaults file")
    p.add_argument("--policy", default="fcfs",
                   choices=["fcfs", "sjf", "srtf", "mlfq", "ranking"])
    p.add_argument("--scorer",
                   help="scorer file, or builtin: oracle, noisy-oracle:SIGMA,"
                        " perception[:WARMUP,SIGMA], cross-seed[:SEED,SIGMA]")
    p.add_argument("--starvation-threshold", type=int, default=100,
                   help="promote after this many skipped steps; 0 disables")
    p.add_argument("--priority-quantum", type=int, default=50)
    p.add_argument("--mlfq-base-quantum", type=float, default=16.0)
    p.add_argument("--mlfq-growth", type=float, default=2.0)
    p.add_argument("--mlfq-num-queues", type=int, default=8)
    p.add_argument("--max-batch", type=int, default=256)
    p.add_argument("--no-preemption", action="store_true")
    p.add_argument("--kv-budget", type=int, default=None,
                   help="total KV cells; unlimited when omitted")
    p.add_argument("--cost-preset", default="default",
                   choices=sorted(COST_PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rescore", action="store_true",
                   help="refresh scores every step (free)")
    p.add_argument("--stop-after", type=int, default=None,
                   help="stop once this many requests finished")
    p.add_argument("--time-limit", type=float, default=None,
                   help="stop at this simulated time (seconds)")
    p.add_argument("--event-log", help="write a replayable event log here")
    p.add_argument("--out", help="prefix for .json and .csv result files")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a canned experiment")
    p.add_argument("desk", choices=sorted(DESKS))
    p.add_argument("--config", help="key = value defaults file")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write the result JSON here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bucket-study",
                       help="shorthand for 'sweep bucket-study-desk'")
    p.add_argument("--config", help="key = value defaults file")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write the result JSON here")
    p.set_defaults(func=cmd_bucket_study)

    p = sub.add_parser("replay", help="re-execute and verify an event log")
    p.add_argument("--log", required=True)
    p.add_argument("--trace", help="JSONL trace the log was recorded from")
    p.add_argument("--generator", help="generator spec for the trace")
    p.add_argument("--config", help="key = value defaults file")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if "--config" in argv:
            cfg_path = argv[argv.index("--config") + 1]
            cfg = _load_config_file(cfg_path)
            # Defaults go to whichever subcommand is being run.
            for action in parser._subparsers._group_actions:
                subparser = action.choices.get(argv[0]) if argv else None
                if subparser is not None:
                    _apply_config_defaults(subparser, cfg)
        args = parser.parse_args(argv)
    except IndexError:
        print("error: --config needs a file path", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ReplayError as exc:
        print(f"replay error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
