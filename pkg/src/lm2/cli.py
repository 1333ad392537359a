"""Command-line interface.

Subcommands: run, replay, eval, curate, reward-export, convert-math,
convert-medqa, validate-config. Exit codes: 0 success, 1 partial failure
(some episodes aborted or mismatched), 2 configuration or usage errors.
Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Any, Final

from lm2.backends import BackendDescriptor, RecordingBackend, ReplayBackend, ReplayCache, build_backend
from lm2.config import RunConfig
from lm2.core import EpisodeTrace, Question, dumps_canonical
from lm2.curate import SKIP_BACKEND_ERROR, curate_decomposer, curate_verifier
from lm2.errors import Lm2Error
from lm2.evaluation import build_report, convert_math, convert_medqa, load_dataset
from lm2.orchestrator import run_batch, trace_filename
from lm2.reward import RewardParams, export_reward_dataset

logger = logging.getLogger(__name__)

MANIFEST_VERSION: Final = "lm2-manifest/1"
MANIFEST_NAME: Final = "run_manifest.json"
TRACES_DIRNAME: Final = "traces"
CACHE_NAME: Final = "replay_cache.jsonl"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lm2",
        description="Decompose-solve-verify orchestration for multi-step reasoning.",
    )
    parser.add_argument(
        "--log-level",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        default=None,
        help="override the configured log level",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a dataset through the engine")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--dataset", required=True)
    p_run.add_argument("--out", required=True, help="run output directory")
    p_run.add_argument("--parallelism", type=int, default=1)

    p_replay = sub.add_parser("replay", help="re-run a recorded run from its cache")
    p_replay.add_argument("--traces", required=True, help="run output directory")
    p_replay.add_argument(
        "--strict", action="store_true", help="fail on any call missing from the cache"
    )

    p_eval = sub.add_parser("eval", help="score traces against a dataset")
    p_eval.add_argument("--traces", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", default=None, help="report JSON path (default: stdout)")

    p_curate = sub.add_parser("curate", help="generate SFT training records")
    p_curate.add_argument("--role", required=True, choices=("decomposer", "verifier"))
    p_curate.add_argument("--config", required=True)
    p_curate.add_argument("--dataset", required=True)
    p_curate.add_argument("--out", required=True, help="output directory")

    p_export = sub.add_parser("reward-export", help="export (state, action, reward) records")
    p_export.add_argument("--traces", required=True)
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--include-rejected", action="store_true")
    p_export.add_argument("--config", default=None, help="config supplying reward params")

    p_math = sub.add_parser("convert-math", help="convert a math benchmark directory")
    p_math.add_argument("--in", dest="in_path", required=True)
    p_math.add_argument("--out", required=True)

    p_medqa = sub.add_parser("convert-medqa", help="convert a medical-QA JSONL export")
    p_medqa.add_argument("--in", dest="in_path", required=True)
    p_medqa.add_argument("--out", required=True)

    p_validate = sub.add_parser("validate-config", help="check a config file")
    p_validate.add_argument("--config", required=True)

    return parser


def _resolve_traces_dir(path: str) -> Path:
    base = Path(path)
    nested = base / TRACES_DIRNAME
    return nested if nested.is_dir() else base


def _load_traces(path: str) -> list[EpisodeTrace]:
    directory = _resolve_traces_dir(path)
    if not directory.is_dir():
        raise Lm2Error(f"trace directory not found: {directory}")
    files = sorted(directory.glob("*.json"))
    if not files:
        raise Lm2Error(f"no trace files in {directory}")
    return [EpisodeTrace.load(f) for f in files]


def cmd_run(args: argparse.Namespace) -> int:
    config = RunConfig.load(args.config)
    _apply_log_level(args, config)
    templates = config.load_templates()
    questions = load_dataset(args.dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    cache = ReplayCache(out_dir / CACHE_NAME)
    backends = {
        role: RecordingBackend(build_backend(desc), cache)
        for role, desc in config.backends.items()
    }
    fingerprint = config.fingerprint(templates)

    cancel = threading.Event()

    def on_interrupt(signum: int, frame: Any) -> None:
        print("interrupted: flushing in-flight traces", file=sys.stderr)
        cancel.set()

    previous = None
    try:
        previous = signal.signal(signal.SIGINT, on_interrupt)
    except ValueError:
        pass  # not the main thread; cancellation not wired
    try:
        summary = run_batch(
            questions,
            backends,
            config.policy,
            parallelism=args.parallelism,
            out_dir=out_dir / TRACES_DIRNAME,
            templates=templates,
            fingerprint=fingerprint,
            cancel_event=cancel,
        )
    finally:
        if previous is not None:
            signal.signal(signal.SIGINT, previous)

    manifest = {
        "version": MANIFEST_VERSION,
        "fingerprint": fingerprint,
        "config": config.to_dict(),
        "dataset": [q.to_dict() for q in questions],
        "parallelism": args.parallelism,
        "summary": {
            "episodes": len(summary.traces),
            "completed": summary.completed,
            "aborted": summary.aborted,
        },
        "traces_dir": TRACES_DIRNAME,
        "replay_cache": CACHE_NAME,
    }
    (out_dir / MANIFEST_NAME).write_text(
        dumps_canonical(manifest) + "\n", encoding="utf-8"
    )
    print(
        f"run: {summary.completed} completed, {summary.aborted} aborted, "
        f"traces in {out_dir / TRACES_DIRNAME}",
        file=sys.stderr,
    )
    return 0 if summary.aborted == 0 else 1


def _normalized_trace_dict(trace: EpisodeTrace) -> dict[str, Any]:
    """Trace dict with timing-only fields masked for comparison."""
    data = trace.to_dict()
    for call in data["model_calls"]:
        call["latency_ms"] = 0
        call["attempts"] = 1
    return data


def cmd_replay(args: argparse.Namespace) -> int:
    run_dir = Path(args.traces)
    manifest_path = run_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise Lm2Error(f"no {MANIFEST_NAME} in {run_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise Lm2Error(f"unsupported manifest version: {manifest.get('version')!r}")
    config = RunConfig.from_dict(manifest["config"])
    _apply_log_level(args, config)
    templates = config.load_templates()
    questions = [Question.from_dict(d) for d in manifest["dataset"]]
    cache_path = run_dir / manifest["replay_cache"]
    cache = ReplayCache(cache_path)

    backends = {}
    for role, desc in config.backends.items():
        replay_desc = BackendDescriptor(
            id=desc.id, kind="replay", cache_path=str(cache_path)
        )
        fallback = None if args.strict else build_backend(desc)
        backends[role] = ReplayBackend(replay_desc, cache, fallback)

    fingerprint = config.fingerprint(templates)
    if fingerprint != manifest["fingerprint"]:
        print(
            "warning: config fingerprint differs from the recorded run; "
            "traces will not match",
            file=sys.stderr,
        )
    summary = run_batch(
        questions,
        backends,
        config.policy,
        parallelism=int(manifest.get("parallelism", 1)),
        out_dir=run_dir / "replay" / TRACES_DIRNAME,
        templates=templates,
        fingerprint=fingerprint,
    )

    mismatches = 0
    for question, new_trace in zip(questions, summary.traces):
        original_path = run_dir / manifest["traces_dir"] / trace_filename(question.id)
        if not original_path.exists():
            print(f"mismatch {question.id}: no original trace", file=sys.stdout)
            mismatches += 1
            continue
        original = EpisodeTrace.load(original_path)
        same = dumps_canonical(_normalized_trace_dict(original)) == dumps_canonical(
            _normalized_trace_dict(new_trace)
        )
        if same:
            print(f"match {question.id}")
        else:
            print(f"mismatch {question.id}")
            mismatches += 1
    print(
        f"replay: {len(summary.traces) - mismatches} matched, {mismatches} mismatched",
        file=sys.stderr,
    )
    return 0 if mismatches == 0 else 1


def cmd_eval(args: argparse.Namespace) -> int:
    traces = _load_traces(args.traces)
    dataset = load_dataset(args.dataset)
    report = build_report(traces, dataset)
    if args.out:
        report.save(args.out)
        print(report.render_table(), file=sys.stdout)
        print(f"report written to {args.out}", file=sys.stderr)
    else:
        print(dumps_canonical(report.to_dict()), file=sys.stdout)
        print(report.render_table(), file=sys.stderr)
    return 0


def cmd_curate(args: argparse.Namespace) -> int:
    config = RunConfig.load(args.config)
    _apply_log_level(args, config)
    templates = config.load_templates()
    questions = load_dataset(args.dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.role == "decomposer":
        backend = build_backend(config.backends["decomposer"])
        result = curate_decomposer(
            questions, backend, out_dir / "decomposer_sft.jsonl", templates=templates
        )
    else:
        solver = build_backend(config.backends["solver"])
        labeler = build_backend(config.backends["verifier"])
        result = curate_verifier(
            questions, solver, labeler, out_dir / "verifier_sft.jsonl", templates=templates
        )
    print(
        f"curate {args.role}: {result.written} records written, "
        f"{len(result.skips)} questions skipped ({result.out_path})",
        file=sys.stderr,
    )
    had_backend_errors = any(s.reason == SKIP_BACKEND_ERROR for s in result.skips)
    return 1 if had_backend_errors else 0


def cmd_reward_export(args: argparse.Namespace) -> int:
    traces = _load_traces(args.traces)
    if args.config:
        params = RunConfig.load(args.config).policy.reward
    else:
        params = RewardParams()
    count = export_reward_dataset(
        traces, params, args.out, include_rejected=args.include_rejected
    )
    print(f"reward-export: {count} records written to {args.out}", file=sys.stderr)
    return 0


def cmd_convert_math(args: argparse.Namespace) -> int:
    count = convert_math(args.in_path, args.out)
    print(f"convert-math: {count} questions written to {args.out}", file=sys.stderr)
    return 0


def cmd_convert_medqa(args: argparse.Namespace) -> int:
    count = convert_medqa(args.in_path, args.out)
    print(f"convert-medqa: {count} questions written to {args.out}", file=sys.stderr)
    return 0


def cmd_validate_config(args: argparse.Namespace) -> int:
    config = RunConfig.load(args.config)
    config.load_templates()
    print(f"ok: {args.config}")
    return 0


_HANDLERS: Final = {
    "run": cmd_run,
    "replay": cmd_replay,
    "eval": cmd_eval,
    "curate": cmd_curate,
    "reward-export": cmd_reward_export,
    "convert-math": cmd_convert_math,
    "convert-medqa": cmd_convert_medqa,
    "validate-config": cmd_validate_config,
}


def _apply_log_level(args: argparse.Namespace, config: RunConfig | None = None) -> None:
    level = args.log_level or (config.log_level if config else "INFO")
    logging.getLogger().setLevel(level)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel("INFO")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.log_level:
        logging.getLogger().setLevel(args.log_level)
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except Lm2Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
