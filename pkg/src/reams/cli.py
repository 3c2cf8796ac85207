"""Command-line entry points: run, report, adjudicate.

Exit codes separate harness health from model quality: 0 means the command
ran to completion (solved or not), 1 means an infrastructure failure, and 2
means bad flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
from pathlib import Path

from . import pipeline, report
from .dataset import DatasetError, load_dataset
from .grader import NonInteractiveError, adjudicate
from .modelclient import BackendConfig
from .pipeline import RunConfig, RunStore, SandboxLimits, StoreError, resume_run
from .promptkit import DEFAULT_CODE_MODEL, DEFAULT_REASONING_MODEL
from .sandbox import SandboxExecutor, ShimNotFoundError, StubExecutor

DEFAULT_RUNS_DIR = "runs"


def _parse_backend(spec: str, api_key_env: str) -> BackendConfig:
    scheme, sep, rest = spec.partition(":")
    if not sep:
        raise ValueError(f"backend spec {spec!r} must look like scheme:target")
    if scheme == "http" or scheme == "https":
        return BackendConfig(kind="http", base_url=spec, api_key_env=api_key_env)
    if scheme == "replay":
        return BackendConfig(kind="replay", cache_dir=rest, api_key_env=api_key_env)
    if scheme == "scripted":
        return BackendConfig(kind="scripted", script_path=rest, api_key_env=api_key_env)
    raise ValueError(f"unknown backend scheme {scheme!r} (use http:, replay:, or scripted:)")


def _parse_executor(spec: str):
    scheme, _sep, rest = spec.partition(":")
    if scheme == "shim":
        return SandboxExecutor(shim_path=rest or None)
    if scheme == "stub":
        if not rest:
            raise ValueError("stub executor needs a canned-results file: stub:path.json")
        return StubExecutor.from_file(rest)
    raise ValueError(f"unknown executor scheme {scheme!r} (use shim: or stub:)")


def _dataset_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_run(args: argparse.Namespace) -> int:
    try:
        executor = _parse_executor(args.executor)
        if args.resume:
            store = RunStore.open(args.runs_dir, args.resume)
            cfg, _ = store.load_config()
            ds = store.load_dataset()
        else:
            ds = load_dataset(args.dataset)
            run_id = pipeline.new_run_id()
            code_backend = _parse_backend(args.backend, args.api_key_env)
            reason_backend = (
                _parse_backend(args.reason_backend, args.api_key_env)
                if args.reason_backend
                else code_backend
            )

            def with_cache(backend: BackendConfig) -> BackendConfig:
                # live responses are always cached so the run can be replayed
                # network-free; default location keeps the cache with the run
                if backend.kind != "http":
                    return backend
                cache = args.cache_dir or str(Path(args.runs_dir) / run_id / "cache")
                return dataclasses.replace(backend, cache_dir=cache)

            code_backend = with_cache(code_backend)
            reason_backend = with_cache(reason_backend)
            cfg = RunConfig(
                code_backend=code_backend,
                reason_backend=reason_backend,
                code_model=args.model,
                reason_model=args.reason_model,
                max_reasoning_rounds=args.max_reasoning_rounds,
                workers=args.workers,
                grading_policy="strict" if args.strict else "review",
                seed=args.seed,
                limits=SandboxLimits(
                    time_limit=args.time_limit,
                    memory_limit=args.memory_limit,
                ),
                prompts_dir=args.prompts,
            )
            store = RunStore.create(
                args.runs_dir,
                cfg,
                ds,
                run_id=run_id,
                metadata={
                    "dataset_path": str(args.dataset),
                    "dataset_hash": _dataset_hash(args.dataset),
                },
            )
    except (DatasetError, StoreError, ShimNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    print(f"run {store.run_id}: {len(ds)} problem(s)")
    state = pipeline.run_zero_shot(ds, cfg, store, executor)
    solved = sum(state.s_zero.values())
    print(f"zero-shot: {solved}/{len(state.s_zero)} solved")
    if cfg.max_reasoning_rounds > 0:
        state = pipeline.run_reasoning_stage(state, cfg, store, executor)
        combined = sum(state.combined_success(pid) for pid in state.s_zero)
        print(
            f"reasoning: {sum(state.s_reason.values())}/{len(state.s_reason)} recovered, "
            f"combined {combined}/{len(state.s_zero)}"
        )
    else:
        print("reasoning: skipped (max rounds 0)")
    reviews = len(state.needs_review())
    if reviews:
        print(f"{reviews} attempt(s) need review; run: reams adjudicate {store.run_id}")
    return 0


def _load_state(args: argparse.Namespace):
    store = RunStore.open(args.runs_dir, args.run_id)
    state = resume_run(args.run_id, store)
    _, snapshot = store.load_config()
    return store, state, snapshot


def cmd_report(args: argparse.Namespace) -> int:
    try:
        _store, state, snapshot = _load_state(args)
        if not state.s_zero:
            raise StoreError(f"run {args.run_id!r} has no attempts to report")
        expected = len(state.dataset) if state.dataset is not None else len(state.s_zero)
        if len(state.s_zero) < expected and not args.partial:
            raise StoreError(
                f"run {args.run_id!r} is incomplete "
                f"({len(state.s_zero)}/{expected} problems attempted); pass --partial to report anyway"
            )
        doc = report.build_report(
            state,
            format=args.format,
            alpha=args.alpha,
            dataset_hash=snapshot.get("dataset_hash", ""),
        )
        text = report.render(doc)
    except (StoreError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_adjudicate(args: argparse.Namespace) -> int:
    try:
        store, state, _snapshot = _load_state(args)
    except (StoreError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    pending = state.needs_review()
    if not pending:
        print("nothing to review")
        return 0
    dataset = state.dataset
    queue = [(record, dataset[record.problem_id].answer) for record in pending]
    questions = {record.problem_id: dataset[record.problem_id].question_text for record in pending}
    try:
        adjudicate(queue, store=store, operator=args.operator, questions=questions)
    except NonInteractiveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reams",
        description="Two-stage program-synthesis harness for math problem sets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the two-stage solve pipeline over a dataset")
    run.add_argument("--dataset", default=None, help="problem file (.jsonl or .csv)")
    run.add_argument(
        "--backend",
        default=None,
        help="code-generation backend: http:URL | replay:DIR | scripted:FILE",
    )
    run.add_argument(
        "--reason-backend",
        default=None,
        help="reasoning backend (defaults to --backend)",
    )
    run.add_argument("--model", default=DEFAULT_CODE_MODEL)
    run.add_argument("--reason-model", default=DEFAULT_REASONING_MODEL)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workers", type=int, default=4)
    run.add_argument("--max-reasoning-rounds", type=int, default=1)
    run.add_argument(
        "--strict",
        action="store_true",
        help="count needs_review as incorrect (unattended runs)",
    )
    run.add_argument(
        "--executor",
        default="shim:",
        help="shim:[PATH] (default; finds ./shim/runner_shim.py or $REAMS_SHIM) | stub:CANNED.json",
    )
    run.add_argument("--time-limit", type=float, default=SandboxLimits().time_limit)
    run.add_argument("--memory-limit", type=int, default=SandboxLimits().memory_limit)
    run.add_argument(
        "--prompts",
        default=None,
        metavar="DIR",
        help="directory of prompt template files overriding the shipped defaults",
    )
    run.add_argument(
        "--cache-dir",
        default=None,
        metavar="DIR",
        help="replay-cache location for http backends "
        "(default: <runs-dir>/<run_id>/cache)",
    )
    run.add_argument("--api-key-env", default="REAMS_API_KEY")
    run.add_argument("--runs-dir", default=DEFAULT_RUNS_DIR)
    run.add_argument("--resume", default=None, metavar="RUN_ID", help="continue a partial run")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="emit per-group success summaries for a completed run")
    rep.add_argument("run_id")
    rep.add_argument("--format", choices=report.REPORT_FORMATS, default="markdown")
    rep.add_argument("--out", default=None, help="write to a file instead of stdout")
    rep.add_argument("--alpha", type=float, default=0.05)
    rep.add_argument("--partial", action="store_true", help="allow reporting an incomplete run")
    rep.add_argument("--runs-dir", default=DEFAULT_RUNS_DIR)
    rep.set_defaults(func=cmd_report)

    adj = sub.add_parser("adjudicate", help="interactively resolve needs_review attempts")
    adj.add_argument("run_id")
    adj.add_argument("--operator", default="operator")
    adj.add_argument("--runs-dir", default=DEFAULT_RUNS_DIR)
    adj.set_defaults(func=cmd_adjudicate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run" and not args.resume:
        missing = [flag for flag in ("dataset", "backend") if not getattr(args, flag)]
        if missing:
            parser.error(
                "the following arguments are required: "
                + ", ".join(f"--{flag}" for flag in missing)
            )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
