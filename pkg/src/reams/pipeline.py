"""Two-stage solve engine with a resumable, append-only run journal.

Stage 1 generates and executes a program per problem (zero-shot); stage 2
revisits only the failures, feeding model-generated reasoning back into code
generation for up to a configured number of rounds. Every
generation -> execution -> grading cycle is persisted as one journal line
before the run advances, so state is always a pure fold over the journal.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import sys
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol

from . import grader, promptkit
from .dataset import Dataset, Problem, load_dataset, save_dataset
from .grader import TolerancePolicy, Verdict
from .modelclient import BackendConfig, BackendError, complete, request_digest
from .promptkit import CandidateProgram, ExtractionError
from .sandbox import (
    DEFAULT_IMPORT_ALLOWLIST,
    DEFAULT_MEMORY_LIMIT,
    DEFAULT_TIME_LIMIT,
    ExecutionRequest,
    ExecutionResult,
)

__all__ = [
    "AttemptRecord",
    "Executor",
    "RunConfig",
    "RunState",
    "RunStore",
    "SandboxLimits",
    "StoreError",
    "resume_run",
    "run_reasoning_stage",
    "run_zero_shot",
]

PROOF_SKIP_DETAIL = "skipped: proof"


class StoreError(RuntimeError):
    """The run store is missing, unknown, or unwritable."""


def new_run_id() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S") + "-" + uuid.uuid4().hex[:6]


class Executor(Protocol):
    def execute(self, req: ExecutionRequest) -> ExecutionResult: ...


@dataclass(frozen=True)
class SandboxLimits:
    time_limit: float = DEFAULT_TIME_LIMIT
    memory_limit: int = DEFAULT_MEMORY_LIMIT
    import_allowlist: tuple[str, ...] = DEFAULT_IMPORT_ALLOWLIST

    def to_json(self) -> dict:
        return {
            "time_limit": self.time_limit,
            "memory_limit": self.memory_limit,
            "import_allowlist": list(self.import_allowlist),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SandboxLimits":
        return cls(
            time_limit=float(obj["time_limit"]),
            memory_limit=int(obj["memory_limit"]),
            import_allowlist=tuple(obj["import_allowlist"]),
        )


@dataclass(frozen=True)
class RunConfig:
    code_backend: BackendConfig
    reason_backend: BackendConfig
    code_model: str = promptkit.DEFAULT_CODE_MODEL
    reason_model: str = promptkit.DEFAULT_REASONING_MODEL
    max_reasoning_rounds: int = 1
    workers: int = 4
    grading_policy: str = "strict"  # strict | review
    seed: int = 0
    limits: SandboxLimits = field(default_factory=SandboxLimits)
    prompts_dir: str | None = None  # None = shipped default templates

    def __post_init__(self) -> None:
        if self.max_reasoning_rounds < 0:
            raise ValueError("max_reasoning_rounds must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.grading_policy not in ("strict", "review"):
            raise ValueError(f"unknown grading policy {self.grading_policy!r}")
        if self.prompts_dir is not None:
            object.__setattr__(self, "prompts_dir", str(self.prompts_dir))

    def templates(self) -> promptkit.TemplateSet | None:
        return promptkit.TemplateSet.from_dir(self.prompts_dir) if self.prompts_dir else None

    def to_json(self) -> dict:
        def backend(cfg: BackendConfig) -> dict:
            return {
                "kind": cfg.kind,
                "base_url": cfg.base_url,
                "api_key_env": cfg.api_key_env,
                "request_timeout": cfg.request_timeout,
                "max_retries": cfg.max_retries,
                "cache_dir": str(cfg.cache_dir) if cfg.cache_dir else None,
                "script_path": str(cfg.script_path) if cfg.script_path else None,
                "max_concurrent": cfg.max_concurrent,
            }

        return {
            "code_backend": backend(self.code_backend),
            "reason_backend": backend(self.reason_backend),
            "code_model": self.code_model,
            "reason_model": self.reason_model,
            "max_reasoning_rounds": self.max_reasoning_rounds,
            "workers": self.workers,
            "grading_policy": self.grading_policy,
            "seed": self.seed,
            "limits": self.limits.to_json(),
            "prompts_dir": self.prompts_dir,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        def backend(sub: dict) -> BackendConfig:
            return BackendConfig(
                kind=sub["kind"],
                base_url=sub.get("base_url"),
                api_key_env=sub.get("api_key_env", "REAMS_API_KEY"),
                request_timeout=float(sub.get("request_timeout", 60.0)),
                max_retries=int(sub.get("max_retries", 2)),
                cache_dir=sub.get("cache_dir"),
                script_path=sub.get("script_path"),
                max_concurrent=int(sub.get("max_concurrent", 4)),
            )

        return cls(
            code_backend=backend(obj["code_backend"]),
            reason_backend=backend(obj["reason_backend"]),
            code_model=obj.get("code_model", promptkit.DEFAULT_CODE_MODEL),
            reason_model=obj.get("reason_model", promptkit.DEFAULT_REASONING_MODEL),
            max_reasoning_rounds=int(obj.get("max_reasoning_rounds", 1)),
            workers=int(obj.get("workers", 4)),
            grading_policy=obj.get("grading_policy", "strict"),
            seed=int(obj.get("seed", 0)),
            limits=SandboxLimits.from_json(obj["limits"]) if "limits" in obj else SandboxLimits(),
            prompts_dir=obj.get("prompts_dir"),
        )


@dataclass(frozen=True)
class AttemptRecord:
    """One generation -> execution -> grading cycle, fully persisted.

    ``program`` and ``execution`` are absent for attempts that never reached
    the model (proof-based skips) and for backend failures that produced no
    program.
    """

    problem_id: str
    source: str
    stage: str  # zero_shot | reasoning_<k>
    request_digest: str
    program: CandidateProgram | None
    execution: ExecutionResult | None
    verdict: Verdict
    reasoning_text: str | None
    started_at: str
    finished_at: str

    def to_json(self) -> dict:
        return {
            "type": "attempt",
            "problem_id": self.problem_id,
            "source": self.source,
            "stage": self.stage,
            "request_digest": self.request_digest,
            "program": None
            if self.program is None
            else {
                "source": self.program.source,
                "origin_stage": self.program.origin_stage,
                "extraction_note": self.program.extraction_note,
            },
            "execution": None if self.execution is None else self.execution.to_json(),
            "verdict": {
                "value": self.verdict.value,
                "method": self.verdict.method,
                "detail": self.verdict.detail,
            },
            "reasoning_text": self.reasoning_text,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttemptRecord":
        program = obj.get("program")
        execution = obj.get("execution")
        verdict = obj["verdict"]
        return cls(
            problem_id=obj["problem_id"],
            source=obj["source"],
            stage=obj["stage"],
            request_digest=obj.get("request_digest", ""),
            program=None
            if program is None
            else CandidateProgram(
                source=program["source"],
                origin_stage=program["origin_stage"],
                extraction_note=program["extraction_note"],
            ),
            execution=None if execution is None else ExecutionResult.from_json(execution),
            verdict=Verdict(verdict["value"], verdict["method"], verdict.get("detail", "")),
            reasoning_text=obj.get("reasoning_text"),
            started_at=obj.get("started_at", ""),
            finished_at=obj.get("finished_at", ""),
        )


class RunStore:
    """Journal-backed persistence for one run: config.json, dataset.jsonl,
    an append-only journal.jsonl of attempt and adjudication events, and an
    exec/ tree holding each attempt's working directory (plot artifacts
    referenced by the journal live there)."""

    def __init__(self, root: str | Path, run_id: str):
        self.root = Path(root)
        self.run_id = run_id
        self._lock = threading.Lock()

    @property
    def run_dir(self) -> Path:
        return self.root / self.run_id

    @property
    def journal_path(self) -> Path:
        return self.run_dir / "journal.jsonl"

    @property
    def config_path(self) -> Path:
        return self.run_dir / "config.json"

    @property
    def dataset_path(self) -> Path:
        return self.run_dir / "dataset.jsonl"

    def fresh_workdir(self, problem_id: str, stage: str) -> Path:
        """An empty working directory for one attempt, kept with the run so
        journaled artifact paths stay resolvable. A leftover from a crashed,
        unjournaled attempt is cleared before reuse."""
        path = self.run_dir / "exec" / f"{problem_id}-{stage}"
        if path.exists():
            shutil.rmtree(path)
        path.mkdir(parents=True)
        return path

    @classmethod
    def create(
        cls,
        root: str | Path,
        config: RunConfig,
        dataset: Dataset,
        run_id: str | None = None,
        metadata: dict | None = None,
    ) -> "RunStore":
        run_id = run_id or new_run_id()
        store = cls(root, run_id)
        if store.run_dir.exists():
            raise StoreError(f"run {run_id!r} already exists under {root}")
        store.run_dir.mkdir(parents=True)
        snapshot = {
            "run_id": run_id,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "config": config.to_json(),
        }
        if metadata:
            snapshot.update(metadata)
        store.config_path.write_text(
            json.dumps(snapshot, indent=2, sort_keys=True), encoding="utf-8"
        )
        save_dataset(dataset, store.dataset_path)
        store.journal_path.touch()
        return store

    @classmethod
    def open(cls, root: str | Path, run_id: str) -> "RunStore":
        store = cls(root, run_id)
        if not store.config_path.is_file():
            raise StoreError(f"unknown run {run_id!r} under {root}")
        return store

    def load_config(self) -> tuple[RunConfig, dict]:
        snapshot = json.loads(self.config_path.read_text(encoding="utf-8"))
        return RunConfig.from_json(snapshot["config"]), snapshot

    def load_dataset(self) -> Dataset:
        return load_dataset(self.dataset_path, format="jsonl")

    def _append(self, obj: dict) -> None:
        line = json.dumps(obj, ensure_ascii=False) + "\n"
        with self._lock:
            with self.journal_path.open("a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def append_attempt(self, record: AttemptRecord) -> None:
        self._append(record.to_json())

    def append_adjudication(
        self, problem_id: str, stage: str, value: str, operator: str, timestamp: str
    ) -> None:
        self._append(
            {
                "type": "adjudication",
                "problem_id": problem_id,
                "stage": stage,
                "value": value,
                "operator": operator,
                "timestamp": timestamp,
            }
        )

    def read_events(self, repair: bool = True) -> list[dict]:
        """Read journal events in order.

        A corrupt record is reported with its byte offset and the load stops
        there; with ``repair`` the journal is truncated to the last good byte
        so the run resumes cleanly before the corruption.
        """
        events: list[dict] = []
        good_bytes = 0
        corrupt_at: int | None = None
        with self.journal_path.open("rb") as fh:
            for raw in fh:
                stripped = raw.decode("utf-8", errors="replace").strip()
                if stripped:
                    try:
                        obj = json.loads(stripped)
                        if not isinstance(obj, dict) or "type" not in obj:
                            raise ValueError("event is not an object with a type")
                    except (json.JSONDecodeError, ValueError):
                        corrupt_at = good_bytes
                        break
                    events.append(obj)
                good_bytes += len(raw)
        if corrupt_at is not None and repair:
            with self._lock, self.journal_path.open("r+b") as fh:
                fh.truncate(corrupt_at)
            print(
                f"warning: corrupt journal record at byte {corrupt_at} of "
                f"{self.journal_path}; truncated and resuming before it",
                file=sys.stderr,
            )
        return events


@dataclass
class RunState:
    """Pure fold of a run's journal: success vectors plus the full record list."""

    run_id: str
    config: RunConfig
    s_zero: dict[str, int]
    s_reason: dict[str, int]
    attempts: list[AttemptRecord]
    problem_sources: dict[str, str]
    proof_skipped: frozenset[str]
    dataset: Dataset | None = None

    def combined_success(self, problem_id: str) -> int:
        return self.s_zero.get(problem_id, 0) or self.s_reason.get(problem_id, 0)

    def attempted(self) -> set[tuple[str, str]]:
        return {(a.problem_id, a.stage) for a in self.attempts}

    def needs_review(self) -> list[AttemptRecord]:
        # attempts already carry adjudication overlays from the fold
        return [a for a in self.attempts if a.verdict.value == "needs_review"]


def fold_state(
    run_id: str, config: RunConfig, events: list[dict], dataset: Dataset | None = None
) -> RunState:
    by_key: dict[tuple[str, str], AttemptRecord] = {}
    order: list[tuple[str, str]] = []
    for event in events:
        if event.get("type") == "attempt":
            record = AttemptRecord.from_json(event)
            key = (record.problem_id, record.stage)
            if key not in by_key:
                order.append(key)
            by_key[key] = record
        elif event.get("type") == "adjudication":
            key = (event["problem_id"], event["stage"])
            if key in by_key:
                old = by_key[key]
                by_key[key] = replace(
                    old,
                    verdict=Verdict(
                        event["value"], "human", f"adjudicated by {event.get('operator', '?')}"
                    ),
                )
    attempts = [by_key[k] for k in order]

    s_zero: dict[str, int] = {}
    s_reason: dict[str, int] = {}
    sources: dict[str, str] = {}
    proof_skipped = set()
    for record in attempts:
        sources[record.problem_id] = record.source
        if record.stage == "zero_shot":
            s_zero[record.problem_id] = 1 if record.verdict.value == "correct" else 0
            if record.verdict.detail == PROOF_SKIP_DETAIL:
                proof_skipped.add(record.problem_id)
        else:
            prior = s_reason.get(record.problem_id, 0)
            s_reason[record.problem_id] = prior or (1 if record.verdict.value == "correct" else 0)
    return RunState(
        run_id=run_id,
        config=config,
        s_zero=s_zero,
        s_reason=s_reason,
        attempts=attempts,
        problem_sources=sources,
        proof_skipped=frozenset(proof_skipped),
        dataset=dataset,
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _derive_seed(seed: int, problem_id: str, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{problem_id}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _error_result(message: str) -> ExecutionResult:
    return ExecutionResult(
        status="protocol_error",
        answer_text=None,
        stdout="",
        stderr=message,
        artifacts=(),
        wall_time=0.0,
    )


def _grade_attempt(
    problem: Problem, result: ExecutionResult, tol: TolerancePolicy | None = None
) -> Verdict:
    return grader.grade(result.answer_text, result, problem.answer, tol)


def _attempt_zero_shot(
    problem: Problem,
    cfg: RunConfig,
    executor: Executor,
    templates: promptkit.TemplateSet | None = None,
    store: RunStore | None = None,
) -> AttemptRecord:
    started = _now()
    if problem.proof_based:
        return AttemptRecord(
            problem_id=problem.id,
            source=problem.source,
            stage="zero_shot",
            request_digest="",
            program=None,
            execution=None,
            verdict=Verdict("incorrect", "exact", PROOF_SKIP_DETAIL),
            reasoning_text=None,
            started_at=started,
            finished_at=_now(),
        )
    req = promptkit.build_zero_shot_prompt(problem, model_id=cfg.code_model, templates=templates)
    digest = request_digest(req)
    try:
        response = complete(cfg.code_backend, req)
        program = promptkit.extract_program(response.text, "zero_shot")
    except (BackendError, ExtractionError) as exc:
        return AttemptRecord(
            problem_id=problem.id,
            source=problem.source,
            stage="zero_shot",
            request_digest=digest,
            program=None,
            execution=_error_result(str(exc)),
            verdict=Verdict("incorrect", "exact", "backend failure"),
            reasoning_text=None,
            started_at=started,
            finished_at=_now(),
        )
    result = executor.execute(
        ExecutionRequest(
            program=program,
            time_limit=cfg.limits.time_limit,
            memory_limit=cfg.limits.memory_limit,
            import_allowlist=cfg.limits.import_allowlist,
            workdir=store.fresh_workdir(problem.id, "zero_shot") if store else None,
            rng_seed=_derive_seed(cfg.seed, problem.id, "zero_shot"),
        )
    )
    verdict = _grade_attempt(problem, result)
    return AttemptRecord(
        problem_id=problem.id,
        source=problem.source,
        stage="zero_shot",
        request_digest=digest,
        program=program,
        execution=result,
        verdict=verdict,
        reasoning_text=None,
        started_at=started,
        finished_at=_now(),
    )


def run_zero_shot(
    ds: Dataset, cfg: RunConfig, store: RunStore, executor: Executor
) -> RunState:
    """Stage 1: exactly one zero-shot attempt per problem.

    Proof-based problems are recorded as skipped without a model call.
    Already-journaled (problem, stage) pairs are not re-run, which makes an
    interrupted run resumable by simply calling this again.
    """
    existing = fold_state(store.run_id, cfg, store.read_events())
    done = existing.attempted()
    todo = [p for p in ds if (p.id, "zero_shot") not in done]
    templates = cfg.templates()

    def work(problem: Problem) -> None:
        record = _attempt_zero_shot(problem, cfg, executor, templates, store)
        store.append_attempt(record)

    if todo:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for future in [pool.submit(work, p) for p in todo]:
                future.result()
    return fold_state(store.run_id, cfg, store.read_events(), dataset=ds)


def _attempt_reasoning_round(
    problem: Problem,
    round_no: int,
    cfg: RunConfig,
    executor: Executor,
    templates: promptkit.TemplateSet | None = None,
    store: RunStore | None = None,
) -> AttemptRecord:
    stage = f"reasoning_{round_no}"
    started = _now()
    reasoning_text: str | None = None
    try:
        reason_req = promptkit.build_reasoning_prompt(
            problem, model_id=cfg.reason_model, templates=templates
        )
        reasoning_text = complete(cfg.reason_backend, reason_req).text
        code_req = promptkit.build_code_with_reasoning_prompt(
            problem, reasoning_text, model_id=cfg.code_model, templates=templates
        )
        digest = request_digest(code_req)
        response = complete(cfg.code_backend, code_req)
        program = promptkit.extract_program(response.text, stage)
    except (BackendError, ExtractionError, ValueError) as exc:
        return AttemptRecord(
            problem_id=problem.id,
            source=problem.source,
            stage=stage,
            request_digest="",
            program=None,
            execution=_error_result(str(exc)),
            verdict=Verdict("incorrect", "exact", "backend failure"),
            reasoning_text=reasoning_text or "(unavailable)",
            started_at=started,
            finished_at=_now(),
        )
    result = executor.execute(
        ExecutionRequest(
            program=program,
            time_limit=cfg.limits.time_limit,
            memory_limit=cfg.limits.memory_limit,
            import_allowlist=cfg.limits.import_allowlist,
            workdir=store.fresh_workdir(problem.id, stage) if store else None,
            rng_seed=_derive_seed(cfg.seed, problem.id, stage),
        )
    )
    verdict = _grade_attempt(problem, result)
    return AttemptRecord(
        problem_id=problem.id,
        source=problem.source,
        stage=stage,
        request_digest=digest,
        program=program,
        execution=result,
        verdict=verdict,
        reasoning_text=reasoning_text,
        started_at=started,
        finished_at=_now(),
    )


def run_reasoning_stage(
    state: RunState, cfg: RunConfig, store: RunStore, executor: Executor
) -> RunState:
    """Stage 2: reasoning-conditioned retries for zero-shot failures only.

    Each round appends a reasoning_<k> record; rounds stop at the first
    correct verdict or once max_reasoning_rounds is exhausted. Problems
    solved in stage 1 (or skipped as proofs) are never touched.
    """
    dataset = state.dataset or store.load_dataset()
    eligible = [
        dataset[pid]
        for pid in state.s_zero
        if state.s_zero[pid] == 0 and pid not in state.proof_skipped
    ]
    prior = {(a.problem_id, a.stage): a for a in state.attempts}
    templates = cfg.templates()

    def work(problem: Problem) -> None:
        for round_no in range(1, cfg.max_reasoning_rounds + 1):
            stage = f"reasoning_{round_no}"
            existing = prior.get((problem.id, stage))
            if existing is not None:
                if existing.verdict.value == "correct":
                    return
                continue
            record = _attempt_reasoning_round(problem, round_no, cfg, executor, templates, store)
            store.append_attempt(record)
            if record.verdict.value == "correct":
                return

    if eligible and cfg.max_reasoning_rounds > 0:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for future in [pool.submit(work, p) for p in eligible]:
                future.result()
    return fold_state(store.run_id, cfg, store.read_events(), dataset=dataset)


def resume_run(run_id: str, store: RunStore | str | Path) -> RunState:
    """Reconstruct RunState from a (possibly partial) journal.

    ``store`` may be an opened RunStore or the runs root directory.
    """
    if not isinstance(store, RunStore):
        store = RunStore.open(store, run_id)
    elif store.run_id != run_id:
        raise StoreError(f"store is for run {store.run_id!r}, not {run_id!r}")
    if not store.config_path.is_file():
        raise StoreError(f"unknown run {run_id!r}")
    config, _snapshot = store.load_config()
    dataset = store.load_dataset() if store.dataset_path.is_file() else None
    return fold_state(run_id, config, store.read_events(), dataset=dataset)
