"""Orchestrator half of candidate-program execution.

Spawns one child interpreter per candidate, speaks a one-document-in /
one-line-out JSON protocol with the runner shim, enforces the wall-clock
deadline with a hard kill, and never lets a shim failure propagate as an
exception: every outcome is a structured ExecutionResult.

The import guard and resource limits are best-effort isolation for honest
code, not a security boundary against a determined adversary.
"""

from __future__ import annotations

import hashlib
import json
import os
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .promptkit import CandidateProgram

__all__ = [
    "DEFAULT_IMPORT_ALLOWLIST",
    "DEFAULT_MEMORY_LIMIT",
    "DEFAULT_TIME_LIMIT",
    "ExecutionRequest",
    "ExecutionResult",
    "SandboxExecutor",
    "ShimNotFoundError",
    "StubExecutor",
    "find_shim",
    "source_digest",
]

DEFAULT_TIME_LIMIT = 30.0
DEFAULT_MEMORY_LIMIT = 512 * 1024 * 1024
# The six packages candidate programs are allowed to import; everything they
# pull in transitively is exempt from the guard.
DEFAULT_IMPORT_ALLOWLIST = ("numpy", "sympy", "matplotlib", "math", "random", "scipy")
GRACE_SECONDS = 1.0
OUTPUT_TRUNCATE_BYTES = 64 * 1024

EXECUTION_STATUSES = (
    "ok",
    "timeout",
    "runtime_error",
    "denied_import",
    "resource_exceeded",
    "protocol_error",
)


class ShimNotFoundError(RuntimeError):
    """No runner shim script could be located."""


@dataclass(frozen=True)
class ExecutionRequest:
    program: CandidateProgram
    time_limit: float = DEFAULT_TIME_LIMIT
    memory_limit: int = DEFAULT_MEMORY_LIMIT
    import_allowlist: tuple[str, ...] = DEFAULT_IMPORT_ALLOWLIST
    workdir: str | Path | None = None  # fresh temp dir is created when None
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.time_limit <= 0:
            raise ValueError("time_limit must be positive")
        if self.memory_limit <= 0:
            raise ValueError("memory_limit must be positive")


@dataclass(frozen=True)
class ExecutionResult:
    status: str
    answer_text: str | None
    stdout: str
    stderr: str
    artifacts: tuple[str, ...]
    wall_time: float

    def __post_init__(self) -> None:
        if self.status not in EXECUTION_STATUSES:
            raise ValueError(f"unknown execution status {self.status!r}")
        if self.status == "ok" and self.answer_text is None:
            raise ValueError("status ok requires answer_text")

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "answer_text": self.answer_text,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "artifacts": list(self.artifacts),
            "wall_time_s": self.wall_time,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ExecutionResult":
        return cls(
            status=obj["status"],
            answer_text=obj.get("answer_text"),
            stdout=obj.get("stdout", ""),
            stderr=obj.get("stderr", ""),
            artifacts=tuple(obj.get("artifacts") or ()),
            wall_time=float(obj.get("wall_time_s", 0.0)),
        )


def source_digest(source: str) -> str:
    """Content digest of a candidate program, used to key canned results."""
    return hashlib.sha256(source.encode("utf-8")).hexdigest()


def find_shim(explicit: str | Path | None = None) -> Path:
    """Locate the runner shim: explicit path, $REAMS_SHIM, or ./shim/runner_shim.py."""
    candidates = []
    if explicit is not None:
        candidates.append(Path(explicit))
    env = os.environ.get("REAMS_SHIM")
    if env:
        candidates.append(Path(env))
    candidates.append(Path.cwd() / "shim" / "runner_shim.py")
    for candidate in candidates:
        if candidate.is_file():
            return candidate
    raise ShimNotFoundError(
        "runner shim not found; pass an explicit path or set REAMS_SHIM"
    )


def _truncate(text: str) -> str:
    raw = text.encode("utf-8", errors="replace")
    if len(raw) <= OUTPUT_TRUNCATE_BYTES:
        return text
    return raw[:OUTPUT_TRUNCATE_BYTES].decode("utf-8", errors="replace")


class SandboxExecutor:
    """Runs candidate programs in shim subprocesses, bounded in parallel.

    Each call owns its child process and working directory; a global
    semaphore caps simultaneous children at roughly the logical CPU count.
    """

    def __init__(self, shim_path: str | Path | None = None, max_children: int | None = None):
        self.shim_path = find_shim(shim_path)
        limit = max_children or os.cpu_count() or 1
        self._children = threading.BoundedSemaphore(max(1, limit))

    def execute(self, req: ExecutionRequest) -> ExecutionResult:
        if req.workdir is None:
            workdir = Path(tempfile.mkdtemp(prefix="reams-exec-"))
        else:
            workdir = Path(req.workdir).resolve()
            if not workdir.is_dir():
                raise ValueError(f"workdir {workdir} does not exist")
            if any(workdir.iterdir()):
                raise ValueError(f"workdir {workdir} is not empty")
        payload = json.dumps(
            {
                "source": req.program.source,
                "time_limit_s": req.time_limit,
                "memory_limit_bytes": req.memory_limit,
                "allowlist": list(req.import_allowlist),
                "rng_seed": req.rng_seed,
                "workdir": str(workdir),
            }
        )
        with self._children:
            return self._run_child(payload, req.time_limit)

    def _run_child(self, payload: str, time_limit: float) -> ExecutionResult:
        started = time.monotonic()
        proc = subprocess.Popen(
            [sys.executable, str(self.shim_path)],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            start_new_session=True,
        )
        killed = False
        try:
            try:
                stdout, stderr = proc.communicate(payload, timeout=time_limit + GRACE_SECONDS)
            except subprocess.TimeoutExpired:
                killed = True
                self._kill_group(proc)
                stdout, stderr = proc.communicate()
        finally:
            # no descendant of the child survives this call
            self._kill_group(proc)
        wall = time.monotonic() - started

        if killed:
            return ExecutionResult(
                status="timeout",
                answer_text=None,
                stdout=_truncate(stdout or ""),
                stderr=_truncate(stderr or ""),
                artifacts=(),
                # measured wall includes spawn/kill overhead; the reported
                # value honors the wall_time <= limit + grace contract
                wall_time=min(wall, time_limit + GRACE_SECONDS),
            )
        return self._parse_shim_output(stdout or "", stderr or "", wall)

    @staticmethod
    def _kill_group(proc: subprocess.Popen) -> None:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError, OSError):
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:  # pragma: no cover
            pass

    @staticmethod
    def _parse_shim_output(stdout: str, stderr: str, wall: float) -> ExecutionResult:
        def protocol_error(reason: str) -> ExecutionResult:
            return ExecutionResult(
                status="protocol_error",
                answer_text=None,
                stdout=_truncate(stdout),
                stderr=_truncate(f"{reason}\n{stderr}".strip()),
                artifacts=(),
                wall_time=wall,
            )

        lines = [line for line in stdout.splitlines() if line.strip()]
        if len(lines) != 1:
            return protocol_error(f"expected exactly one protocol line, got {len(lines)}")
        try:
            obj = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            return protocol_error(f"unparseable protocol line: {exc.msg}")
        if not isinstance(obj, dict) or obj.get("status") not in EXECUTION_STATUSES:
            return protocol_error("protocol line missing a valid status")
        if obj.get("status") == "ok" and obj.get("answer_text") is None:
            return protocol_error("ok result without answer_text")
        try:
            return ExecutionResult(
                status=obj["status"],
                answer_text=obj.get("answer_text"),
                stdout=_truncate(obj.get("stdout", "")),
                stderr=_truncate(obj.get("stderr", "") or stderr),
                artifacts=tuple(obj.get("artifacts") or ()),
                wall_time=float(obj.get("wall_time_s", wall)),
            )
        except (ValueError, TypeError) as exc:
            return protocol_error(f"malformed result fields: {exc}")


class StubExecutor:
    """Replays canned ExecutionResults keyed by program-source digest.

    Lets the whole pipeline run with no child processes at all: CI and
    deterministic end-to-end tests pair this with a scripted model backend.
    """

    def __init__(
        self,
        canned: Mapping[str, ExecutionResult | Mapping],
        default: ExecutionResult | None = None,
    ):
        self._canned: dict[str, ExecutionResult] = {}
        for digest, result in canned.items():
            if not isinstance(result, ExecutionResult):
                result = ExecutionResult.from_json(result)
            self._canned[digest] = result
        self._default = default

    @classmethod
    def from_file(cls, path: str | Path, default: ExecutionResult | None = None) -> "StubExecutor":
        table = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(table, dict):
            raise ValueError(f"canned results file {path} must map digest -> result")
        return cls(table, default=default)

    def execute(self, req: ExecutionRequest) -> ExecutionResult:
        digest = source_digest(req.program.source)
        result = self._canned.get(digest, self._default)
        if result is None:
            raise KeyError(f"no canned execution result for source digest {digest}")
        return result
