"""Answer grading: three-valued verdicts over executed candidate output.

Automated comparison cannot always be decisive, so verdicts are
correct / incorrect / needs_review; the needs_review residue is either
adjudicated interactively or counted as incorrect under the strict policy.
"""

from __future__ import annotations

import random
import re
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import TYPE_CHECKING, Callable, Iterable, TextIO

from . import expr
from .dataset import AnswerSpec

if TYPE_CHECKING:  # pragma: no cover
    from .pipeline import AttemptRecord, RunStore
    from .sandbox import ExecutionResult

__all__ = [
    "NonInteractiveError",
    "SamplingExhausted",
    "TolerancePolicy",
    "Verdict",
    "adjudicate",
    "expr_equiv",
    "grade",
]

VERDICT_VALUES = ("correct", "incorrect", "needs_review")
VERDICT_METHODS = ("exact", "numeric", "expression_sampling", "artifact", "human")

DEFAULT_N_SAMPLES = 64
_SAMPLE_DOMAIN = (-3.0, 3.0)
_MAX_RESAMPLES = 10


class SamplingExhausted(RuntimeError):
    """Too few finite sample points: the pair cannot be compared by sampling."""


class NonInteractiveError(RuntimeError):
    """Adjudication was requested without a terminal to ask on."""


@dataclass(frozen=True)
class TolerancePolicy:
    """Numeric comparison tolerance: |a - b| <= absolute + relative * |b|."""

    relative: float = 1e-4
    absolute: float = 1e-6

    def __post_init__(self) -> None:
        if self.relative < 0 or self.absolute < 0:
            raise ValueError("tolerance components must be >= 0")
        if self.relative == 0 and self.absolute == 0:
            raise ValueError("at least one tolerance component must be positive")

    def matches(self, a: float, b: float) -> bool:
        return abs(a - b) <= self.absolute + self.relative * abs(b)


@dataclass(frozen=True)
class Verdict:
    value: str
    method: str
    detail: str = ""

    def __post_init__(self) -> None:
        if self.value not in VERDICT_VALUES:
            raise ValueError(f"unknown verdict value {self.value!r}")
        if self.method not in VERDICT_METHODS:
            raise ValueError(f"unknown verdict method {self.method!r}")


def _parse_int(text: str) -> int | None:
    text = text.strip().replace(",", "")
    try:
        return int(text)
    except ValueError:
        pass
    # coerce integral floats like "72.0"
    try:
        value = float(text)
    except ValueError:
        return None
    return int(value) if value.is_integer() else None


def _parse_float(text: str) -> float | None:
    try:
        value = float(text.strip().replace(",", ""))
    except ValueError:
        return None
    return value if value == value and abs(value) != float("inf") else None


def _normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def _split_tuple(text: str) -> list[str]:
    # brackets are stripped per element so nested (matrix-style) renderings
    # flatten row-major: "[[1, 2], [3, 4]]" -> ["1", "2", "3", "4"]
    parts = []
    for piece in re.split(r"[,;\s]+", text.strip()):
        cleaned = piece.strip("[](){}")
        if cleaned:
            parts.append(cleaned)
    return parts


def expr_equiv(
    a: expr.Expr,
    b: expr.Expr,
    n_samples: int = DEFAULT_N_SAMPLES,
    tol: TolerancePolicy | None = None,
    seed: int = 0,
) -> bool:
    """Probabilistic expression equivalence by shared-point evaluation.

    Samples the union of both variable sets uniformly from [-3, 3]; points
    where either side is non-finite are redrawn (at most 10 tries per point).
    Deterministic for a given seed; symmetric because both sides see the
    same draws.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    tol = tol or TolerancePolicy()
    names = sorted(expr.free_variables(a) | expr.free_variables(b))
    rng = random.Random(seed)
    for _ in range(n_samples):
        for _attempt in range(_MAX_RESAMPLES):
            env = {name: rng.uniform(*_SAMPLE_DOMAIN) for name in names}
            va = expr.evaluate(a, env)
            vb = expr.evaluate(b, env)
            if _finite(va) and _finite(vb):
                break
        else:
            raise SamplingExhausted(
                f"no finite sample point found after {_MAX_RESAMPLES} redraws"
            )
        if not tol.matches(va, vb):
            return False
    return True


def _finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")


def grade(
    answer_text: str | None,
    result: "ExecutionResult",
    spec: AnswerSpec,
    tol: TolerancePolicy | None = None,
) -> Verdict:
    """Compare a candidate answer against the expected AnswerSpec.

    Kind mismatches that cannot be coerced yield needs_review, never a hard
    error; definite mismatches yield incorrect.
    """
    tol = tol or TolerancePolicy()
    if spec.kind == "plot":
        if result.artifacts:
            return Verdict("correct", "artifact", f"{len(result.artifacts)} artifact(s)")
        return Verdict("incorrect", "artifact", "no plot artifact produced")

    if result.status != "ok":
        return Verdict("incorrect", "exact", f"execution {result.status}")
    if answer_text is None or not answer_text.strip():
        return Verdict("incorrect", "exact", "no answer produced")

    if spec.kind == "integer":
        expected = int(spec.value.strip())
        got = _parse_int(answer_text)
        if got is None:
            return Verdict("needs_review", "exact", f"candidate {answer_text!r} is not an integer")
        if got == expected:
            return Verdict("correct", "exact", "")
        return Verdict("incorrect", "exact", f"{got} != {expected}")

    if spec.kind == "real":
        effective = tol
        if spec.tolerance_override is not None:
            effective = TolerancePolicy(*spec.tolerance_override)
        expected = float(spec.value)
        got = _parse_float(answer_text)
        if got is None:
            return Verdict("needs_review", "numeric", f"candidate {answer_text!r} is not numeric")
        if effective.matches(got, expected):
            return Verdict("correct", "numeric", "")
        return Verdict("incorrect", "numeric", f"{got} differs from {expected}")

    if spec.kind == "text":
        if _normalize_text(answer_text) == _normalize_text(spec.value):
            return Verdict("correct", "exact", "")
        return Verdict("incorrect", "exact", "text mismatch")

    if spec.kind == "tuple":
        expected_parts = _split_tuple(spec.value)
        got_parts = _split_tuple(answer_text)
        if len(got_parts) != len(expected_parts):
            return Verdict(
                "incorrect", "numeric",
                f"{len(got_parts)} element(s), expected {len(expected_parts)}",
            )
        for i, (g, e) in enumerate(zip(got_parts, expected_parts)):
            ge, ee = _parse_float(g), _parse_float(e)
            if ge is not None and ee is not None:
                if not tol.matches(ge, ee):
                    return Verdict("incorrect", "numeric", f"element {i}: {g} != {e}")
            elif _normalize_text(g) != _normalize_text(e):
                return Verdict("incorrect", "numeric", f"element {i}: {g!r} != {e!r}")
        return Verdict("correct", "numeric", "")

    # expression
    expected_tree = expr.parse_expression(spec.value, spec.variables)
    try:
        got_tree = expr.parse_expression(answer_text, spec.variables)
    except expr.ExprError as exc:
        return Verdict("needs_review", "expression_sampling", f"candidate does not parse: {exc}")
    try:
        equivalent = expr_equiv(got_tree, expected_tree, tol=tol)
    except SamplingExhausted as exc:
        return Verdict("needs_review", "expression_sampling", str(exc))
    if equivalent:
        return Verdict("correct", "expression_sampling", "")
    return Verdict("incorrect", "expression_sampling", "differs at sampled points")


def adjudicate(
    queue: Iterable[tuple["AttemptRecord", AnswerSpec]],
    store: "RunStore | None" = None,
    operator: str = "operator",
    questions: dict[str, str] | None = None,
    input_stream: TextIO | None = None,
    output_stream: TextIO | None = None,
    now: Callable[[], str] | None = None,
) -> list[Verdict]:
    """Walk the needs_review queue interactively and record human verdicts.

    For each item the question (when a problem-id -> text mapping is given),
    expected answer, and candidate output are shown; the operator answers
    ``correct``, ``incorrect``, or ``skip`` (skipped items stay
    needs_review). When ``store`` is given, each decided verdict is appended
    to the run journal with operator id and timestamp.
    """
    if input_stream is None:
        if not sys.stdin.isatty():
            raise NonInteractiveError(
                "adjudication needs an interactive terminal; "
                "re-run the evaluation with the strict grading policy instead"
            )
        input_stream = sys.stdin
    out = output_stream or sys.stdout
    now = now or (lambda: datetime.now(timezone.utc).isoformat())

    verdicts: list[Verdict] = []
    for record, spec in queue:
        out.write(f"\n--- review {record.problem_id} [{record.stage}] ---\n")
        question = (questions or {}).get(record.problem_id)
        if question:
            out.write(f"question: {question}\n")
        out.write(f"expected ({spec.kind}): {spec.value or '<plot artifact>'}\n")
        answer = record.execution.answer_text if record.execution else None
        out.write(f"candidate answer: {answer!r}\n")
        out.write("verdict [correct/incorrect/skip]: ")
        out.flush()
        line = input_stream.readline()
        choice = line.strip().lower() if line else "skip"
        if choice in ("correct", "c"):
            verdict = Verdict("correct", "human", f"adjudicated by {operator}")
        elif choice in ("incorrect", "i"):
            verdict = Verdict("incorrect", "human", f"adjudicated by {operator}")
        else:
            out.write("skipped\n")
            verdicts.append(Verdict("needs_review", record.verdict.method, "skipped at review"))
            continue
        verdicts.append(verdict)
        if store is not None:
            store.append_adjudication(
                problem_id=record.problem_id,
                stage=record.stage,
                value=verdict.value,
                operator=operator,
                timestamp=now(),
            )
    return verdicts
