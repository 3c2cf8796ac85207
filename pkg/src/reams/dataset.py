"""Problem catalog: loading, validation, serialization, and seeded sampling.

Problems come from two kinds of sources — university course codes and MATH
topic names — forming a closed label set; anything else is rejected at load
time so downstream grouping stays well defined.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

from . import expr

__all__ = [
    "ANSWER_KINDS",
    "COURSE_LABELS",
    "MATH_TOPIC_LABELS",
    "SOURCE_LABELS",
    "AnswerSpec",
    "Dataset",
    "DatasetError",
    "Problem",
    "load_dataset",
    "sample_split",
    "save_dataset",
]

COURSE_LABELS = ("18.01", "18.02", "18.03", "18.05", "18.06", "6.042", "COMS3251")
MATH_TOPIC_LABELS = (
    "Prealgebra",
    "Algebra",
    "Number Theory",
    "Counting and Probability",
    "Intermediate Algebra",
    "Precalculus",
)
SOURCE_LABELS = COURSE_LABELS + MATH_TOPIC_LABELS

ANSWER_KINDS = ("integer", "real", "expression", "tuple", "text", "plot")


class DatasetError(ValueError):
    """Raised for malformed, duplicate, or otherwise invalid problem records."""


@dataclass(frozen=True)
class AnswerSpec:
    """Expected-answer description: a kind plus its canonical string rendering."""

    kind: str
    value: str
    tolerance_override: tuple[float, float] | None = None
    variables: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ANSWER_KINDS:
            raise DatasetError(f"unknown answer kind {self.kind!r}")
        if self.kind == "integer":
            try:
                int(self.value.strip())
            except ValueError:
                raise DatasetError(f"integer answer {self.value!r} does not parse") from None
        elif self.kind == "real":
            try:
                parsed = float(self.value.strip())
            except ValueError:
                raise DatasetError(f"real answer {self.value!r} does not parse") from None
            if parsed != parsed or parsed in (float("inf"), float("-inf")):
                raise DatasetError(f"real answer {self.value!r} is not finite")
        elif self.kind == "expression":
            try:
                expr.parse_expression(self.value, self.variables)
            except expr.ExprError as exc:
                raise DatasetError(f"expression answer {self.value!r} does not parse: {exc}") from None
        elif self.kind == "plot":
            if self.value:
                raise DatasetError("plot answers carry no value; correctness is artifact existence")
        if self.tolerance_override is not None:
            rel, absolute = self.tolerance_override
            if rel < 0 or absolute < 0:
                raise DatasetError("tolerance components must be >= 0")


@dataclass(frozen=True)
class Problem:
    """One question with its expected answer and source label."""

    id: str
    source: str
    question_text: str
    answer: AnswerSpec
    requires_plot: bool = False
    proof_based: bool = False

    def __post_init__(self) -> None:
        if not self.id:
            raise DatasetError("problem id must be nonempty")
        if self.source not in SOURCE_LABELS:
            raise DatasetError(f"unknown source label {self.source!r} for problem {self.id!r}")
        if not self.question_text:
            raise DatasetError(f"problem {self.id!r} has empty question text")


@dataclass(frozen=True)
class Provenance:
    path: str
    loaded_at: str


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable problem collection with unique ids."""

    problems: tuple[Problem, ...]
    provenance: Provenance | None = None
    _index: dict[str, Problem] = field(init=False, repr=False, compare=False, hash=False, default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        index: dict[str, Problem] = {}
        for p in self.problems:
            if p.id in index:
                raise DatasetError(f"duplicate problem id {p.id!r}")
            index[p.id] = p
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.problems)

    def __iter__(self) -> Iterator[Problem]:
        return iter(self.problems)

    def __getitem__(self, problem_id: str) -> Problem:
        return self._index[problem_id]

    def by_source(self) -> dict[str, list[Problem]]:
        groups: dict[str, list[Problem]] = {}
        for p in self.problems:
            groups.setdefault(p.source, []).append(p)
        return groups


def _answer_from_json(obj: dict, where: str) -> AnswerSpec:
    if not isinstance(obj, dict):
        raise DatasetError(f"{where}: 'answer' must be an object")
    kind = obj.get("kind")
    if kind is None:
        raise DatasetError(f"{where}: answer missing 'kind'")
    tolerance = obj.get("tolerance")
    if tolerance is not None:
        if not (isinstance(tolerance, (list, tuple)) and len(tolerance) == 2):
            raise DatasetError(f"{where}: 'tolerance' must be a [relative, absolute] pair")
        tolerance = (float(tolerance[0]), float(tolerance[1]))
    variables = tuple(obj.get("variables") or ())
    return AnswerSpec(
        kind=str(kind),
        value=str(obj.get("value", "")),
        tolerance_override=tolerance,
        variables=variables,
    )


def _problem_from_json(obj: dict, where: str) -> Problem:
    for key in ("id", "source", "question", "answer"):
        if key not in obj:
            raise DatasetError(f"{where}: missing field {key!r}")
    try:
        return Problem(
            id=str(obj["id"]),
            source=str(obj["source"]),
            question_text=str(obj["question"]),
            answer=_answer_from_json(obj["answer"], where),
            requires_plot=bool(obj.get("requires_plot", False)),
            proof_based=bool(obj.get("proof_based", False)),
        )
    except DatasetError as exc:
        raise DatasetError(f"{where}: {exc}") from None


def problem_to_json(p: Problem) -> dict:
    answer: dict = {"kind": p.answer.kind, "value": p.answer.value}
    if p.answer.tolerance_override is not None:
        answer["tolerance"] = list(p.answer.tolerance_override)
    if p.answer.variables:
        answer["variables"] = list(p.answer.variables)
    return {
        "id": p.id,
        "source": p.source,
        "question": p.question_text,
        "answer": answer,
        "requires_plot": p.requires_plot,
        "proof_based": p.proof_based,
    }


_CSV_COLUMNS = ["id", "source", "question", "answer_kind", "answer_value", "requires_plot", "proof_based"]


def _load_jsonl(path: Path) -> list[Problem]:
    problems = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"{where}: expected a JSON object")
            problems.append(_problem_from_json(obj, where))
    return problems


def _load_csv(path: Path) -> list[Problem]:
    problems = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):  # header is line 1
            where = f"{path.name}:{lineno}"
            missing = [c for c in _CSV_COLUMNS if row.get(c) in (None, "")]
            # empty answer_value is legitimate for plot answers
            missing = [c for c in missing if c != "answer_value"]
            if missing:
                raise DatasetError(f"{where}: missing field(s) {', '.join(missing)}")
            obj = {
                "id": row["id"],
                "source": row["source"],
                "question": row["question"],
                "answer": {"kind": row["answer_kind"], "value": row["answer_value"] or ""},
                "requires_plot": row["requires_plot"].strip().lower() == "true",
                "proof_based": row["proof_based"].strip().lower() == "true",
            }
            problems.append(_problem_from_json(obj, where))
    return problems


def load_dataset(path: str | Path, format: str | None = None) -> Dataset:
    """Load and validate a problem file; JSONL is canonical, CSV is ingest-only."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file {path} does not exist")
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if format == "jsonl":
        problems = _load_jsonl(path)
    elif format == "csv":
        problems = _load_csv(path)
    else:
        raise DatasetError(f"unknown dataset format {format!r}")
    if not problems:
        raise DatasetError(f"{path}: no problems")
    provenance = Provenance(path=str(path), loaded_at=datetime.now(timezone.utc).isoformat())
    return Dataset(problems=tuple(problems), provenance=provenance)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Serialize to the canonical JSONL interchange form, one problem per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for p in ds.problems:
            fh.write(json.dumps(problem_to_json(p), ensure_ascii=False) + "\n")


def sample_split(ds: Dataset, per_course: int, per_topic: int, seed: int) -> Dataset:
    """Select a fixed-size per-group sample with a seeded deterministic shuffle.

    Draws without replacement; selected problems keep their original dataset
    order. The same (dataset, counts, seed) always yields the same ids.
    """
    if per_course < 0 or per_topic < 0:
        raise ValueError("requested counts must be >= 0")
    groups = ds.by_source()
    selected_ids: set[str] = set()
    for label in SOURCE_LABELS:
        want = per_course if label in COURSE_LABELS else per_topic
        if want == 0:
            continue
        pool = groups.get(label, [])
        if len(pool) < want:
            raise DatasetError(
                f"source group {label!r} has {len(pool)} problems, {want} requested"
            )
        # str seeds hash deterministically in random.Random (version-2 seeding)
        rng = random.Random(f"{seed}:{label}")
        shuffled = list(pool)
        rng.shuffle(shuffled)
        selected_ids.update(p.id for p in shuffled[:want])
    picked = tuple(p for p in ds.problems if p.id in selected_ids)
    return Dataset(problems=picked, provenance=ds.provenance)
