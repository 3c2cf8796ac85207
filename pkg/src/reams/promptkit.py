"""Prompt construction for the two generation stages, plus output parsing.

Three template shapes: zero-shot code generation, step-by-step reasoning
(no code), and code generation conditioned on that reasoning. Templates are
plain text files with {question}, {imports}, {reasoning} placeholders;
shipped defaults live in the package's prompts/ directory and can be
overridden by a directory of same-named files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .dataset import Problem
from .modelclient import (
    DEFAULT_CODE_TEMPERATURE,
    DEFAULT_MAX_TOKENS,
    DEFAULT_REASONING_TEMPERATURE,
    ModelRequest,
)

__all__ = [
    "CandidateProgram",
    "ExtractionError",
    "PromptTemplate",
    "TemplateError",
    "TemplateSet",
    "build_code_with_reasoning_prompt",
    "build_reasoning_prompt",
    "build_zero_shot_prompt",
    "extract_program",
]

DEFAULT_CODE_MODEL = "codellama-13b"
DEFAULT_REASONING_MODEL = "llama-3.1-8b"

TEMPLATE_NAMES = ("zero_shot_code", "reasoning", "code_with_reasoning")
_PLACEHOLDERS = {"question", "imports", "reasoning"}
_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z_0-9]*)\}")

_SYMBOLIC_IMPORT_HINT = "You may use the sympy library; import anything else you need."
_PLOT_IMPORT_HINT = (
    "You may use the sympy library, and use matplotlib for the figure; "
    "save the figure to an image file in the current working directory. "
    "Import anything else you need."
)


class TemplateError(ValueError):
    """Template references an unknown placeholder or a substitution is missing."""


class ExtractionError(ValueError):
    """Model output was empty, so no candidate program can be extracted."""


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def __post_init__(self) -> None:
        if self.name not in TEMPLATE_NAMES:
            raise TemplateError(f"unknown template name {self.name!r}")
        unknown = {m for m in _PLACEHOLDER_RE.findall(self.body)} - _PLACEHOLDERS
        if unknown:
            raise TemplateError(
                f"template {self.name!r} uses unknown placeholder(s): {', '.join(sorted(unknown))}"
            )

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body))

    def render(self, substitutions: dict[str, str]) -> str:
        """Single-pass literal substitution (values are never re-scanned, so
        braces inside question text survive verbatim)."""
        missing = self.placeholders - set(substitutions)
        if missing:
            raise TemplateError(
                f"template {self.name!r} is missing substitution(s): {', '.join(sorted(missing))}"
            )

        def replace(match: re.Match[str]) -> str:
            return substitutions[match.group(1)]

        return _PLACEHOLDER_RE.sub(replace, self.body)


def _load_default(name: str) -> str:
    return resources.files("reams").joinpath(f"prompts/{name}.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class TemplateSet:
    zero_shot_code: PromptTemplate
    reasoning: PromptTemplate
    code_with_reasoning: PromptTemplate

    @classmethod
    def default(cls) -> "TemplateSet":
        return cls(
            zero_shot_code=PromptTemplate("zero_shot_code", _load_default("zero_shot_code")),
            reasoning=PromptTemplate("reasoning", _load_default("reasoning")),
            code_with_reasoning=PromptTemplate(
                "code_with_reasoning", _load_default("code_with_reasoning")
            ),
        )

    @classmethod
    def from_dir(cls, directory: str | Path) -> "TemplateSet":
        directory = Path(directory)
        kwargs = {}
        for name in TEMPLATE_NAMES:
            path = directory / f"{name}.txt"
            if not path.is_file():
                raise TemplateError(f"template file {path} not found")
            kwargs[name] = PromptTemplate(name, path.read_text(encoding="utf-8"))
        return cls(**kwargs)


_DEFAULT_TEMPLATES: TemplateSet | None = None


def _templates(templates: TemplateSet | None) -> TemplateSet:
    global _DEFAULT_TEMPLATES
    if templates is not None:
        return templates
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = TemplateSet.default()
    return _DEFAULT_TEMPLATES


def _import_hint(p: Problem) -> str:
    return _PLOT_IMPORT_HINT if p.requires_plot else _SYMBOLIC_IMPORT_HINT


def build_zero_shot_prompt(
    p: Problem,
    *,
    model_id: str = DEFAULT_CODE_MODEL,
    templates: TemplateSet | None = None,
) -> ModelRequest:
    """Problem statement only, no examples: asks for a complete program that
    prints the final answer on its last output line."""
    body = _templates(templates).zero_shot_code.render(
        {"question": p.question_text, "imports": _import_hint(p)}
    )
    return ModelRequest(
        model_id=model_id,
        messages=(("user", body),),
        temperature=DEFAULT_CODE_TEMPERATURE,
        max_tokens=DEFAULT_MAX_TOKENS,
    )


def build_reasoning_prompt(
    p: Problem,
    *,
    model_id: str = DEFAULT_REASONING_MODEL,
    templates: TemplateSet | None = None,
) -> ModelRequest:
    """Asks for step-by-step mathematical reasoning, explicitly without code."""
    body = _templates(templates).reasoning.render({"question": p.question_text})
    return ModelRequest(
        model_id=model_id,
        messages=(("user", body),),
        temperature=DEFAULT_REASONING_TEMPERATURE,
        max_tokens=DEFAULT_MAX_TOKENS,
    )


def build_code_with_reasoning_prompt(
    p: Problem,
    reasoning: str,
    *,
    model_id: str = DEFAULT_CODE_MODEL,
    templates: TemplateSet | None = None,
) -> ModelRequest:
    """Question plus the generated reasoning, with the same program-output
    instructions as the zero-shot shape."""
    if not reasoning or not reasoning.strip():
        raise ValueError("reasoning text must be nonempty")
    body = _templates(templates).code_with_reasoning.render(
        {"question": p.question_text, "imports": _import_hint(p), "reasoning": reasoning}
    )
    return ModelRequest(
        model_id=model_id,
        messages=(("user", body),),
        temperature=DEFAULT_CODE_TEMPERATURE,
        max_tokens=DEFAULT_MAX_TOKENS,
    )


@dataclass(frozen=True)
class CandidateProgram:
    source: str
    origin_stage: str  # zero_shot | reasoning_<k>
    extraction_note: str  # fenced_block | whole_text

    def __post_init__(self) -> None:
        if not self.source:
            raise ValueError("candidate program source must be nonempty")


_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


def _strip_blank_edges(text: str) -> str:
    lines = text.split("\n")
    while lines and not lines[0].strip():
        lines.pop(0)
    while lines and not lines[-1].strip():
        lines.pop()
    return "\n".join(lines)


def extract_program(model_text: str, origin: str) -> CandidateProgram:
    """Pull the executable source out of model output.

    All fenced code blocks, concatenated in order, win over prose (models
    often split imports from logic across fences); with no fences the whole
    text is taken as-is. Fence language tags are ignored.
    """
    if not model_text or not model_text.strip():
        raise ExtractionError("model output is empty")
    blocks = _FENCE_RE.findall(model_text)
    if blocks:
        source = _strip_blank_edges("\n".join(_strip_blank_edges(b) for b in blocks))
        if source:
            return CandidateProgram(source=source, origin_stage=origin, extraction_note="fenced_block")
    return CandidateProgram(
        source=_strip_blank_edges(model_text), origin_stage=origin, extraction_note="whole_text"
    )
