"""Two-stage program-synthesis harness for math problem sets.

Stage 1 asks a code model for a program per problem and grades its executed
output; stage 2 retries the failures with model-generated mathematical
reasoning folded into the prompt. Results are journaled, resumable, and
summarized with exact binomial confidence intervals.
"""

from .dataset import AnswerSpec, Dataset, Problem, load_dataset, sample_split
from .grader import TolerancePolicy, Verdict, expr_equiv, grade
from .modelclient import BackendConfig, ModelRequest, ModelResponse, complete, request_digest
from .pipeline import (
    AttemptRecord,
    RunConfig,
    RunState,
    RunStore,
    resume_run,
    run_reasoning_stage,
    run_zero_shot,
)
from .promptkit import (
    CandidateProgram,
    build_code_with_reasoning_prompt,
    build_reasoning_prompt,
    build_zero_shot_prompt,
    extract_program,
)
from .sandbox import ExecutionRequest, ExecutionResult, SandboxExecutor, StubExecutor
from .stats import SuccessSummary, accuracy, beta_inv, clopper_pearson, summarize

__version__ = "0.1.0"

__all__ = [
    "AnswerSpec",
    "AttemptRecord",
    "BackendConfig",
    "CandidateProgram",
    "Dataset",
    "ExecutionRequest",
    "ExecutionResult",
    "ModelRequest",
    "ModelResponse",
    "Problem",
    "RunConfig",
    "RunState",
    "RunStore",
    "SandboxExecutor",
    "StubExecutor",
    "SuccessSummary",
    "TolerancePolicy",
    "Verdict",
    "accuracy",
    "beta_inv",
    "build_code_with_reasoning_prompt",
    "build_reasoning_prompt",
    "build_zero_shot_prompt",
    "clopper_pearson",
    "complete",
    "expr_equiv",
    "extract_program",
    "grade",
    "load_dataset",
    "request_digest",
    "resume_run",
    "run_reasoning_stage",
    "run_zero_shot",
    "sample_split",
    "summarize",
]
