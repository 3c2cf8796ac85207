import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).parent
FIXTURES = TESTS_DIR / "fixtures"

sys.path.insert(0, str(TESTS_DIR))  # makes `oracles` importable


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def appendix_dataset():
    from reams.dataset import load_dataset

    return load_dataset(FIXTURES / "appendix13.jsonl")


@pytest.fixture
def appendix_backend():
    from reams.modelclient import BackendConfig

    return BackendConfig(kind="scripted", script_path=FIXTURES / "appendix13_transcript.json")


@pytest.fixture
def appendix_executor():
    from reams.sandbox import StubExecutor

    return StubExecutor.from_file(FIXTURES / "appendix13_exec.json")


@pytest.fixture
def three_dataset():
    from reams.dataset import load_dataset

    return load_dataset(FIXTURES / "three_problem.jsonl")


@pytest.fixture
def three_backend():
    from reams.modelclient import BackendConfig

    return BackendConfig(kind="scripted", script_path=FIXTURES / "three_problem_transcript.json")


@pytest.fixture
def three_executor():
    from reams.sandbox import StubExecutor

    return StubExecutor.from_file(FIXTURES / "three_problem_exec.json")
