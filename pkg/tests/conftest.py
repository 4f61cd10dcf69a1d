import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from inkfuse.corpus import CharsetTokenizer, generate_synthetic_corpus  # noqa: E402

from cli_pipeline import DESK_WORDS  # noqa: E402

_acceptance: dict[str, str] = {}


@pytest.fixture
def tokenizer():
    return CharsetTokenizer()


@pytest.fixture(scope="session")
def desk_samples():
    return list(generate_synthetic_corpus(2, DESK_WORDS, seed=7))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _acceptance[report.nodeid.split("::")[-1]] = report.outcome
    elif "test_acceptance.py" in report.nodeid and report.when == "setup" and report.outcome != "passed":
        _acceptance[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=lambda n: (len(n.split("_")[2]), n)):
        status = "PASS" if _acceptance[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")
