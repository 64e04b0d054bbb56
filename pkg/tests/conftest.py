import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from persona_agent.embedding import HashedTfIdfEncoder
from persona_agent.tools import OfflineKnowledge


@pytest.fixture
def encoder():
    return HashedTfIdfEncoder(dim=64, seed=0)


@pytest.fixture
def knowledge():
    return OfflineKnowledge({"Albert Einstein": "German-born theoretical physicist.", "Film": "A film is a motion picture."})


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
