import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rawnet2cm.data import SynthSpec, synth_corpus  # noqa: E402

# (number, title, passed, detail), filled by the acceptance tests
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture(scope="session")
def corpus():
    """The default synthetic corpus: 200 train, 100 dev, 100 eval, one click attack."""
    return synth_corpus(SynthSpec())


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(SynthSpec(counts={"train": (12, 12), "dev": (4, 4), "eval": (6, 6)},
                                  duration=0.3, seed=5))


@pytest.fixture
def record_criterion():
    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  {detail}")
