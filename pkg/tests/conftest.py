import numpy as np
import pytest
from hypothesis import settings

from sagcrf.features import synth_generate, synth_split
from sagcrf.sag import AUDIT

settings.register_profile("suite", deadline=None, max_examples=60)
settings.load_profile("suite")


@pytest.fixture(scope="session", autouse=True)
def line_search_audit():
    """Re-check every accepted line-search step across the whole run."""
    AUDIT.enabled = True
    AUDIT.reset()
    yield AUDIT
    AUDIT.enabled = False
    assert AUDIT.violations == [], f"line-search violations: {AUDIT.violations[:5]}"


@pytest.fixture(scope="session")
def tiny_ds():
    """20 short chains, D = 156."""
    return synth_generate(20, 3, "uniform:2:6", seed=1, templates=("bias", "w0", "suf1"))


@pytest.fixture(scope="session")
def small_ds():
    """50 chains with the full template set."""
    return synth_generate(50, 3, "uniform:2:8", seed=2)


@pytest.fixture(scope="session")
def compact_ds():
    """50 chains with D < 1000, for dense-reference comparisons."""
    return synth_generate(50, 3, "uniform:2:8", seed=1, templates=("bias", "w0", "suf2", "shape"))


@pytest.fixture(scope="session")
def bench_split():
    """The heavy-tailed 500-sequence benchmark set with a held-out split."""
    return synth_split(500, 200, 4, "heavy", 0.1, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
