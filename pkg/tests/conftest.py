import os
from pathlib import Path

import pytest

REPORT: dict[int, str] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    REPORT[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for k in sorted(REPORT):
            terminalreporter.write_line(REPORT[k])


@pytest.fixture(scope="session")
def trained():
    """Cache directory holding base/stage1/stage2 checkpoints and summary.json."""
    import pipeline

    root = Path(os.environ.get("ALIT_CACHE", pipeline.DEFAULT_CACHE))
    return pipeline.build(root)
