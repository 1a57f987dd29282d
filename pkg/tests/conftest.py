import os
import sys
from contextlib import contextmanager

import pytest

sys.path.insert(0, os.path.dirname(__file__))

ACCEPTANCE = {}


class _Line:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; failures still raise."""

    @contextmanager
    def criterion(number: int, title: str):
        line = _Line()
        try:
            yield line
        except BaseException:
            ACCEPTANCE[number] = f"FAIL [{number:2d}] {title}  {line.detail}".rstrip()
            print(ACCEPTANCE[number])
            raise
        ACCEPTANCE[number] = f"PASS [{number:2d}] {title}  {line.detail}".rstrip()
        print(ACCEPTANCE[number])

    return criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
