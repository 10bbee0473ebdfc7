import time
from contextlib import contextmanager
from types import SimpleNamespace

import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion.

    Lines are printed as they happen and repeated in the terminal summary.
    """
    results = request.config.stash[_RESULTS]

    @contextmanager
    def check(number: int, title: str):
        """Yields a record whose ``seconds`` (runtime, if measured elsewhere)
        and ``detail`` (a short summary of the measured values) are reported."""
        start = time.perf_counter()
        record = SimpleNamespace(seconds=None, detail="")
        try:
            yield record
        except BaseException as exc:
            reason = str(exc).splitlines()[0] if str(exc) else ""
            line = f"FAIL criterion {number:>2}: {title} -- {type(exc).__name__}: {reason}"
            if record.detail:
                line += f" [{record.detail}]"
            results.append(line)
            print(line)
            raise
        seconds = time.perf_counter() - start if record.seconds is None else record.seconds
        line = f"PASS criterion {number:>2}: {title} ({seconds:.1f} s)"
        if record.detail:
            line += f" [{record.detail}]"
        results.append(line)
        print(line)

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
