import contextlib

import pytest

# criterion number -> {"title": str, "parts": [(ok, detail)]}
_CRITERIA = {}


class _Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture(scope="session")
def criterion():
    """Context manager recording (part of) one acceptance criterion as PASS or FAIL."""

    @contextlib.contextmanager
    def record(number, title, part=None):
        entry = _CRITERIA.setdefault(number, {"title": title, "parts": []})
        outcome = _Outcome()
        prefix = f"{part}: " if part else ""
        try:
            yield outcome
        except BaseException as exc:
            message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            entry["parts"].append((False, prefix + (outcome.detail or message)))
            raise
        entry["parts"].append((True, prefix + outcome.detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if all(ok for ok, _ in entry["parts"]) else "FAIL"
        details = "; ".join(d for _, d in entry["parts"] if d)
        terminalreporter.write_line(f"{status} criterion {number:>2}: {entry['title']}"
                                    + (f" [{details}]" if details else ""))
