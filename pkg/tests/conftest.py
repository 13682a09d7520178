import pytest

# (criterion number, verdict, detail) lines collected by the acceptance suite
ACCEPTANCE: list[tuple[int, str, str]] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``with verdict(4, "detail") as v: assert ...``; ``v.detail`` may be
    updated inside the block, and a REPORT verdict can be set for report-only criteria.
    """

    class Verdict:
        def __init__(self, number, detail=""):
            self.number, self.detail, self.status = number, detail, None

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = self.status or ("PASS" if exc_type is None else "FAIL")
            line = f"criterion {self.number:>2}: {status}  {self.detail}"
            ACCEPTANCE.append((self.number, status, self.detail))
            with request.config.pluginmanager.getplugin("capturemanager").global_and_fixture_disabled():
                print(f"\n{line}", flush=True)
            return False

    return Verdict


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:>2}: {status:<6} {detail}")
