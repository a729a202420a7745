"""Collects per-criterion verdicts from the acceptance suite and prints them at the end."""

CRITERIA = {}
N_CRITERIA = 7


def record(n: int, ok: bool, detail: str):
    CRITERIA[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid
              for reps in terminalreporter.stats.values() for r in reps if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = CRITERIA.get(n, (False, "not run or errored before a verdict"))
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
