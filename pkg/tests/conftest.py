import re
import sys

import pytest

from alignlab import autodiff as ad


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One verdict line per acceptance criterion that ran."""
    results = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)",
                          rep.nodeid)
            if m:
                results.append((int(m.group(1)), outcome == "passed"))
    if not results:
        return
    mod = sys.modules.get("test_acceptance")
    details = getattr(mod, "RESULTS", {}) if mod else {}
    terminalreporter.write_line("")
    for n, ok in sorted(results):
        detail = details.get(n, "")
        tail = f" ({detail})" if ok and detail else ""
        terminalreporter.write_line(
            f"[ACCEPT] criterion {n}: {'PASS' if ok else 'FAIL'}{tail}")
