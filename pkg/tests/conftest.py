import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion (all of its tests must pass)."""
    outcomes, details = {}, {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            if not hasattr(rep, "when") or (rep.when != "call" and rep.outcome == "passed"):
                continue
            k = int(nodeid.split("test_criterion_")[1].split("_")[0])
            outcomes.setdefault(k, []).append(rep.outcome)
            for name, value in getattr(rep, "user_properties", []):
                if name == "criterion":
                    details.setdefault(k, []).append(value)
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(outcomes):
        o = outcomes[k]
        word = "FAIL" if "failed" in o else ("PASS" if "passed" in o and "skipped" not in o else "SKIP")
        terminalreporter.write_line(f"criterion {k}: {word}  {'; '.join(details.get(k, []))}")
