"""Shared pytest configuration: markers and the acceptance summary lines."""

import pytest

_CRITERIA = {
    "TestCriterion1SizeReproduction": "1 size reproduction (classic null, n=10000)",
    "TestCriterion2ExogeneityPower": "2 exogeneity power (rho = 0.9 and monotonicity)",
    "TestCriterion3DistributionalPower": "3 distributional power (lognormal, t(80))",
    "TestCriterion4IvSize": "4 instrumented-model size (n=8000)",
    "TestCriterion5MseReproduction": "5 MSE reproduction (n=5000, rho=0.1)",
    "TestCriterion6EmpiricalApplication": "6 empirical application (needs extract)",
    "TestCriterion7PropertySuites": "7 property suites (data-free)",
}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running simulation test")
    config.addinivalue_line("markers", "acceptance: acceptance-criterion test")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    buckets = {}
    for outcome in ("passed", "failed", "skipped"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            for cls, label in _CRITERIA.items():
                if f"::{cls}::" in nodeid:
                    buckets.setdefault(label, []).append(outcome)
    if not buckets:
        return
    terminalreporter.section("acceptance criteria")
    for label in _CRITERIA.values():
        if label not in buckets:
            continue
        outcomes = buckets[label]
        if any(o == "failed" for o in outcomes):
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {label}: {status}")
