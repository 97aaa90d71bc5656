def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return
    criterion = name.removeprefix("test_criterion_").replace("_", " ")
    verdict = "PASSED" if report.passed else "FAILED"
    print(f"\n[ACCEPTANCE] {criterion}: {verdict}", flush=True)
