import re


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one pass/fail line per acceptance criterion."""
    outcomes = {}
    for status, verdict in (("passed", "PASS"), ("failed", "FAIL"),
                            ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            m = re.search(r"test_acceptance\.py.*criterion_0*(\d+)",
                          getattr(rep, "nodeid", ""))
            if m:
                outcomes[int(m.group(1))] = verdict
    if outcomes:
        terminalreporter.write_sep("-", "acceptance criteria")
        for n in sorted(outcomes):
            terminalreporter.write_line(f"criterion {n}: {outcomes[n]}")
