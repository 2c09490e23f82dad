def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one PASS/FAIL line per acceptance criterion after the run."""
    lines = []
    for status, marker in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" in nodeid and getattr(report, "when", "call") == "call":
                name = nodeid.split("::")[-1]
                lines.append((name, marker))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, marker in sorted(lines):
            terminalreporter.write_line(f"[ACCEPTANCE] {name}: {marker}")
