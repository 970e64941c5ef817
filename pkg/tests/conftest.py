import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_criterion_" not in rep.nodeid:
                continue
            number = int(rep.nodeid.split("test_criterion_")[1][:2])
            detail = dict(rep.user_properties).get("acceptance", "")
            if outcome == "failed" and not detail:
                detail = str(rep.longrepr).strip().splitlines()[-1]
            lines.append((number, f"criterion {number:2d}: {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
