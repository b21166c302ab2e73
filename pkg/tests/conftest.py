import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from verdicts import RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for e in sorted(RESULTS, key=lambda e: e["n"]):
        verdict = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {e['n']}: {verdict}  {e['title']}  [{e['detail']}]")
