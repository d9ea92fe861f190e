"""Checklist registry for the acceptance suite.

Each acceptance test records one line here; the conftest hook replays
them as a summary section at the end of the run, so the checklist is
visible even though pytest captures in-test prints.
"""

LINES = []


def record(criterion: str, outcome: str, detail: str = "") -> str:
    line = f"[{outcome}] {criterion}" + (f": {detail}" if detail else "")
    LINES.append(line)
    print(line)
    return line
