"""Collects one pass/fail line per acceptance criterion for the end-of-run summary."""

LINES: list[str] = []


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
