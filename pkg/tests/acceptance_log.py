"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES: dict = {}


def record(n: int, ok: bool, detail: str) -> bool:
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}"
    LINES[n] = line
    print(line)
    return ok
