"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
LINES: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[acceptance {number:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    LINES.append(line)
    print(line)
    return ok
