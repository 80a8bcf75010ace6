"""Shared store for acceptance outcomes, printed by the terminal-summary hook."""

RESULTS: dict[int, tuple[bool, str]] = {}


def line(n: int, ok: bool, detail: str) -> str:
    return f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
