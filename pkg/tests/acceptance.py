"""Timing and reporting for the acceptance criteria."""

from __future__ import annotations

import time
from contextlib import contextmanager

RESULTS: dict[int, str] = {}


@contextmanager
def criterion(number: int, title: str, limit: float):
    """Time the body, require it to finish within ``limit`` seconds and record one line."""
    start = time.perf_counter()
    outcome = "FAIL"
    note = ""
    try:
        yield
        elapsed = time.perf_counter() - start
        if elapsed >= limit:
            note = f" over the {limit:g}s limit"
            raise AssertionError(f"criterion {number} took {elapsed:.2f}s, limit {limit:g}s")
        outcome = "PASS"
    except BaseException as exc:
        if not note:
            note = f" {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    finally:
        elapsed = time.perf_counter() - start
        line = f"[{outcome}] {number:2d}. {title} ({elapsed:.2f}s, limit {limit:g}s){'' if outcome == 'PASS' else note}"
        RESULTS[number] = line
        print(line)
