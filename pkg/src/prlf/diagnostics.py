"""Process-wide diagnostic counters.

Counters record rare numeric events (probability clamping, skipped
zero-norm vectors) without interrupting a run. They exist for tests and
for post-run inspection; nothing in the main path reads them.
"""

from collections import Counter

_counters: Counter = Counter()


def bump(name: str, amount: int = 1) -> None:
    _counters[name] += amount


def count(name: str) -> int:
    return _counters[name]


def snapshot() -> dict:
    return dict(_counters)


def reset() -> None:
    _counters.clear()
