"""Per-party accounting of decryption calls.

Code running on behalf of a protocol role wraps its work in
``acting_as("controller")`` (or a learner name); every ``ckks.decrypt`` call
is then tallied against whichever party is active in the current context.
"""

from __future__ import annotations

import contextvars
import threading
from collections import Counter
from contextlib import contextmanager

_party = contextvars.ContextVar("ckksfed_party", default="unattributed")


class DecryptAudit:
    def __init__(self):
        self._lock = threading.Lock()
        self._counts: Counter[str] = Counter()

    def record(self) -> None:
        with self._lock:
            self._counts[_party.get()] += 1

    def counts(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def count(self, party: str) -> int:
        with self._lock:
            return self._counts.get(party, 0)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()


AUDIT = DecryptAudit()


def current_party() -> str:
    return _party.get()


@contextmanager
def acting_as(party: str):
    token = _party.set(party)
    try:
        yield
    finally:
        _party.reset(token)
