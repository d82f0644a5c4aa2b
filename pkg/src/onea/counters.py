"""Thread-local call counters backing the complexity contracts.

Counters are per-thread so strategy runs dispatched on a thread pool do
not pollute each other's totals; callers snapshot before/after.
"""

import threading


class CallCounter:
    def __init__(self) -> None:
        self._local = threading.local()

    def bump(self) -> None:
        self._local.value = getattr(self._local, "value", 0) + 1

    @property
    def value(self) -> int:
        return getattr(self._local, "value", 0)


SVD_CALLS = CallCounter()
ADAPTER_FORWARDS = CallCounter()
