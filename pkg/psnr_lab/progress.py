import threading
from typing import Callable, Optional

ProgressCallback = Callable[[float, str], None]


class ProgressReporter:
    """
    Callback-based progress reporter for long-running jobs (training, sweeps).

    Jobs either report absolute positions with `update` or, when units of work
    finish on several threads, call `start` once and `advance` per finished
    unit; the reporter counts completions itself so the reported fraction never
    goes backwards. Without a callback updates are dropped.
    """

    def __init__(self, callback: Optional[ProgressCallback] = None):
        self._callback = callback
        self._lock = threading.Lock()
        self._done = 0
        self._total = 0

    def set_callback(self, callback: ProgressCallback):
        """Set the callback for progress updates."""
        self._callback = callback

    def update(self, current: int, total: int, message: str = ""):
        """Report progress as `current` out of `total` steps."""
        if self._callback:
            self._callback(current / total if total > 0 else 0.0, message)

    def start(self, total: int):
        """Reset the completion counter for a job of `total` units."""
        with self._lock:
            self._done = 0
            self._total = total

    def advance(self, message: str = ""):
        """Mark one unit finished; safe to call from worker threads."""
        with self._lock:
            self._done += 1
            if self._callback:
                self._callback(self._done / self._total if self._total > 0 else 0.0, message)
