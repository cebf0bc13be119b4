"""Exact counters of model evaluations: the ground truth for speedup claims."""

import threading


class EvalMeter:
    """Thread-safe forward/backward pass counter.

    One tick means one per-sentence model evaluation; batched calls tick
    once per sentence in the batch.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.forward = 0
        self.backward = 0

    def tick_forward(self, n=1):
        with self._lock:
            self.forward += n

    def tick_backward(self, n=1):
        with self._lock:
            self.backward += n

    def snapshot(self):
        with self._lock:
            return (self.forward, self.backward)

    def delta_since(self, snap):
        f, b = self.snapshot()
        return (f - snap[0], b - snap[1])

    def __repr__(self):
        return f"EvalMeter(forward={self.forward}, backward={self.backward})"
