"""Kernel-tensor byte accounting for the benchmark harness.

Every kernel tensor that enters a convolution during a forward pass is
reported here: a persistent weight counts at its own size, a modulated or
fused kernel at its size, and a batch-expanded weight at the full size of
the expanded tensor. ``peak`` is the largest single kernel tensor seen
since the last reset, which makes the reported number exact and
independent of allocator behavior:

  standard conv            -> c_out*c_in*k*k*8
  shared child (any path)  -> c_out*c_in*k*k*8 (batch-invariant)
  kernel pool              -> batch*c_out*c_in*k*k*8
  batch-expanded dynamic   -> batch*n*c_out*c_in*k*k*8

Disabled by default so the hot path costs one attribute check.
"""

from __future__ import annotations

from contextlib import contextmanager


class KernelBytesTracker:
    def __init__(self):
        self.active = False
        self.peak = 0
        self.events = 0

    def reset(self):
        self.peak = 0
        self.events = 0

    def note(self, nbytes: int):
        self.events += 1
        if nbytes > self.peak:
            self.peak = nbytes


tracker = KernelBytesTracker()


def note_kernel(nbytes: int):
    if tracker.active:
        tracker.note(nbytes)


@contextmanager
def measuring():
    """Enable tracking inside the block; tracker.peak holds the result."""
    tracker.reset()
    tracker.active = True
    try:
        yield tracker
    finally:
        tracker.active = False
