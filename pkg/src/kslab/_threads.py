"""Worker-count control. KSLAB_THREADS caps kernel parallelism everywhere."""

from __future__ import annotations

import os


def thread_count() -> int:
    """Number of workers for FFT/BLAS-heavy kernels (>= 1)."""
    raw = os.environ.get("KSLAB_THREADS", "")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)
