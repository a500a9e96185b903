"""Process tuning for the numeric hot loops.

The layer GEMMs here are skinny (k <= 576, n <= 32); OpenBLAS thread handoff
costs more than it saves on them, and glibc's mmap threshold makes the
multi-MB tape buffers page-fault on every training step.  Both knobs are
safe no-ops on platforms that lack them.
"""

from __future__ import annotations

import ctypes
from contextlib import contextmanager

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_allocator_tuned = False


def tune_allocator() -> None:
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError):
        pass


@contextmanager
def single_thread_blas():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1, user_api="blas"):
        yield
