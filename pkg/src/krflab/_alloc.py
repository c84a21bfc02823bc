"""Keep freed heap memory inside the process.

By default glibc serves large blocks with mmap and returns them to the kernel
on free, so every large numpy temporary is page-faulted in afresh.  On hosts
where first-touch faults are expensive that dominates the run time of the
n=2 tensor checks.  Disabling mmap-backed blocks and heap trimming makes the
allocator recycle those pages instead.  Set ``KRF_KEEP_HEAP=0`` to opt out.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_MAX = -4

_applied = False


def retain_freed_memory() -> bool:
    """Apply the allocator settings once; returns whether they are in effect."""
    global _applied
    if _applied:
        return True
    if os.environ.get("KRF_KEEP_HEAP", "1") == "0" or not sys.platform.startswith("linux"):
        return False
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        mallopt = ctypes.CDLL(name).mallopt
    except (OSError, AttributeError):
        return False
    # -1 as the trim threshold disables trimming altogether
    _applied = mallopt(_M_MMAP_MAX, 0) == 1 and mallopt(_M_TRIM_THRESHOLD, -1) == 1
    return _applied
