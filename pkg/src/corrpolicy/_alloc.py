"""Keep glibc from returning large buffers to the OS between training steps.

Attention activations are hundreds of MB; with default thresholds every step
munmaps and refaults them, multiplying wall time several-fold. Raising the
mmap/trim thresholds keeps the buffers on the heap for reuse. No-op off glibc.
"""

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_malloc(threshold: int = 1 << 30):
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(_M_TRIM_THRESHOLD, threshold)
        libc.mallopt(_M_MMAP_THRESHOLD, threshold)
    except (OSError, AttributeError):
        pass
