from __future__ import annotations

import math


def ceil_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` that ignores float noise such as 0.3 * 10 == 3.0000000000000004."""
    return int(math.ceil(round(fraction * n, 9)))


def floor_count(fraction: float, n: int) -> int:
    return int(math.floor(round(fraction * n, 9)))
