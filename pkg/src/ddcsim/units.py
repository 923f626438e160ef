"""Fixed-point simulated time.

The clock counts integer ticks of 0.001 microseconds, so every latency in the
bundled profiles (including half-RTTs like 22.5us) is exactly representable
and no float arithmetic enters the event loop.
"""

from __future__ import annotations

TICKS_PER_US = 1000


def us(value: float | int) -> int:
    """Convert microseconds to clock ticks (exact for 0.001us multiples)."""
    ticks = round(value * TICKS_PER_US)
    if abs(ticks - value * TICKS_PER_US) > 1e-6:
        raise ValueError(f"{value}us is not representable at 0.001us resolution")
    if ticks < 0:
        raise ValueError("time must be non-negative")
    return ticks


def to_us(ticks: int) -> float:
    """Ticks back to microseconds, for reports and metrics."""
    return ticks / TICKS_PER_US
