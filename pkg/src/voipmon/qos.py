"""Lightweight throughput monitoring.

Per-interval packet (or byte) counts are kept in a fixed ring of the last W
averaging intervals; mean and population standard deviation of the ring are
quantized to one byte each and shipped across the covert channel, so the
whole monitoring stream costs 2 bytes per interval (32 bps at the 500 ms
default).  The receiver compares the sender's record against its own ring to
flag throughput degradation.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Deque, List, Optional, Tuple


class ClockError(ValueError):
    """Observation timestamps must be monotone."""


class NotReadyError(RuntimeError):
    """Not enough completed intervals to summarize."""


class AlignmentError(ValueError):
    """Sender/receiver records refer to different intervals."""


@dataclass
class MonitorConfig:
    """Tunable constants of the throughput monitor."""

    dt_ms: float = 500.0          # averaging interval
    window_len: int = 10          # intervals per observation window
    mode: str = "moving"          # moving | jumping window
    delta_avg: float = 0.10       # tolerated relative average drop
    delta_std: float = 0.50       # tolerated relative std-dev increase
    count_bytes: bool = False     # count bytes instead of packets

    def __post_init__(self):
        if self.mode not in ("moving", "jumping"):
            raise ValueError(f"window mode must be moving or jumping, got {self.mode!r}")


def quantize_count(x: float) -> int:
    """Clamp to [0, 255] and round half-up (with a float-representation guard)."""
    clamped = min(255.0, max(0.0, x))
    return int(clamped + 0.5 + 1e-9)


@dataclass(frozen=True)
class MonitoringRecord:
    """Quantized (average, standard deviation) of the rate over one window."""

    avg_q: int
    std_q: int
    interval: int

    def to_bytes(self) -> bytes:
        return bytes((self.avg_q, self.std_q))

    @classmethod
    def from_bytes(cls, data: bytes, interval: int) -> "MonitoringRecord":
        if len(data) != 2:
            raise ValueError("monitoring record is exactly 2 bytes")
        return cls(avg_q=data[0], std_q=data[1], interval=interval)


@dataclass(frozen=True)
class QosVerdict:
    interval: int
    psr_ok: bool
    rel_avg_drop: float
    rel_std_increase: float


class StatRing:
    """Ring buffer of per-interval counts with running first/second moments.

    Intervals are half-open [n*dt, (n+1)*dt); a count stamped exactly on a
    boundary lands in the later interval.  The running sums always equal a
    from-scratch recomputation because counts are integers.
    """

    def __init__(self, cfg: MonitorConfig, start_ms: float = 0.0):
        self.cfg = cfg
        self._dt = cfg.dt_ms
        self._w = cfg.window_len
        self._current_idx = int(start_ms // self._dt)
        self._current_count = 0
        self._last_now = start_ms
        self._window: Deque[int] = deque()
        self._sum = 0
        self._sumsq = 0
        # retain extra history so delayed records can still be compared
        self._history: Deque[Tuple[int, int]] = deque(maxlen=2 * self._w + 4)

    @property
    def last_completed(self) -> Optional[int]:
        if not self._history:
            return None
        return self._history[-1][0]

    def _complete_bucket(self):
        count = self._current_count
        if len(self._window) == self._w:
            old = self._window.popleft()
            self._sum -= old
            self._sumsq -= old * old
        self._window.append(count)
        self._sum += count
        self._sumsq += count * count
        self._history.append((self._current_idx, count))
        self._current_idx += 1
        self._current_count = 0

    def advance_to(self, now: float):
        """Close every interval that ends at or before now."""
        if now < self._last_now:
            raise ClockError(f"clock went backwards: {now} < {self._last_now}")
        self._last_now = now
        idx = int(now // self._dt)
        while self._current_idx < idx:
            self._complete_bucket()

    def observe(self, now: float, amount: int = 1):
        """Account one packet (or amount bytes) at time now."""
        self.advance_to(now)
        self._current_count += amount

    def window_counts(self, end_interval: Optional[int] = None) -> List[int]:
        """Counts of the last <= W completed intervals ending at end_interval."""
        if not self._history:
            raise NotReadyError("no completed interval yet")
        last = self._history[-1][0]
        if end_interval is None:
            end_interval = last
        if end_interval > last:
            raise NotReadyError(f"interval {end_interval} not completed yet")
        by_idx = dict(self._history)
        first_known = self._history[0][0]
        if end_interval < first_known:
            raise AlignmentError(f"interval {end_interval} older than retained history")
        lo = max(first_known, end_interval - self._w + 1)
        return [by_idx.get(i, 0) for i in range(lo, end_interval + 1)]

    def summarize(self, end_interval: Optional[int] = None) -> MonitoringRecord:
        """Quantized mean/population-std of the window ending at end_interval."""
        if not self._history:
            raise NotReadyError("no completed interval yet")
        if end_interval is None or end_interval == self._history[-1][0]:
            n = len(self._window)
            mean = self._sum / n
            var = self._sumsq / n - mean * mean
            interval = self._history[-1][0]
        else:
            counts = self.window_counts(end_interval)
            n = len(counts)
            mean = sum(counts) / n
            var = sum(c * c for c in counts) / n - mean * mean
            interval = end_interval
        std = math.sqrt(max(0.0, var))
        return MonitoringRecord(avg_q=quantize_count(mean), std_q=quantize_count(std),
                                interval=interval)


def observe_packet(ring: StatRing, now: float, amount: int = 1):
    """Module-level alias kept for symmetry with the other operations."""
    ring.observe(now, amount)


def summarize(ring: StatRing, end_interval: Optional[int] = None) -> MonitoringRecord:
    return ring.summarize(end_interval)


def compare(sender: MonitoringRecord, receiver: MonitoringRecord,
            cfg: MonitorConfig) -> QosVerdict:
    """Sender-vs-receiver window comparison.

    A drop of the average flags loss, an increase of the standard deviation
    flags jitter/bottlenecks; both are relative with a floor of 1 count on
    the denominator so zero-deviation senders stay comparable.
    """
    if sender.interval != receiver.interval:
        raise AlignmentError(
            f"records from different intervals: {sender.interval} vs {receiver.interval}")
    rel_avg_drop = max(0.0, (sender.avg_q - receiver.avg_q) / max(sender.avg_q, 1))
    rel_std_increase = max(0.0, (receiver.std_q - sender.std_q) / max(sender.std_q, 1))
    psr_ok = rel_avg_drop <= cfg.delta_avg and rel_std_increase <= cfg.delta_std
    return QosVerdict(interval=sender.interval, psr_ok=psr_ok,
                      rel_avg_drop=rel_avg_drop, rel_std_increase=rel_std_increase)


def monitoring_bitrate(cfg: MonitorConfig) -> float:
    """Raw rate of the 2-byte-per-interval monitoring stream in bps."""
    return 2 * 8 / (cfg.dt_ms / 1000.0)
