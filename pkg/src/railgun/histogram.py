"""Log-bucketed latency histogram, mergeable across runs.

Fixed bounds 0.01 ms to 100 s with a 2% bucket growth factor, so any
recorded quantile is within one bucket (about 1% relative) of exact and
two histograms with the same parameters add bucket-wise.
"""

from __future__ import annotations

import math

import numpy as np

LOW_MS = 0.01
HIGH_MS = 100_000.0
GROWTH = 1.02

_LOG_GROWTH = math.log(GROWTH)
BUCKETS = int(math.ceil(math.log(HIGH_MS / LOW_MS) / _LOG_GROWTH)) + 1

PERCENTILES = (50.0, 90.0, 99.0, 99.9, 99.99)


class LatencyHistogram:
    def __init__(self):
        self.counts = np.zeros(BUCKETS, dtype=np.int64)
        self.total = 0
        self.max_ms = 0.0
        self.min_ms = math.inf

    def record(self, ms: float) -> None:
        self.record_many(np.asarray([ms], dtype=np.float64))

    def record_many(self, ms) -> None:
        ms = np.asarray(ms, dtype=np.float64)
        if ms.size == 0:
            return
        clipped = np.clip(ms, LOW_MS, HIGH_MS)
        idx = np.floor(np.log(clipped / LOW_MS) / _LOG_GROWTH).astype(np.int64)
        idx = np.clip(idx, 0, BUCKETS - 1)
        self.counts += np.bincount(idx, minlength=BUCKETS)
        self.total += ms.size
        self.max_ms = max(self.max_ms, float(ms.max()))
        self.min_ms = min(self.min_ms, float(ms.min()))

    def percentile(self, q: float) -> float:
        """q in percent; returns the geometric midpoint of the target bucket."""
        if self.total == 0:
            raise ValueError("empty histogram")
        if q >= 100.0:
            return self.max_ms
        rank = max(1, math.ceil(self.total * q / 100.0))
        cum = np.cumsum(self.counts)
        bucket = int(np.searchsorted(cum, rank))
        return LOW_MS * GROWTH ** (bucket + 0.5)

    def merge(self, other: "LatencyHistogram") -> "LatencyHistogram":
        assert other.counts.shape == self.counts.shape
        self.counts += other.counts
        self.total += other.total
        self.max_ms = max(self.max_ms, other.max_ms)
        self.min_ms = min(self.min_ms, other.min_ms)
        return self

    def summary(self) -> dict[str, float]:
        out = {f"p{p:g}": self.percentile(p) for p in PERCENTILES}
        out["max"] = self.max_ms
        out["count"] = float(self.total)
        return out
