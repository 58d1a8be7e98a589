"""Storage pool with size-class free lists.

Size classes are quarter steps between powers of two (4, 5, 6, 7, 8, 10,
12, 14, 16, 20, ...), so a request never wastes more than a quarter of its
size beyond the 4-byte minimum.  On a miss every cached free slab is
released before allocating, which keeps the pool's footprint at its live
bytes whenever it grows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_CLASS = 4


def size_class(nbytes: int) -> int:
    if nbytes <= MIN_CLASS:
        return MIN_CLASS
    e = max(int(nbytes).bit_length() - 3, 0)
    while True:
        for m in (4, 5, 6, 7):
            c = m << e
            if c >= nbytes:
                return c
        e += 1


@dataclass(eq=False)
class Slab:
    size: int
    data: np.ndarray
    live: bool = True


@dataclass
class PoolStats:
    bytes_allocated: int = 0
    bytes_reused: int = 0
    live_bytes: int = 0
    held_bytes: int = 0
    high_water: int = 0
    allocations: int = 0
    reuses: int = 0
    releases: int = 0


@dataclass
class StoragePool:
    free: dict[int, list[Slab]] = field(default_factory=dict)
    stats: PoolStats = field(default_factory=PoolStats)

    def alloc(self, nbytes: int) -> Slab:
        size = size_class(nbytes)
        bucket = self.free.get(size)
        if bucket:
            slab = bucket.pop()
            slab.live = True
            self.stats.bytes_reused += size
            self.stats.reuses += 1
        else:
            self.release_free()
            slab = Slab(size, np.empty(size, dtype=np.uint8))
            self.stats.bytes_allocated += size
            self.stats.allocations += 1
            self.stats.held_bytes += size
            self.stats.high_water = max(self.stats.high_water, self.stats.held_bytes)
        self.stats.live_bytes += size
        return slab

    def release(self, slab: Slab) -> None:
        assert slab.live, "double free of a storage slab"
        slab.live = False
        self.stats.live_bytes -= slab.size
        self.free.setdefault(slab.size, []).append(slab)

    def release_free(self) -> None:
        for bucket in self.free.values():
            for slab in bucket:
                self.stats.held_bytes -= slab.size
                self.stats.releases += 1
        self.free.clear()

    def cached_bytes(self) -> int:
        return sum(s.size for b in self.free.values() for s in b)
