"""Data-parallel training: ZeRO partitioning, collective fusion, overlap and simulation."""

from __future__ import annotations

from .hfuse import collective_calls, collective_runs, horizontal_fuse_collectives, segment_table
from .partition import (
    NotATrainingStep,
    ShardSpec,
    World,
    opt_state_bytes,
    partition_zero,
    shard_specs,
    split_batch,
)
from .simulate import SimResult, bus_exchange, lockstep, simulate
from .timeline import (
    DEFAULT_COMM,
    CommCost,
    Event,
    Span,
    Stream,
    Timeline,
    event_count,
    overlap_schedule,
    simulate_timeline,
)

__all__ = [
    "CommCost",
    "DEFAULT_COMM",
    "Event",
    "NotATrainingStep",
    "ShardSpec",
    "SimResult",
    "Span",
    "Stream",
    "Timeline",
    "World",
    "bus_exchange",
    "collective_calls",
    "collective_runs",
    "event_count",
    "horizontal_fuse_collectives",
    "lockstep",
    "opt_state_bytes",
    "overlap_schedule",
    "partition_zero",
    "segment_table",
    "shard_specs",
    "simulate",
    "simulate_timeline",
    "split_batch",
]
