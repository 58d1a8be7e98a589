"""Collective semantics over per-rank payloads.

Reductions add rank contributions strictly in rank order 0..n-1, so results do
not depend on how ranks are interleaved on the host.
"""

from __future__ import annotations

import numpy as np

from ..oplib import parse_shape_attr, shard_len
from .ref import pad_flat


def rank_order_sum(payloads: list[np.ndarray]) -> np.ndarray:
    acc = payloads[0].copy()
    for p in payloads[1:]:
        acc = (acc + p).astype(acc.dtype, copy=False)
    return acc


def all_reduce(payloads: list[np.ndarray]) -> list[np.ndarray]:
    total = rank_order_sum(payloads)
    return [total.copy() for _ in payloads]


def reduce_scatter(payloads: list[np.ndarray]) -> list[np.ndarray]:
    n = len(payloads)
    total = rank_order_sum([pad_flat(p, n) for p in payloads])
    s = total.size // n
    return [total[r * s : (r + 1) * s].copy() for r in range(n)]


def all_gather(shards: list[np.ndarray], shape) -> list[np.ndarray]:
    shape = parse_shape_attr(shape)
    numel = int(np.prod(shape))
    full = np.concatenate([np.ravel(s) for s in shards])[:numel].reshape(shape)
    return [full.copy() for _ in shards]


def run_collective(kind: str, payloads: list[np.ndarray], attrs: dict) -> list[np.ndarray]:
    n = len(payloads)
    if "n_ranks" in attrs and int(attrs["n_ranks"]) != n:
        raise ValueError(f"{kind} expects {attrs['n_ranks']} ranks, bus has {n}")
    if kind == "all_reduce":
        return all_reduce(payloads)
    if kind == "reduce_scatter":
        return reduce_scatter(payloads)
    if kind == "all_gather":
        expected = shard_len(int(np.prod(parse_shape_attr(attrs["shape"]))), n)
        for p in payloads:
            if p.size != expected:
                raise ValueError(f"all_gather shard of {p.size} elements, expected {expected}")
        return all_gather(payloads, attrs["shape"])
    raise ValueError(f"unknown collective {kind!r}")
