"""ZeRO-style sharding across simulated ranks, with the two-stream timeline.

Run: python3 demos/04_data_parallel.py
"""

from __future__ import annotations

import numpy as np

from trainc.autodiff import Adam, TrainingSpec, autodiff
from trainc.distpar import (
    World,
    collective_calls,
    horizontal_fuse_collectives,
    partition_zero,
    simulate,
    simulate_timeline,
)
from trainc.models import get_model
from trainc.training import train

model = get_model("mlp2")
step = autodiff(model.forward(), TrainingSpec(optimizer=Adam()))
single = train(step, model, 10, seed=0)


def data(i: int):
    x, label = model.data(0, i)
    return {"x": x, "label": label}


for n in (2, 4):
    world = World(n)
    rank_program = partition_zero(step, world)
    batched = horizontal_fuse_collectives(rank_program)
    res = simulate(world, batched, data, 10, model.init_params(0))
    err = max(float(np.max(np.abs(v - single.state[f"param:{k}"]))) for k, v in res.params(0).items())
    print(f"N={n}: parity {err:.1e}, optimizer bytes per rank {res.opt_state_bytes[0]}")
    print(f"  collectives per step {collective_calls(rank_program)} -> {collective_calls(batched)} after batching")
    serial = simulate_timeline(rank_program, overlap=False).makespan
    overlap = simulate_timeline(rank_program).makespan
    both = simulate_timeline(batched).makespan
    print(f"  makespan serial {serial:.0f}, overlap {overlap:.0f}, overlap+batching {both:.0f} cost units")
