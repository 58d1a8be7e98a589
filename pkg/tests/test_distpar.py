from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from trainc.autodiff import Adam, SGD, TrainingSpec, autodiff
from trainc.distpar import (
    ShardSpec,
    Stream,
    World,
    bus_exchange,
    collective_calls,
    collective_runs,
    event_count,
    horizontal_fuse_collectives,
    opt_state_bytes,
    overlap_schedule,
    partition_zero,
    segment_table,
    simulate,
    simulate_timeline,
    split_batch,
)
from trainc.distpar.partition import NotATrainingStep
from trainc.errors import ProtocolError
from trainc.fusion import closures_of
from trainc.ir import anf_bindings, print_text
from trainc.training import train
from trainc.vm.interpreter import CollectiveRequest

from conftest import parse


def test_shard_spec_exact_division():
    spec = ShardSpec.of((10,), 2)
    assert (spec.shard, spec.pad) == (5, 0)


def test_shard_spec_padding():
    spec = ShardSpec.of((2, 5), 3)
    assert (spec.shard, spec.pad) == (4, 2)
    assert spec.shard * 3 - spec.pad == 10


def test_world_needs_a_rank():
    with pytest.raises(ValueError):
        World(0)


def test_single_rank_is_identity(mlp2_sgd):
    assert print_text(partition_zero(mlp2_sgd, World(1))) == print_text(mlp2_sgd)


def test_indivisible_batch_rejected(mlp2_sgd):
    with pytest.raises(ValueError, match="does not split evenly"):
        partition_zero(mlp2_sgd, World(3))


def test_forward_only_rejected(mlp2):
    with pytest.raises(NotATrainingStep):
        partition_zero(mlp2.forward(), World(2))


def test_partition_structure(mlp2_adam):
    fn = partition_zero(mlp2_adam, World(2))
    ops = [getattr(v, "op", "") for _, v in anf_bindings(fn)[0]]
    assert ops.count("reduce_scatter") == 4
    assert ops.count("all_gather") == 4
    assert "all_reduce" not in ops
    sizes = opt_state_bytes(fn)
    full = opt_state_bytes(mlp2_adam)
    for key, total in full.items():
        # f32 states shard by element; the global step counter replicates
        assert sizes[key] == (4 * math.ceil(total / 4 / 2) if ":" in key else total)


def test_split_batch_contiguous():
    x = np.arange(8).reshape(8, 1)
    assert split_batch(x, 1, 2).ravel().tolist() == [4, 5, 6, 7]


TWO_RS = """fn main(%a: f32[6], %b: f32[10]) {
  let %x = reduce_scatter(%a, n_ranks=2);
  let %y = reduce_scatter(%b, n_ranks=2);
  (%x, %y)
}"""


def test_segment_table():
    fn = horizontal_fuse_collectives(parse(TWO_RS), cost_aware=False)
    (closure,) = closures_of(fn)
    assert segment_table(closure.fn) == [(0, 6), (6, 10)]
    assert collective_calls(fn) == 1


def test_single_collective_unchanged():
    fn = parse("fn main(%a: f32[6]) {\n  let %x = all_reduce(%a, n_ranks=2);\n  %x\n}")
    assert print_text(horizontal_fuse_collectives(fn)) == print_text(fn)


DEPENDENT = """fn main(%a: f32[6]) {
  let %x = all_reduce(%a, n_ranks=2);
  let %t = tanh(%x);
  let %y = all_reduce(%t, n_ranks=2);
  %y
}"""


def test_dependent_collectives_not_merged():
    fn = parse(DEPENDENT)
    assert collective_runs(fn) == [[0], [2]]
    assert collective_calls(horizontal_fuse_collectives(fn, cost_aware=False)) == 2


def test_batched_call_matches_unbatched():
    fn = parse(TWO_RS)
    batched = horizontal_fuse_collectives(fn, cost_aware=False)
    rng = np.random.default_rng(0)
    per_rank = [[rng.standard_normal(6).astype(np.float32), rng.standard_normal(10).astype(np.float32)] for _ in range(2)]
    (closure,) = closures_of(batched)
    reqs = [CollectiveRequest("reduce_scatter", p, {"segments": [{"n_ranks": 2}, {"n_ranks": 2}]}) for p in per_rank]
    merged = bus_exchange(reqs)
    for s in range(2):
        single = bus_exchange([CollectiveRequest("reduce_scatter", [p[s]], {"n_ranks": 2}) for p in per_rank])
        for r in range(2):
            assert merged[r][s].tobytes() == single[r][0].tobytes()


def test_protocol_error_names_step_and_rank():
    a = CollectiveRequest("all_reduce", [np.ones(4, np.float32)], {"n_ranks": 3})
    b = CollectiveRequest("all_reduce", [np.ones(5, np.float32)], {"n_ranks": 3})
    with pytest.raises(ProtocolError) as info:
        bus_exchange([a, a, b], step=7)
    assert (info.value.step, info.value.rank) == (7, 2)
    assert "step 7, rank 2" in str(info.value)


# one collective depends on the first of two independent computes
TINY = """fn main(%x: f32[100], %y: f32[100]) {
  let %a = tanh(%x);
  let %c = all_reduce(%a, n_ranks=2);
  let %b = tanh(%y);
  let %d = add(%c, %b);
  %d
}"""
TINY_COST = {"a": 100.0, "b": 100.0, "c": 1000.0 + 400.0, "d": 100.0}
TINY_DEPS = {"a": [], "b": [], "c": ["a"], "d": ["c", "b"]}
TINY_STREAM = {"a": "compute", "b": "compute", "c": "comm", "d": "compute"}


def brute_force_makespan(cost, deps, stream) -> float:
    """Optimal makespan over every per-stream ordering (list scheduling, no idle insertion gain)."""
    best = math.inf
    for order in itertools.permutations(cost):
        pos = {n: i for i, n in enumerate(order)}
        if any(pos[d] > pos[n] for n in order for d in deps[n]):
            continue
        end, free = {}, {"compute": 0.0, "comm": 0.0}
        for n in order:
            start = max([free[stream[n]]] + [end[d] for d in deps[n]])
            end[n] = free[stream[n]] = start + cost[n]
        best = min(best, max(end.values()))
    return best


def test_overlap_matches_brute_force_on_tiny_dag():
    tl = simulate_timeline(parse(TINY))
    assert tl.makespan == brute_force_makespan(TINY_COST, TINY_DEPS, TINY_STREAM) == 1600.0
    comm = next(s for s in tl.spans if s.stream is Stream.COMM)
    b = next(s for s in tl.spans if s.name == "b")
    assert comm.start <= b.start < comm.end  # the second compute hides under the collective
    serial = simulate_timeline(parse(TINY), overlap=False)
    assert serial.makespan == sum(TINY_COST.values())


def test_no_collectives_means_no_events():
    fn = parse("fn main(%x: f32[10]) {\n  let %a = tanh(%x);\n  let %b = neg(%x);\n  let %c = add(%a, %b);\n  %c\n}")
    assert event_count(overlap_schedule(fn)) == 0
    assert simulate_timeline(fn).makespan == simulate_timeline(fn, overlap=False).makespan == 30.0


def test_serial_chain_sums_costs():
    fn = parse(DEPENDENT)
    tl = simulate_timeline(fn)
    assert tl.makespan == sum(s.end - s.start for s in tl.spans)
    assert tl.makespan == simulate_timeline(fn, overlap=False).makespan


def test_overlap_events_are_sound(mlp2_adam):
    fn = overlap_schedule(horizontal_fuse_collectives(partition_zero(mlp2_adam, World(2))))
    tl = simulate_timeline(fn)
    assert tl.check_events() == []
    assert event_count(fn) == len(tl.events) > 0


@pytest.fixture(scope="module")
def sgd_runs(mlp2, mlp2_sgd):
    def data(step):
        x, label = mlp2.data(0, step)
        return {"x": x, "label": label}

    fr = partition_zero(mlp2_sgd, World(2))
    plain = simulate(World(2), fr, data, 3, mlp2.init_params(0))
    again = simulate(World(2), fr, data, 3, mlp2.init_params(0))
    fused = simulate(World(2), horizontal_fuse_collectives(fr), data, 3, mlp2.init_params(0))
    base = train(mlp2_sgd, mlp2, 3, 0)
    return plain, again, fused, base


def test_simulation_deterministic(sgd_runs):
    plain, again, _, _ = sgd_runs
    for r in range(2):
        for k, v in plain.states[r].items():
            assert v.tobytes() == again.states[r][k].tobytes()


def test_ranks_agree_on_params(sgd_runs):
    plain = sgd_runs[0]
    for k, v in plain.params(0).items():
        assert v.tobytes() == plain.params(1)[k].tobytes()


def test_hfuse_results_identical(sgd_runs):
    plain, _, fused, _ = sgd_runs
    for r in range(2):
        for k, v in plain.states[r].items():
            assert v.tobytes() == fused.states[r][k].tobytes()
    assert fused.collective_calls_per_step < plain.collective_calls_per_step


def test_short_parity(sgd_runs):
    plain, _, _, base = sgd_runs
    err = max(float(np.max(np.abs(v - base.state[f"param:{k}"]))) for k, v in plain.params(0).items())
    assert err <= 1e-5


def test_mismatched_programs_raise(mlp2, mlp2_sgd):
    from trainc.distpar import lockstep
    from trainc.vm.bytecode import compile_bytecode
    from trainc.vm.machine import VirtualMachine
    from trainc.backends import ExecContext
    from trainc.opreg import DispatchConfig, dispatch_pass
    from trainc.ir import to_anf

    progs = [parse(DEPENDENT), parse(TWO_RS.replace("%a: f32[6], %b: f32[10]", "%a: f32[6], %b: f32[6]"))]
    vms = [
        VirtualMachine(compile_bytecode(to_anf(dispatch_pass(p, DispatchConfig()))), ctx=ExecContext(r, 2))
        for r, p in enumerate(progs)
    ]
    gens = [vms[0].run_gen([np.ones(6, np.float32)]), vms[1].run_gen([np.ones(6, np.float32)] * 2)]
    with pytest.raises(ProtocolError) as info:
        lockstep(gens, step=3)
    assert info.value.step == 3 and info.value.rank == 1


@pytest.mark.parametrize("opt", [SGD(), Adam()], ids=["sgd", "adam"])
def test_makespan_ordering(mlp2, opt):
    fr = partition_zero(autodiff(mlp2.forward(), TrainingSpec(optimizer=opt)), World(2))
    serial = simulate_timeline(fr, overlap=False).makespan
    overlap = simulate_timeline(fr).makespan
    both = simulate_timeline(horizontal_fuse_collectives(fr)).makespan
    assert both <= overlap < serial
