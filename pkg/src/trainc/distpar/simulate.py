"""Deterministic in-process multi-rank execution.

Every rank runs its own VM generator.  Ranks advance in lockstep from one
collective to the next; the bus checks that all ranks issued the same call
and reduces payloads in rank order 0..n-1, so results never depend on how
the host interleaves the ranks.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..backends.collectives import run_collective
from ..backends.ref import ExecContext
from ..errors import ProtocolError
from ..ir.convert import ensure_anf
from ..ir.expr import FunctionIR, anf_bindings
from ..opreg import DispatchConfig, dispatch_pass
from ..training import StepSignature
from ..vm.bytecode import compile_bytecode
from ..vm.interpreter import CollectiveRequest
from ..vm.machine import KernelCache, VirtualMachine
from .partition import World, split_batch
from .timeline import Timeline, is_collective, simulate_timeline


def _describe(req: CollectiveRequest) -> str:
    shapes = ",".join("x".join(map(str, p.shape)) for p in req.payloads)
    return f"{req.kind}[{shapes}]"


def _signature(req: CollectiveRequest) -> tuple:
    return (req.kind, tuple(p.shape for p in req.payloads), tuple(str(p.dtype) for p in req.payloads), repr(req.attrs))


def bus_exchange(requests: list[CollectiveRequest], step: int = 0) -> list[list[np.ndarray]]:
    """Results of one lockstep collective for every rank.

    Raises :class:`ProtocolError` naming the first rank whose call differs
    from rank 0's, or whose payload shape the collective rejects.
    """
    ref = _signature(requests[0])
    for r, req in enumerate(requests[1:], start=1):
        if _signature(req) != ref:
            raise ProtocolError(f"rank {r} issued {_describe(req)}, rank 0 issued {_describe(requests[0])}", step, r)
    n = len(requests)
    segs = requests[0].attrs.get("segments")
    per_seg = segs if segs is not None else [requests[0].attrs]
    out: list[list[np.ndarray]] = [[] for _ in range(n)]
    for s, attrs in enumerate(per_seg):
        try:
            results = run_collective(requests[0].kind, [req.payloads[s] for req in requests], attrs)
        except ValueError as exc:
            raise ProtocolError(str(exc), step, 0) from None
        for r in range(n):
            out[r].append(results[r])
    return out


def lockstep(gens: list, step: int = 0) -> list[list[np.ndarray]]:
    """Drive per-rank execution generators to completion through the bus."""
    n = len(gens)
    pending: list = [None] * n
    finished: list = [None] * n
    sends: list | None = None
    while True:
        for r, g in enumerate(gens):
            try:
                pending[r] = next(g) if sends is None else g.send(sends[r])
            except StopIteration as stop:
                finished[r] = stop.value
                pending[r] = None
        done = [p is None for p in pending]
        if all(done):
            return finished
        if any(done):
            r = done.index(True) if not done[0] else done.index(False)
            raise ProtocolError("ranks disagree on the number of collective calls", step, r)
        sends = bus_exchange(pending, step)


@dataclass
class SimResult:
    world: World
    states: list[dict[str, np.ndarray]]
    losses: list[list[float]]  # per step, per rank
    opt_state_bytes: list[int]
    collective_calls_per_step: int
    timeline: Timeline
    extra: dict = field(default_factory=dict)

    def params(self, rank: int = 0) -> dict[str, np.ndarray]:
        return {k.split(":", 1)[1]: v for k, v in self.states[rank].items() if k.startswith("param:")}

    def timeline_csv(self) -> str:
        """Rows ``rank,stream,op,start,end`` for every rank (identical programs)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "stream", "op", "start", "end"])
        for r in range(self.world.n_ranks):
            for s in self.timeline.spans:
                w.writerow([r, s.stream.value, s.op, f"{s.start:g}", f"{s.end:g}"])
        return buf.getvalue()


def _dispatched(fn: FunctionIR, dispatch: DispatchConfig | None) -> FunctionIR:
    fn = ensure_anf(fn)
    if any("." not in getattr(v, "op", ".") for _, v in anf_bindings(fn)[0]):
        fn = ensure_anf(dispatch_pass(fn, dispatch or DispatchConfig()))
    return fn


def simulate(
    world: World,
    fn_rank: FunctionIR,
    data: Callable[[int], dict[str, np.ndarray]],
    steps: int,
    params: dict[str, np.ndarray],
    *,
    dispatch: DispatchConfig | None = None,
    cache: KernelCache | None = None,
) -> SimResult:
    """Train ``steps`` steps of the rank program on ``world``.

    ``data(step)`` yields the global batch by input name; each rank takes its
    contiguous slice of rows.  ``params`` holds full initial parameters by
    name; optimiser states start at zero in their per-rank shapes.
    """
    fn = ensure_anf(fn_rank)
    sig = StepSignature.of(fn)
    bc = compile_bytecode(_dispatched(fn, dispatch))
    n = world.n_ranks
    vms = [VirtualMachine(bc, cache=cache, ctx=ExecContext(r, n)) for r in range(n)]
    states: list[dict[str, np.ndarray]] = []
    opt_bytes = []
    for _ in range(n):
        st = {}
        nbytes = 0
        for p, key in zip(fn.params, sig.inputs):
            kind, _, name = key.partition(":")
            if kind == "param":
                st[key] = np.asarray(params[name], dtype=p.ty.dtype.np).copy()
            elif kind == "opt":
                st[key] = np.zeros(p.ty.shape, dtype=p.ty.dtype.np)
                nbytes += st[key].nbytes
        states.append(st)
        opt_bytes.append(nbytes)
    losses: list[list[float]] = []
    calls = sum(1 for _, v in anf_bindings(fn)[0] if is_collective(v))
    for step in range(steps):
        batch = data(step)
        gens = []
        for r in range(n):
            inputs = []
            for key in sig.inputs:
                kind, _, name = key.partition(":")
                inputs.append(split_batch(batch[name], r, n) if kind == "data" else states[r][key])
            gens.append(vms[r].run_gen(inputs))
        outs = lockstep(gens, step)
        row = []
        for r in range(n):
            for key, value in zip(sig.outputs, outs[r]):
                if key == "loss":
                    row.append(float(value.reshape(-1)[0]))
                elif key is not None:
                    states[r][key] = value
        losses.append(row)
    return SimResult(world, states, losses, opt_bytes, calls, simulate_timeline(fn))
