"""Two-stream execution model: compute and communication overlap.

Collectives run on a communication stream, everything else on the compute
stream.  Each stream executes its operations in program order; an operation
starts once its stream is free and its inputs are ready.  A data dependency
that crosses streams is bridged by one signal/wait event pair.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from ..ir.convert import ensure_anf, rebuild_node
from ..ir.expr import Call, ClosureCall, Expr, FunctionIR, Node, TupleGet, Var, anf_bindings, make_anf
from ..ir.types import TensorType
from ..memsched import DEFAULT_COST, CostModel
from ..oplib import COLLECTIVES, parse_shape_attr


class Stream(enum.Enum):
    COMPUTE = "compute"
    COMM = "comm"


@dataclass(frozen=True)
class CommCost:
    """``alpha + beta * bytes`` cost units per collective call."""

    alpha: float = 1000.0
    beta: float = 1.0

    def __call__(self, nbytes: int) -> float:
        return self.alpha + self.beta * nbytes


DEFAULT_COMM = CommCost()


def is_collective(value: Expr) -> bool:
    if isinstance(value, Call):
        return value.op.rsplit(".", 1)[-1] in COLLECTIVES
    return isinstance(value, ClosureCall) and value.fn.attrs.get("dialect") == "comm"


def stream_of(value: Expr) -> Stream:
    return Stream.COMM if is_collective(value) else Stream.COMPUTE


def payload_bytes(value: Expr) -> list[int]:
    """Bytes moved by each segment of a (possibly batched) collective: the full tensor."""
    if isinstance(value, ClosureCall):
        return [payload_bytes(v)[0] for _, v in anf_bindings(ensure_anf(value.fn))[0]]
    (a,) = value.args
    if value.op.rsplit(".", 1)[-1] == "all_gather":
        return [TensorType(a.ty.dtype, parse_shape_attr(value.attrs["shape"])).size_bytes]
    return [a.ty.size_bytes]


@dataclass(frozen=True)
class Event:
    id: str
    producer: str
    consumer: str
    signal: float = 0.0
    wait: float = 0.0


@dataclass(frozen=True)
class Span:
    stream: Stream
    name: str
    op: str
    start: float
    end: float


@dataclass
class Timeline:
    spans: list[Span]
    events: list[Event] = field(default_factory=list)
    overlap: bool = True

    @property
    def makespan(self) -> float:
        return max((s.end for s in self.spans), default=0.0)

    def busy(self, stream: Stream) -> float:
        return sum(s.end - s.start for s in self.spans if s.stream is stream)

    def check_events(self) -> list[str]:
        """Events whose wait precedes the matching signal (should be empty)."""
        return [e.id for e in self.events if e.wait < e.signal]


def _label(value: Expr) -> str:
    if isinstance(value, Call):
        return value.op
    if isinstance(value, ClosureCall):
        return value.fn.name
    return type(value).__name__.lower()


def op_cost(value: Expr, cost: CostModel = DEFAULT_COST, comm: CommCost = DEFAULT_COMM) -> float:
    if isinstance(value, TupleGet):
        return 0.0
    if is_collective(value):
        return comm.alpha + comm.beta * sum(payload_bytes(value))
    return cost.binding(value)


def simulate_timeline(
    fn: FunctionIR,
    *,
    overlap: bool = True,
    cost: CostModel = DEFAULT_COST,
    comm: CommCost = DEFAULT_COMM,
) -> Timeline:
    """Cost-unit timeline of one execution of ``fn``.

    Without ``overlap`` both streams share one clock (fully serialised).
    Projections out of a batched collective are free and live on its stream.
    """
    fn = ensure_anf(fn)
    bindings, _ = anf_bindings(fn)
    ready: dict[str, float] = {}
    stream: dict[str, Stream] = {}
    free = {Stream.COMPUTE: 0.0, Stream.COMM: 0.0}
    clock = 0.0
    spans: list[Span] = []
    events: list[Event] = []
    for var, value in bindings:
        if isinstance(value, TupleGet) and isinstance(value.tuple_value, Var):
            src = value.tuple_value.name
            ready[var.name] = ready[src]
            stream[var.name] = stream[src]
            continue
        s = stream_of(value)
        deps = [a.name for a in value.operands() if isinstance(a, Var) and a.name in ready]
        start = max([ready[d] for d in deps], default=0.0)
        if overlap:
            start = max(start, free[s])
        else:
            start = max(start, clock)
        end = start + op_cost(value, cost, comm)
        free[s] = end
        clock = end
        ready[var.name] = end
        stream[var.name] = s
        spans.append(Span(s, var.name, _label(value), start, end))
        for d in dict.fromkeys(deps):
            if stream[d] is not s:
                events.append(Event(f"e{len(events)}", d, var.name, ready[d], start))
    return Timeline(spans, events, overlap)


def overlap_schedule(fn: FunctionIR) -> FunctionIR:
    """Tag every binding with its stream and every cross-stream edge with an event.

    Producers get ``signal="e0,e3"``, consumers ``wait="e0"``; the program order
    is unchanged.  Projections inherit the stream of the batched collective.
    """
    fn = ensure_anf(fn)
    bindings, ret = anf_bindings(fn)
    stream: dict[str, Stream] = {}
    signals: dict[str, list[str]] = {}
    waits: dict[str, list[str]] = {}
    n_events = 0
    for var, value in bindings:
        if isinstance(value, TupleGet) and isinstance(value.tuple_value, Var):
            s = stream[value.tuple_value.name]
            stream[var.name] = s
            continue
        s = stream_of(value)
        stream[var.name] = s
        for a in dict.fromkeys(a.name for a in value.operands() if isinstance(a, Var) and a.name in stream):
            if stream[a] is not s:
                eid = f"e{n_events}"
                n_events += 1
                signals.setdefault(a, []).append(eid)
                waits.setdefault(var.name, []).append(eid)
    renamed: dict[int, Var] = {}
    out = []
    for var, value in bindings:
        attrs = dict(var.attrs)
        attrs["stream"] = stream[var.name].value
        if var.name in signals:
            attrs["signal"] = ",".join(signals[var.name])
        if var.name in waits:
            attrs["wait"] = ",".join(waits[var.name])
        new = Var(var.name, var.ty, attrs)
        renamed[id(var)] = new
        out.append((new, _subst(value, renamed)))
    return make_anf(fn.name, fn.params, out, _subst(ret, renamed), fn.attrs)


def _subst(e: Expr, renamed: dict[int, Var]) -> Expr:
    if isinstance(e, Var):
        return renamed.get(id(e), e)
    if isinstance(e, Node):
        return rebuild_node(e, tuple(_subst(a, renamed) for a in e.operands()))
    return e


def event_count(fn: FunctionIR) -> int:
    """Number of signal/wait pairs annotated by :func:`overlap_schedule`."""
    return sum(len(str(v.attrs["wait"]).split(",")) for v, _ in anf_bindings(ensure_anf(fn))[0] if "wait" in v.attrs)
