"""Liveness, peak memory, p-c list scheduling and budgeted rematerialization.

The accounting model works on *buffers*: every let-bound tensor is a buffer,
and a closure returning a tuple produces one buffer per field (``%v.0``,
``%v.1``, ...), which its ``TupleGet`` bindings merely alias.  A buffer
occupies its bytes from the index of the binding that produces it through its
last use, so an op's inputs and outputs are simultaneously live.  Parameters
are pinned for the whole function (optionally not, see ``pin_params``), and
returned buffers live until the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import BudgetInfeasible
from .ir.convert import ensure_anf
from .ir.expr import (
    Call,
    ClosureCall,
    Expr,
    FunctionIR,
    NameSupply,
    Tuple,
    TupleGet,
    Var,
    anf_bindings,
    function_names,
    make_anf,
)
from .ir.types import TensorType, TupleType
from .oplib import COLLECTIVES


def _base(op: str) -> str:
    return op.rsplit(".", 1)[-1]


def _size(ty) -> int:
    return ty.size_bytes if isinstance(ty, TensorType) else 0


@dataclass
class LivenessTable:
    """Buffer intervals of one ANF function.

    ``intervals[b] = (def, last_use)`` in let-indices; parameters have
    ``def = 0``.  ``live[i]`` lists the buffers live at index ``i``.
    """

    names: list[str]
    intervals: dict[str, tuple[int, int]]
    sizes: dict[str, int]
    live: list[list[str]]
    pinned: set[str] = field(default_factory=set)
    outputs: set[str] = field(default_factory=set)
    alias: dict[str, str] = field(default_factory=dict)
    uses: dict[str, list[int]] = field(default_factory=dict)

    def bytes_at(self, i: int) -> int:
        return sum(self.sizes[b] for b in self.live[i])

    def last_use(self, var: str) -> int:
        return self.intervals[self.alias.get(var, var)][1]


@dataclass
class MemProfile:
    curve: list[int]
    peak: int
    peak_index: int


def _buffers_of(var: Var, value: Expr) -> list[tuple[str, int]]:
    if isinstance(value, ClosureCall) and isinstance(var.ty, TupleType):
        return [(f"{var.name}.{k}", _size(t)) for k, t in enumerate(var.ty.fields)]
    if isinstance(value, TupleGet):
        return []
    return [(var.name, _size(var.ty))]


def liveness(fn: FunctionIR, pin_params: bool = True) -> LivenessTable:
    fn = ensure_anf(fn)
    bindings, ret = anf_bindings(fn)
    n = len(bindings)
    end = max(n - 1, 0)
    sizes: dict[str, int] = {}
    intervals: dict[str, list[int]] = {}
    alias: dict[str, str] = {}
    uses: dict[str, list[int]] = {}
    names: list[str] = []
    pinned: set[str] = set()

    def new_buffer(name: str, size: int, at: int) -> None:
        names.append(name)
        sizes[name] = size
        intervals[name] = [at, at]
        uses[name] = []

    for p in fn.params:
        new_buffer(p.name, _size(p.ty), 0)
        if pin_params:
            pinned.add(p.name)
            intervals[p.name][1] = end

    def use(name: str, at: int) -> None:
        b = alias.get(name, name)
        intervals[b][1] = max(intervals[b][1], at)
        uses[b].append(at)

    tuple_fields: dict[str, list[str]] = {}
    for i, (var, value) in enumerate(bindings):
        if isinstance(value, TupleGet):
            src = value.tuple_value.name
            alias[var.name] = f"{src}.{value.index}"
            use(alias[var.name], i)
            continue
        for a in value.operands():
            if isinstance(a, Var):
                if a.name in tuple_fields:
                    for f in tuple_fields[a.name]:
                        use(f, i)
                else:
                    use(a.name, i)
        bufs = _buffers_of(var, value)
        if isinstance(value, ClosureCall) and isinstance(var.ty, TupleType):
            tuple_fields[var.name] = [b for b, _ in bufs]
        for b, size in bufs:
            new_buffer(b, size, i)

    outputs: set[str] = set()
    for f in ret.fields if isinstance(ret, Tuple) else (ret,):
        if isinstance(f, Var):
            for b in tuple_fields.get(f.name, [alias.get(f.name, f.name)]):
                outputs.add(b)
                intervals[b][1] = end
    live = [[] for _ in range(n)]
    for b in names:
        lo, hi = intervals[b]
        for i in range(lo, min(hi, n - 1) + 1):
            live[i].append(b)
    return LivenessTable(
        names,
        {b: (lo, hi) for b, (lo, hi) in intervals.items()},
        sizes,
        live,
        pinned,
        outputs,
        alias,
        uses,
    )


def peak_memory(fn: FunctionIR, pin_params: bool = True) -> MemProfile:
    table = liveness(fn, pin_params)
    curve = [table.bytes_at(i) for i in range(len(table.live))]
    if not curve:
        total = sum(table.sizes[p] for p in table.pinned)
        return MemProfile([], total, 0)
    peak = max(curve)
    return MemProfile(curve, peak, curve.index(peak))


# ------------------------------------------------------------------ cost model


@dataclass(frozen=True)
class CostModel:
    """Estimated latency per op in abstract units.

    elementwise, injective and reductions cost the element count of their
    largest operand or result; matmul costs m*n*k; closures the sum of their
    bodies; collectives cost nothing here (see the timeline model).
    """

    scale: dict[str, float] = field(default_factory=dict)

    def call(self, op: str, arg_types: list, out_type) -> float:
        base = _base(op)
        if base in COLLECTIVES:
            return 0.0
        if base == "matmul":
            (m, k), (_, n) = arg_types[0].shape, arg_types[1].shape
            cost = float(m * n * k)
        else:
            sizes = [t.numel for t in arg_types if isinstance(t, TensorType)]
            if isinstance(out_type, TensorType):
                sizes.append(out_type.numel)
            cost = float(max(sizes, default=1))
        return cost * self.scale.get(base, 1.0)

    def binding(self, value: Expr) -> float:
        if isinstance(value, Call):
            types = [a.ty for a in value.args]
            return self.call(value.op, types, None if not types else _out_type(value))
        if isinstance(value, ClosureCall):
            inner = ensure_anf(value.fn)
            return sum(self.binding(v) for _, v in anf_bindings(inner)[0])
        return 0.0


def _out_type(value: Call):
    from .opreg import default_registry

    reg = default_registry()
    try:
        return reg.type_rel(value.op)([a.ty for a in value.args], dict(value.attrs))
    except Exception:
        return None


DEFAULT_COST = CostModel()


# ------------------------------------------------------------------ scheduling


def _units(bindings) -> list[list[int]]:
    """Group each closure call with the TupleGets that project it."""
    owner: dict[str, int] = {}
    units: list[list[int]] = []
    for i, (var, value) in enumerate(bindings):
        if isinstance(value, TupleGet) and isinstance(value.tuple_value, Var) and value.tuple_value.name in owner:
            units[owner[value.tuple_value.name]].append(i)
            continue
        owner[var.name] = len(units)
        units.append([i])
    return units


def schedule(fn: FunctionIR, pin_params: bool = True) -> FunctionIR:
    """Greedy list scheduling by minimum ``p - c``, ties by original position.

    ``p`` is the bytes a unit produces, ``c`` the bytes of its inputs for
    which it is the last remaining consumer.
    """
    fn = ensure_anf(fn)
    bindings, ret = anf_bindings(fn)
    units = _units(bindings)
    unit_of = {}
    for u, idxs in enumerate(units):
        for i in idxs:
            unit_of[bindings[i][0].name] = u
    table = liveness(fn, pin_params)
    produced = []
    inputs: list[set[str]] = []
    for idxs in units:
        p = 0
        ins: set[str] = set()
        for i in idxs:
            var, value = bindings[i]
            p += sum(s for _, s in _buffers_of(var, value))
            if isinstance(value, TupleGet):
                continue
            for a in value.operands():
                if isinstance(a, Var):
                    ins.update(_buffers_for_var(table, a.name))
        produced.append(p)
        inputs.append(ins)
    deps: list[set[int]] = []
    for u, idxs in enumerate(units):
        d = set()
        for i in idxs:
            for a in bindings[i][1].operands():
                if isinstance(a, Var) and a.name in unit_of and unit_of[a.name] != u:
                    d.add(unit_of[a.name])
        deps.append(d)
    consumers: dict[str, set[int]] = {}
    for u, ins in enumerate(inputs):
        for b in ins:
            consumers.setdefault(b, set()).add(u)
    keep = table.pinned | table.outputs
    done: set[int] = set()
    remaining = {b: set(us) for b, us in consumers.items()}
    order: list[int] = []
    while len(order) < len(units):
        best = None
        for u in range(len(units)):
            if u in done or not deps[u] <= done:
                continue
            freed = sum(
                table.sizes[b] for b in inputs[u] if b not in keep and remaining.get(b, set()) == {u}
            )
            key = (produced[u] - freed, u)
            if best is None or key < best:
                best = key
        u = best[1]
        order.append(u)
        done.add(u)
        for b in inputs[u]:
            remaining[b].discard(u)
    new_bindings = [bindings[i] for u in order for i in units[u]]
    return make_anf(fn.name, fn.params, new_bindings, ret, fn.attrs)


def _buffers_for_var(table: LivenessTable, name: str) -> list[str]:
    if name in table.sizes:
        return [name]
    if name in table.alias:
        return [table.alias[name]]
    prefix = name + "."
    return [b for b in table.names if b.startswith(prefix)]


def is_topological(fn: FunctionIR) -> bool:
    fn = ensure_anf(fn)
    defined = {p.name for p in fn.params}
    bindings, ret = anf_bindings(fn)
    for var, value in bindings:
        for a in value.operands():
            if isinstance(a, Var) and a.name not in defined:
                return False
        defined.add(var.name)
    fields = ret.fields if isinstance(ret, Tuple) else (ret,)
    return all(f.name in defined for f in fields if isinstance(f, Var))


# ------------------------------------------------------------------ rematerialization


@dataclass(frozen=True)
class Split:
    victim: str
    evict_index: int
    replay_before: int
    replay: str


@dataclass
class RematPlan:
    splits: list[Split] = field(default_factory=list)

    @property
    def overhead(self) -> int:
        """Number of replayed operators."""
        return len(self.splits)


def memory_floor(fn: FunctionIR, pin_params: bool = True) -> int:
    """Bytes no schedule can avoid: pinned tensors plus one op's operands and results."""
    fn = ensure_anf(fn)
    table = liveness(fn, pin_params)
    bindings, _ = anf_bindings(fn)
    base = sum(table.sizes[b] for b in table.pinned)
    floor = base
    for i, (var, value) in enumerate(bindings):
        bufs = {b for b, _ in _buffers_of(var, value)}
        for a in value.operands():
            if isinstance(a, Var):
                bufs.update(_buffers_for_var(table, a.name))
        floor = max(floor, base + sum(table.sizes[b] for b in bufs - table.pinned))
    return floor


def _replayable(value: Expr) -> bool:
    if isinstance(value, ClosureCall):
        # single-output compute closures replay like calls; batched collectives never do
        return value.fn.attrs.get("dialect") != "comm" and isinstance(value.fn.ret_type, TensorType)
    return isinstance(value, Call) and _base(value.op) not in COLLECTIVES and _base(value.op) != "local_shard"


def rematerialize(
    fn: FunctionIR,
    budget: int,
    *,
    cost: CostModel = DEFAULT_COST,
    max_depth: int = 3,
    pin_params: bool = True,
    max_steps: int = 10_000,
) -> tuple[FunctionIR, RematPlan]:
    """Split live ranges until the memory curve fits ``budget``.

    At the first index over budget, the live tensor minimising
    ``latency(producer) * remaining_uses / size`` is evicted and its producer
    replayed right before its next use.  Inputs of the replay that are dead
    by then are replayed too, up to ``max_depth`` levels.
    """
    fn = ensure_anf(fn)
    plan = RematPlan()
    floor = memory_floor(fn, pin_params)
    if floor > budget:
        raise BudgetInfeasible(budget, floor, "single-op floor exceeds the budget")
    names = NameSupply(function_names(fn))
    bindings, ret = anf_bindings(fn)
    bindings = list(bindings)
    for _ in range(max_steps):
        cur = make_anf(fn.name, fn.params, bindings, ret, fn.attrs)
        table = liveness(cur, pin_params)
        curve = [table.bytes_at(i) for i in range(len(bindings))]
        over = next((i for i, b in enumerate(curve) if b > budget), None)
        if over is None:
            return cur, plan
        replayed = {sp.replay for sp in plan.splits}
        choice = _pick_victim(bindings, table, over, cost, max_depth, replayed)
        if choice is None:
            raise BudgetInfeasible(
                budget, floor, f"no evictable tensor at index {over} ({curve[over]} B live)"
            )
        bindings = _apply_eviction(bindings, table, choice, over, names, plan, max_depth)
    raise BudgetInfeasible(budget, floor, "rematerialization did not converge")


def _producer_index(bindings) -> dict[str, int]:
    return {var.name: i for i, (var, _) in enumerate(bindings)}


def _replay_closure(bindings, table: LivenessTable, name: str, at: int, max_depth: int) -> list[str] | None:
    """Buffers that must be replayed (deepest first) to recompute ``name`` at ``at``."""
    prod = _producer_index(bindings)
    out: list[str] = []

    def visit(b: str, depth: int) -> bool:
        if depth > max_depth:
            return False
        i = prod.get(b)
        if i is None:
            return False
        value = bindings[i][1]
        if not _replayable(value):
            return False
        for a in value.args:
            if not isinstance(a, Var):
                continue
            buf = table.alias.get(a.name, a.name)
            if buf not in table.intervals:
                return False
            if buf in table.pinned or table.intervals[buf][1] >= at:
                continue
            if buf not in out and not visit(buf, depth + 1):
                return False
        if b not in out:
            out.append(b)
        return True

    return out if visit(name, 1) else None


def _pick_victim(bindings, table: LivenessTable, at: int, cost: CostModel, max_depth: int, replayed=frozenset()):
    # replayed tensors are never evicted again: each original tensor is split
    # at most once, so the loop terminates
    var, value = bindings[at]
    touching = {b for b, _ in _buffers_of(var, value)}
    for a in value.operands():
        if isinstance(a, Var):
            touching.update(_buffers_for_var(table, a.name))
    prod = _producer_index(bindings)
    best = None
    for b in table.live[at]:
        if b in touching or b in table.pinned or b in table.outputs or b not in prod or b in replayed:
            continue
        if not _replayable(bindings[prod[b]][1]) or table.sizes[b] == 0:
            continue
        later = sorted(u for u in table.uses[b] if u > at)
        if not later:
            continue
        chain = _replay_closure(bindings, table, b, later[0], max_depth)
        if chain is None:
            continue
        score = cost.binding(bindings[prod[b]][1]) * len(later) / table.sizes[b]
        key = (score, prod[b])
        if best is None or key < best[0]:
            best = (key, b, later[0], chain)
    return best


def _apply_eviction(bindings, table, choice, at: int, names: NameSupply, plan: RematPlan, max_depth: int):
    _, victim, next_use, chain = choice
    prod = _producer_index(bindings)
    renames: dict[str, Var] = {}
    replays = []
    for b in chain:
        var, value = bindings[prod[b]]
        args = tuple(renames.get(a.name, a) if isinstance(a, Var) else a for a in value.args)
        new = Var(names(f"{var.name}_r"), var.ty, {})
        if isinstance(value, ClosureCall):
            replays.append((new, ClosureCall(value.fn, args)))
        else:
            replays.append((new, Call(value.op, args, dict(value.attrs))))
        renames[b] = new
        plan.splits.append(Split(b, at, next_use, new.name))
    out = list(bindings[:next_use]) + replays
    for var, value in bindings[next_use:]:
        out.append((var, _rename_args(value, renames)))
    return out


def _rename_args(value: Expr, renames: dict[str, Var]) -> Expr:
    if not renames:
        return value
    if isinstance(value, Call):
        args = tuple(renames.get(a.name, a) if isinstance(a, Var) else a for a in value.args)
        return Call(value.op, args, dict(value.attrs))
    if isinstance(value, ClosureCall):
        args = tuple(renames.get(a.name, a) if isinstance(a, Var) else a for a in value.args)
        return ClosureCall(value.fn, args)
    if isinstance(value, TupleGet):
        tv = value.tuple_value
        return TupleGet(renames.get(tv.name, tv) if isinstance(tv, Var) else tv, value.index)
    return value


__all__ = [
    "CostModel",
    "DEFAULT_COST",
    "LivenessTable",
    "MemProfile",
    "RematPlan",
    "Split",
    "is_topological",
    "liveness",
    "memory_floor",
    "peak_memory",
    "rematerialize",
    "schedule",
]
