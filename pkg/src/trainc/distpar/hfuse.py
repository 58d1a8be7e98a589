"""Horizontal fusion of collectives into batched calls.

Consecutive collectives of the same kind, none depending on another, can be
issued as one call over a flat buffer.  Each batched call becomes a closure
tagged ``dialect="comm"`` whose body lists the member collectives; its
parameter sizes form the segment table.
"""

from __future__ import annotations

import heapq

from ..ir.convert import ensure_anf
from ..ir.expr import (
    Call,
    ClosureCall,
    Expr,
    FunctionIR,
    NameSupply,
    Node,
    Tuple,
    TupleGet,
    Var,
    anf_bindings,
    function_names,
    make_anf,
)
from ..ir.infer import infer_types
from ..memsched import DEFAULT_COST, CostModel
from .timeline import DEFAULT_COMM, CommCost, is_collective, simulate_timeline


def _kind(value: Call) -> tuple:
    return (value.op, value.attrs.get("n_ranks"))


def collective_runs(fn: FunctionIR) -> list[list[int]]:
    """Binding indices of mergeable collective runs (length >= 1).

    A run continues while the next collective (in program order) has the same
    kind and does not transitively depend on any member already in the run.
    """
    bindings, _ = anf_bindings(ensure_anf(fn))
    index = {var.name: i for i, (var, _) in enumerate(bindings)}
    reach: list[int] = []  # bitset of binding indices each binding depends on
    for var, value in bindings:
        r = 0
        for a in value.operands():
            if isinstance(a, Var) and a.name in index:
                j = index[a.name]
                r |= reach[j] | (1 << j)
        reach.append(r)
    runs: list[list[int]] = []
    last_kind = None
    for i, (_, value) in enumerate(bindings):
        if not (isinstance(value, Call) and is_collective(value)):
            continue
        k = _kind(value)
        if runs and k == last_kind and not any(reach[i] >> j & 1 for j in runs[-1]):
            runs[-1].append(i)
        else:
            runs.append([i])
        last_kind = k
    return runs


def _comm_closure(name: str, members: list[Call]) -> FunctionIR:
    params = tuple(Var(f"s{j}", m.args[0].ty) for j, m in enumerate(members))
    bindings = []
    outs = []
    for j, (p, m) in enumerate(zip(params, members)):
        v = Var(f"r{j}")
        bindings.append((v, Call(m.op, (p,), dict(m.attrs))))
        outs.append(v)
    kind = members[0].op.rsplit(".", 1)[-1]
    fn = make_anf(name, params, bindings, Tuple(tuple(outs)), {"dialect": "comm", "collective": kind})
    return infer_types(fn)


def _apply(fn: FunctionIR, groups: list[list[int]]) -> FunctionIR:
    """Merge each group (binding indices) into one batched call, then restore a valid order."""
    bindings, ret = anf_bindings(fn)
    names = NameSupply(function_names(fn))
    members = {i: g for g in groups if len(g) > 1 for i in g}
    items: list[tuple[float, Var, Expr]] = []
    done: set[int] = set()
    k = 0
    for i, (var, value) in enumerate(bindings):
        if i not in members:
            items.append((float(i), var, value))
            continue
        g = members[i]
        if g[0] in done:
            continue
        done.add(g[0])
        calls = [bindings[j][1] for j in g]
        closure = _comm_closure(f"comm_{k}", calls)
        k += 1
        cvar = Var(names("comm"))
        at = float(g[-1])
        items.append((at, cvar, ClosureCall(closure, tuple(c.args[0] for c in calls))))
        for pos, j in enumerate(g):
            items.append((at + (pos + 1) / (len(g) + 1), bindings[j][0], TupleGet(cvar, pos)))
    return infer_types(make_anf(fn.name, fn.params, _stable_topo(items), ret, fn.attrs))


def _stable_topo(items: list[tuple[float, Var, Expr]]) -> list[tuple[Var, Expr]]:
    """Topological order that follows the priority keys as closely as possible."""
    producer = {id(v): n for n, (_, v, _) in enumerate(items)}
    deps: list[set[int]] = []
    users: dict[int, list[int]] = {}
    for n, (_, _, value) in enumerate(items):
        d = {producer[id(a)] for a in _vars(value) if id(a) in producer}
        deps.append(d)
        for p in d:
            users.setdefault(p, []).append(n)
    missing = [len(d) for d in deps]
    heap = [(items[n][0], n) for n in range(len(items)) if not missing[n]]
    heapq.heapify(heap)
    out = []
    while heap:
        _, n = heapq.heappop(heap)
        out.append((items[n][1], items[n][2]))
        for u in users.get(n, []):
            missing[u] -= 1
            if not missing[u]:
                heapq.heappush(heap, (items[u][0], u))
    assert len(out) == len(items), "dependency cycle while merging collectives"
    return out


def _vars(value: Expr):
    for a in value.operands():
        if isinstance(a, Var):
            yield a
        elif isinstance(a, Node):
            yield from _vars(a)


def horizontal_fuse_collectives(
    fn: FunctionIR,
    *,
    cost_aware: bool = True,
    cost: CostModel = DEFAULT_COST,
    comm: CommCost = DEFAULT_COMM,
) -> FunctionIR:
    """Batch mergeable collectives.

    Without ``cost_aware`` every run is merged whole.  With it, neighbouring
    members of a run are merged pairwise while the overlapped timeline's
    makespan does not grow: batching saves per-call latency but delays the
    earlier members until the last one is ready.
    """
    fn = infer_types(ensure_anf(fn))
    runs = collective_runs(fn)
    if not cost_aware:
        return _apply(fn, runs)
    groups = [[[i] for i in run] for run in runs]

    def makespan(gs) -> float:
        flat = [g for run in gs for g in run]
        return simulate_timeline(_apply(fn, flat), cost=cost, comm=comm).makespan

    current = makespan(groups)
    while True:
        best = None
        for r, run in enumerate(groups):
            for a in range(len(run) - 1):
                trial = [list(x) for x in groups]
                trial[r][a : a + 2] = [run[a] + run[a + 1]]
                ms = makespan(trial)
                if best is None or ms < best[0]:
                    best = (ms, trial)
        if best is None or best[0] > current:
            break
        current, groups = best
    return _apply(fn, [g for run in groups for g in run])


def collective_calls(fn: FunctionIR) -> int:
    """Collective calls one execution issues (a batched call counts once)."""
    return sum(1 for _, v in anf_bindings(ensure_anf(fn))[0] if is_collective(v))


def segment_table(closure: FunctionIR) -> list[tuple[int, int]]:
    """``(offset, length)`` of every member payload within the flat buffer."""
    out, off = [], 0
    for p in closure.params:
        out.append((off, p.ty.numel))
        off += p.ty.numel
    return out
