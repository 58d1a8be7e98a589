"""Operator fusion: dialect patterns first, then category rules.

Patterns are rooted DAG templates registered per dialect with a priority.  The
pass applies them in descending priority, each over match roots in program
order, never letting two matches overlap.  The remaining base operators are
then grouped by category rules (elementwise chains, injective chains,
elementwise epilogues of reductions).  Every group of two or more operators
becomes a closure whose outputs are all the inner tensors used outside it, so
tensors the backward pass keeps alive never block fusion.

Groups never mix forward and backward operators of a training graph and
contracting a group to one node always leaves the graph acyclic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .errors import DuplicateRegistration, UnknownOp
from .ir.convert import ensure_dataflow, rebuild_node, topo_order, dataflow_nodes
from .ir.expr import (
    Call,
    ClosureCall,
    Const,
    Expr,
    Form,
    FunctionIR,
    NameSupply,
    Node,
    Tuple,
    TupleGet,
    Var,
    collect_closures,
    function_names,
    make_anf,
)
from .ir.types import TupleType
from .oplib import COLLECTIVES
from .opreg import OpCategory, OpRegistry, default_registry

E, I, R, O = OpCategory.ELEMWISE, OpCategory.INJECTIVE, OpCategory.REDUCTION, OpCategory.OPAQUE

COMMUTATIVE = frozenset({"add", "mul"})


def base_name(op: str) -> str:
    return op.rsplit(".", 1)[-1]


# ------------------------------------------------------------------ patterns


@dataclass(frozen=True)
class PNode:
    """Template node; ``None`` inputs are wildcards."""

    op: str
    inputs: tuple["PNode | None", ...] = ()
    dtype: str | None = None

    def ops(self) -> list[str]:
        out = [self.op]
        for i in self.inputs:
            if i is not None:
                out += i.ops()
        return out


@dataclass(frozen=True)
class FusionPattern:
    name: str
    dialect: str
    priority: int
    root: PNode
    constraint: Callable[[list[Call]], bool] | None = None


def gemm_epilogue(activation: str, priority: int) -> FusionPattern:
    tmpl = PNode(activation, (PNode("add", (PNode("matmul", (None, None)), None)),))
    return FusionPattern(f"opt.matmul_add_{activation}", "opt", priority, tmpl)


class PatternRegistry:
    def __init__(self, ops: OpRegistry | None = None) -> None:
        self.ops = ops or default_registry()
        self.patterns: dict[str, FusionPattern] = {}

    def register_pattern(self, p: FusionPattern) -> None:
        if p.name in self.patterns:
            raise DuplicateRegistration(f"fusion pattern {p.name!r} already registered")
        if p.dialect not in self.ops.dialects():
            raise UnknownOp(f"pattern {p.name!r}: unknown dialect {p.dialect!r}")
        for op in p.root.ops():
            if op not in self.ops.base_ops:
                raise UnknownOp(f"pattern {p.name!r} names unregistered operator {op!r}")
        if any(q.dialect == p.dialect and q.priority == p.priority for q in self.patterns.values()):
            raise DuplicateRegistration(f"priority {p.priority} already used in dialect {p.dialect!r}")
        self.patterns[p.name] = p

    def ordered(self) -> list[FusionPattern]:
        return sorted(self.patterns.values(), key=lambda p: (-p.priority, p.name))


def default_patterns() -> PatternRegistry:
    reg = PatternRegistry()
    reg.register_pattern(gemm_epilogue("relu", 30))
    reg.register_pattern(gemm_epilogue("tanh", 29))
    return reg


# ------------------------------------------------------------------ rules


@dataclass(frozen=True)
class FusionRuleSet:
    """Producer/consumer category pairs that may share a closure."""

    dialect: str = "ref"
    priority: int = 10
    edges: frozenset = frozenset({(E, E), (E, I), (I, E), (I, I), (R, E)})
    max_reductions: int = 1

    def allows(self, producer: OpCategory, consumer: OpCategory) -> bool:
        return (producer, consumer) in self.edges


DEFAULT_RULES = FusionRuleSet()


def absorbs_elemwise_producer(op: str, rules: FusionRuleSet = DEFAULT_RULES, registry=None) -> bool:
    """Whether a consumer ``op`` can take an elementwise producer (e.g. a cast) into its closure."""
    reg = registry or default_registry()
    if base_name(op) in COLLECTIVES:
        return False
    return rules.allows(E, reg.category(op))


@dataclass
class FusionConfig:
    enabled: bool = True
    max_group: int = 16
    disable_patterns: tuple[str, ...] = ()
    dialects: frozenset[str] = frozenset({"ref", "opt"})
    reject_materialized: bool = False

    @classmethod
    def from_json(cls, obj: dict, dialects=None) -> "FusionConfig":
        return cls(
            enabled=bool(obj.get("enabled", True)),
            max_group=int(obj.get("max_group", 16)),
            disable_patterns=tuple(obj.get("disable_patterns", ())),
            dialects=frozenset(dialects) if dialects is not None else frozenset({"ref", "opt"}),
            reject_materialized=bool(obj.get("reject_materialized", False)),
        )


# ------------------------------------------------------------------ graph analysis


@dataclass
class _Graph:
    nodes: list[Node]
    pos: dict[int, int]
    users: dict[int, list[Node]]
    roots: set[int]
    phase: dict[int, int]


def _roots(fn: FunctionIR) -> list[Expr]:
    body = fn.body
    out = list(body.fields) if isinstance(body, Tuple) and body.name is None else [body]
    return out + list(fn.dead)


def _analyse(fn: FunctionIR) -> _Graph:
    nodes = topo_order(dataflow_nodes(fn))
    pos = {id(n): i for i, n in enumerate(nodes)}
    users: dict[int, list[Node]] = {id(n): [] for n in nodes}
    for n in nodes:
        for a in dict.fromkeys(a for a in n.operands() if isinstance(a, Node)):
            users[id(a)].append(n)
    roots = {id(r) for r in _roots(fn) if isinstance(r, Node)}
    fwd = forward_ids(nodes)
    phase = {id(n): 0 if (fwd is None or id(n) in fwd) else 1 for n in nodes}
    return _Graph(nodes, pos, users, roots, phase)


def forward_ids(nodes: list[Node]) -> set[int] | None:
    """Ids of the loss node and its ancestors; ``None`` when there is no loss."""
    loss = next((n for n in nodes if n.name == "loss"), None)
    if loss is None:
        return None
    seen, stack = set(), [loss]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        stack.extend(a for a in n.operands() if isinstance(a, Node))
    return seen


def materialization_set(fn_training: FunctionIR) -> frozenset[str]:
    """Names of forward tensors (parameters included) read by a backward operator."""
    fn = ensure_dataflow(fn_training)
    nodes = topo_order(dataflow_nodes(fn))
    fwd = forward_ids(nodes)
    if fwd is None:
        return frozenset()
    out = set()
    for n in nodes:
        if id(n) in fwd:
            continue
        for a in n.operands():
            if isinstance(a, Node) and id(a) in fwd:
                out.add(a.name)
            elif isinstance(a, Var):
                out.add(a.name)
    return frozenset(out)


def _category(node: Node, reg: OpRegistry) -> OpCategory | None:
    if not isinstance(node, Call):
        return None
    if base_name(node.op) in COLLECTIVES:
        return O
    return reg.category(node.op)


class _Groups:
    def __init__(self) -> None:
        self.group_of: dict[int, int] = {}
        self.members: dict[int, list[Node]] = {}
        self.locked: set[int] = set()
        self.next_id = 0

    def new(self, nodes: list[Node], locked: bool = False) -> int:
        gid = self.next_id
        self.next_id += 1
        self.members[gid] = list(nodes)
        for n in nodes:
            self.group_of[id(n)] = gid
        if locked:
            self.locked.add(gid)
        return gid

    def merge(self, a: int, b: int) -> int:
        keep, drop = min(a, b), max(a, b)
        for n in self.members.pop(drop):
            self.group_of[id(n)] = keep
            self.members[keep].append(n)
        return keep

    def closure_of(self, node: Node) -> list[Node]:
        gid = self.group_of.get(id(node))
        return [node] if gid is None else self.members[gid]


def _creates_cycle(members: list[Node], g: _Graph, groups: _Groups) -> bool:
    """Would contracting ``members`` (given the existing groups) close a cycle?"""
    inside = {id(n) for n in members}
    stack = [u for n in members for u in g.users[id(n)] if id(u) not in inside]
    seen: set[int] = set()
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        if id(n) in inside:
            return True
        for m in groups.closure_of(n):
            seen.add(id(m))
            for u in g.users[id(m)]:
                if id(u) in inside:
                    return True
                if id(u) not in seen:
                    stack.append(u)
    return False


# ------------------------------------------------------------------ matching


def _match(t: PNode, node: Expr, taken: set[int], bound: list[Call], wild: list[Expr]) -> bool:
    """Match template ``t`` at ``node``; matched calls go to ``bound``, wildcard operands to ``wild``."""
    if not isinstance(node, Call) or base_name(node.op) != t.op or id(node) in taken:
        return False
    if t.dtype is not None and str(node.ty.dtype) != t.dtype:
        return False
    if any(b is node for b in bound):
        return False
    mark, wmark = len(bound), len(wild)
    bound.append(node)
    args = list(node.args)
    orders = [args]
    if t.op in COMMUTATIVE and len(args) == 2:
        orders.append(args[::-1])
    for order in orders:
        del bound[mark + 1 :]
        del wild[wmark:]
        ok = True
        for sub, a in zip(t.inputs, order):
            if sub is None:
                if not isinstance(a, (Var, Node)):
                    ok = False
                    break
                wild.append(a)
            elif not _match(sub, a, taken, bound, wild):
                ok = False
                break
        if ok:
            return True
    del bound[mark:]
    del wild[wmark:]
    return False


def find_matches(fn: FunctionIR, pattern: FusionPattern, taken: set[int] | None = None) -> list[list[Call]]:
    """All matches of ``pattern`` in root order, ignoring overlap (for inspection and tests)."""
    g = _analyse(ensure_dataflow(fn))
    out = []
    for n in g.nodes:
        bound: list[Call] = []
        if _match(pattern.root, n, taken or set(), bound, []):
            out.append(bound)
    return out


# ------------------------------------------------------------------ the pass


def fuse_pass(
    fn: FunctionIR,
    patterns: PatternRegistry | None = None,
    rules: FusionRuleSet | None = DEFAULT_RULES,
    cfg: FusionConfig | None = None,
    registry: OpRegistry | None = None,
) -> FunctionIR:
    """Fuse ``fn`` and return it in dataflow form."""
    cfg = cfg or FusionConfig()
    fn = ensure_dataflow(fn)
    if not cfg.enabled:
        return fn
    reg = registry or default_registry()
    patterns = default_patterns() if patterns is None else patterns
    g = _analyse(fn)
    mat = materialization_set(fn) if cfg.reject_materialized else frozenset()
    groups = _Groups()
    dialect_of: dict[int, tuple[str, str]] = {}

    for pat in patterns.ordered():
        if pat.name in cfg.disable_patterns or pat.dialect not in cfg.dialects:
            continue
        for root in g.nodes:
            bound: list[Call] = []
            wild: list[Expr] = []
            if not _match(pat.root, root, set(groups.group_of), bound, wild):
                continue
            inside = {id(b) for b in bound}
            if any(id(a) in inside for a in wild):
                continue
            if len({g.phase[id(b)] for b in bound}) != 1:
                continue
            if mat and any(b.name in mat for b in bound if b is not root):
                continue
            if pat.constraint is not None and not pat.constraint(bound):
                continue
            if _creates_cycle(bound, g, groups):
                continue
            gid = groups.new(sorted(bound, key=lambda n: g.pos[id(n)]), locked=True)
            dialect_of[gid] = (pat.dialect, pat.name)

    if rules is not None and rules.dialect in cfg.dialects:
        cat = {id(n): _category(n, reg) for n in g.nodes}
        for c in g.nodes:
            cc = cat[id(c)]
            if cc is None or cc is O or groups.group_of.get(id(c)) in groups.locked:
                continue
            for p in dict.fromkeys(a for a in c.operands() if isinstance(a, Node)):
                pc = cat[id(p)]
                if pc is None or not rules.allows(pc, cc):
                    continue
                gp, gc = groups.group_of.get(id(p)), groups.group_of.get(id(c))
                if gp is not None and gp in groups.locked:
                    continue
                if gp is not None and gp == gc:
                    continue
                if g.phase[id(p)] != g.phase[id(c)] or (mat and p.name in mat):
                    continue
                merged = groups.closure_of(p) + groups.closure_of(c)
                if len(merged) > cfg.max_group:
                    continue
                if sum(1 for n in merged if cat[id(n)] is R) > rules.max_reductions:
                    continue
                if _creates_cycle(merged, g, groups):
                    continue
                if gp is None:
                    gp = groups.new([p])
                if gc is None:
                    gc = groups.new([c])
                gid = groups.merge(gp, gc)
                dialect_of[gid] = (rules.dialect, "rules")
                dialect_of.pop(max(gp, gc), None)

    return _rebuild(fn, g, groups, dialect_of)


def _rebuild(fn: FunctionIR, g: _Graph, groups: _Groups, dialect_of: dict) -> FunctionIR:
    taken_fn = {c.name for c in collect_closures(fn)} | {fn.name}
    names = NameSupply(function_names(fn) | taken_fn)
    fused = {gid: sorted(ms, key=lambda n: g.pos[id(n)]) for gid, ms in groups.members.items() if len(ms) > 1}

    # units: one per fused group or standalone node
    unit_of: dict[int, int] = {}
    units: list[list[Node]] = []
    for n in g.nodes:
        gid = groups.group_of.get(id(n))
        if gid in fused:
            if fused[gid][0] is n:
                for m in fused[gid]:
                    unit_of[id(m)] = len(units)
                units.append(fused[gid])
        else:
            unit_of[id(n)] = len(units)
            units.append([n])
    order = _unit_order(units, unit_of, g)

    memo: dict[int, Expr] = {}
    counter = 0
    closure_no = 0

    def mapped(e: Expr) -> Expr:
        return memo[id(e)] if isinstance(e, Node) else e

    for u in order:
        members = units[u]
        if len(members) == 1:
            n = members[0]
            memo[id(n)] = rebuild_node(n, tuple(mapped(a) for a in n.operands()), order_index=counter)
            counter += 1
            continue
        gid = groups.group_of[id(members[0])]
        dialect, pattern = dialect_of[gid]
        while f"fused_{closure_no}" in taken_fn:
            closure_no += 1
        cname = f"fused_{closure_no}"
        taken_fn.add(cname)
        closure, ext_args, outs = _make_closure(cname, dialect, pattern, members, g)
        args = tuple(mapped(a) for a in ext_args)
        if len(outs) == 1:
            (o,) = outs
            call = ClosureCall(closure, args, name=o.name, ty=o.ty, node_attrs=dict(o.node_attrs), order_index=counter)
            counter += 1
            memo[id(o)] = call
            continue
        call = ClosureCall(
            closure, args, name=names(cname), ty=TupleType(tuple(o.ty for o in outs)), order_index=counter
        )
        counter += 1
        for k, o in enumerate(outs):
            memo[id(o)] = TupleGet(call, k, name=o.name, ty=o.ty, node_attrs=dict(o.node_attrs), order_index=counter)
            counter += 1

    body = fn.body
    if isinstance(body, Tuple) and body.name is None:
        new_body: Expr = Tuple(tuple(mapped(f) for f in body.fields), ty=body.ty)
    else:
        new_body = mapped(body)
    dead = tuple(dict.fromkeys(mapped(d) for d in fn.dead))
    return FunctionIR(fn.name, fn.params, new_body, Form.DATAFLOW, dict(fn.attrs), dead)


def _unit_order(units: list[list[Node]], unit_of: dict[int, int], g: _Graph) -> list[int]:
    import heapq

    deps: list[set[int]] = [set() for _ in units]
    for u, members in enumerate(units):
        for m in members:
            for a in m.operands():
                if isinstance(a, Node) and unit_of[id(a)] != u:
                    deps[u].add(unit_of[id(a)])
    users: list[list[int]] = [[] for _ in units]
    for u, ds in enumerate(deps):
        for d in ds:
            users[d].append(u)
    indeg = [len(d) for d in deps]
    key = [min(g.pos[id(m)] for m in ms) for ms in units]
    heap = [(key[u], u) for u in range(len(units)) if indeg[u] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, u = heapq.heappop(heap)
        out.append(u)
        for v in users[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, (key[v], v))
    assert len(out) == len(units), "fusion produced a cyclic group graph"
    return out


def _make_closure(name: str, dialect: str, pattern: str, members: list[Node], g: _Graph):
    inside = {id(m) for m in members}
    ext: list[Expr] = []
    params: dict[int, Var] = {}
    env: dict[int, Var] = {}
    local = NameSupply(set())

    def operand(a: Expr) -> Expr:
        if isinstance(a, Const):
            return a
        if id(a) in inside:
            return env[id(a)]
        if id(a) not in params:
            params[id(a)] = Var(local("p"), a.ty)
            ext.append(a)
        return params[id(a)]

    bindings = []
    for m in members:
        args = tuple(operand(a) for a in m.operands())
        if isinstance(m, Call):
            value: Node = Call(base_name(m.op), args, dict(m.attrs))
        else:
            value = rebuild_node(m, args, name=None, ty=None, node_attrs={}, order_index=None)
        var = Var(local(m.name or "t"), m.ty)
        env[id(m)] = var
        bindings.append((var, value))
    outs = [m for m in members if id(m) in g.roots or any(id(u) not in inside for u in g.users[id(m)])]
    if len(outs) == 1:
        ret: Expr = env[id(outs[0])]
    else:
        ret = Tuple(tuple(env[id(o)] for o in outs), ty=TupleType(tuple(o.ty for o in outs)))
    attrs = {"dialect": dialect, "pattern": pattern}
    closure = make_anf(name, list(params.values()), bindings, ret, attrs)
    return closure, ext, outs


# ------------------------------------------------------------------ queries


def kernel_count(fn: FunctionIR) -> int:
    """Kernel invocations of one execution: calls plus closure calls."""
    return sum(1 for n in dataflow_nodes(ensure_dataflow(fn)) if isinstance(n, (Call, ClosureCall)))


def closures_of(fn: FunctionIR) -> list[ClosureCall]:
    return [n for n in dataflow_nodes(ensure_dataflow(fn)) if isinstance(n, ClosureCall)]


def fusion_equivalence_check(fn: FunctionIR, fn_fused: FunctionIR, inputs, dispatch=None) -> float:
    """Max relative error between the VM outputs of ``fn`` and ``fn_fused``."""
    from .ir.convert import ensure_anf
    from .opreg import DispatchConfig, dispatch_pass
    from .testing import max_rel_error
    from .vm.bytecode import compile_bytecode
    from .vm.machine import run

    cfg = dispatch or DispatchConfig()
    outs = []
    for f in (fn, fn_fused):
        f = ensure_anf(dispatch_pass(ensure_dataflow(f), cfg))
        outs.append(run(compile_bytecode(f), inputs))
    return max_rel_error(outs[1], outs[0])
