"""Lossless conversion between ANF and dataflow form.

ANF -> dataflow turns every let into a DAG node and records on the node what
the let carried: the variable name, its attributes, its type and its position
in the let sequence (``order_index``).  Dataflow -> ANF emits a topological
order -- the recorded one when every node still has it -- and rebinds each
node to a variable with the recorded name and attributes.

Bindings whose value is never used cannot hang off the DAG rooted at the
return value; they are kept as extra roots (``FunctionIR.dead``).
"""

from __future__ import annotations

import heapq

from ..errors import CycleError
from .expr import (
    Binding,
    Call,
    ClosureCall,
    Const,
    Expr,
    Form,
    FunctionIR,
    Node,
    Tuple,
    TupleGet,
    Var,
    anf_bindings,
    function_names,
    make_anf,
    NameSupply,
)

ORDER_INDEX = "order_index"


def rebuild_node(node: Node, operands: tuple[Expr, ...], **meta) -> Node:
    """Copy of ``node`` with new operands; metadata overridable by keyword."""
    kw = dict(
        name=node.name,
        ty=node.ty,
        node_attrs=dict(node.node_attrs),
        order_index=node.order_index,
    )
    kw.update(meta)
    if isinstance(node, Call):
        return Call(node.op, operands, dict(node.attrs), **kw)
    if isinstance(node, Tuple):
        return Tuple(operands, **kw)
    if isinstance(node, TupleGet):
        return TupleGet(operands[0], node.index, **kw)
    if isinstance(node, ClosureCall):
        return ClosureCall(node.fn, operands, **kw)
    raise TypeError(type(node).__name__)


def to_dataflow(fn: FunctionIR) -> FunctionIR:
    if fn.form is Form.DATAFLOW:
        return fn
    bindings, ret = anf_bindings(fn)
    env: dict[int, Expr] = {id(p): p for p in fn.params}

    def atom(e: Expr) -> Expr:
        if isinstance(e, Var):
            try:
                return env[id(e)]
            except KeyError:
                raise ValueError(f"free variable %{e.name} in {fn.name}") from None
        if isinstance(e, Const):
            return e
        if isinstance(e, Node):
            # nested (non-ANF) argument: convert structurally
            return rebuild_node(e, tuple(atom(a) for a in e.operands()))
        raise TypeError(f"unexpected {type(e).__name__} in ANF body")

    for idx, (var, value) in enumerate(bindings):
        if not isinstance(value, Node):
            raise ValueError(f"let %{var.name} binds an atom; not well-formed ANF")
        attrs = dict(var.attrs)
        attrs.pop(ORDER_INDEX, None)
        node = rebuild_node(
            value,
            tuple(atom(a) for a in value.operands()),
            name=var.name,
            ty=var.ty,
            node_attrs=attrs,
            order_index=idx,
        )
        env[id(var)] = node

    if isinstance(ret, Tuple):
        body: Expr = Tuple(tuple(atom(f) for f in ret.fields), ty=ret.ty)
    else:
        body = atom(ret)
    used = {id(a) for _, v in bindings for a in v.operands()}
    used.update(id(a) for a in (ret.fields if isinstance(ret, Tuple) else (ret,)))
    dead = tuple(env[id(var)] for var, _ in bindings if id(var) not in used)
    return FunctionIR(fn.name, fn.params, body, Form.DATAFLOW, dict(fn.attrs), dead)


def _is_ret_tuple(fn: FunctionIR) -> bool:
    return isinstance(fn.body, Tuple) and fn.body.name is None


def dataflow_nodes(fn: FunctionIR) -> list[Node]:
    """All let-worthy nodes reachable from the body, post-order; detects cycles."""
    roots = list(fn.body.fields) if _is_ret_tuple(fn) else [fn.body]
    roots += list(fn.dead)
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    out: list[Node] = []
    for root in roots:
        if not isinstance(root, Node) or state.get(id(root)) == 2:
            continue
        stack: list[tuple[Node, int]] = [(root, 0)]
        state[id(root)] = 1
        while stack:
            node, k = stack.pop()
            ops = node.operands()
            if k < len(ops):
                stack.append((node, k + 1))
                child = ops[k]
                if isinstance(child, Node):
                    s = state.get(id(child))
                    if s == 1:
                        raise CycleError(f"cycle through node {child.name or child.uid}")
                    if s is None:
                        state[id(child)] = 1
                        stack.append((child, 0))
            else:
                state[id(node)] = 2
                out.append(node)
    return out


def topo_order(nodes: list[Node]) -> list[Node]:
    """Deterministic topological order.

    When every node carries ``order_index`` the result is sorted by it (a
    valid order is then guaranteed to be reproduced); otherwise Kahn's
    algorithm runs with ties broken by ``(order_index, creation order)``,
    nodes without an index sorting after indexed ones of the same rank.
    """
    ids = {id(n) for n in nodes}
    indeg = {id(n): 0 for n in nodes}
    users: dict[int, list[Node]] = {id(n): [] for n in nodes}
    for n in nodes:
        seen = set()
        for a in n.operands():
            if isinstance(a, Node) and id(a) in ids and id(a) not in seen:
                seen.add(id(a))
                indeg[id(n)] += 1
                users[id(a)].append(n)

    all_indexed = all(n.order_index is not None for n in nodes)

    def key(n: Node):
        if all_indexed:
            return (n.order_index, n.uid)
        return (n.uid,)

    heap = [(key(n), i, n) for i, n in enumerate(nodes) if indeg[id(n)] == 0]
    heapq.heapify(heap)
    order: list[Node] = []
    counter = len(nodes)
    while heap:
        _, _, n = heapq.heappop(heap)
        order.append(n)
        for u in users[id(n)]:
            indeg[id(u)] -= 1
            if indeg[id(u)] == 0:
                counter += 1
                heapq.heappush(heap, (key(u), counter, u))
    if len(order) != len(nodes):
        raise CycleError("dataflow graph has a cycle")
    return order


def to_anf(fn: FunctionIR) -> FunctionIR:
    if fn.form is Form.ANF:
        return fn
    nodes = topo_order(dataflow_nodes(fn))
    names = NameSupply({p.name for p in fn.params} | {n.name for n in nodes if n.name})
    env: dict[int, Var] = {}
    bindings: list[Binding] = []

    def atom(e: Expr) -> Expr:
        if isinstance(e, Node):
            return env[id(e)]
        return e

    for node in nodes:
        name = node.name if node.name is not None else names("t")
        var = Var(name, node.ty, dict(node.node_attrs))
        value = rebuild_node(
            node,
            tuple(atom(a) for a in node.operands()),
            name=None,
            ty=None,
            node_attrs={},
            order_index=None,
        )
        env[id(node)] = var
        bindings.append((var, value))

    if _is_ret_tuple(fn):
        ret: Expr = Tuple(tuple(atom(f) for f in fn.body.fields), ty=fn.body.ty)
    else:
        ret = atom(fn.body)
    return make_anf(fn.name, fn.params, bindings, ret, fn.attrs)


def ensure_anf(fn: FunctionIR) -> FunctionIR:
    """ANF whose return value is an atom or a tuple of atoms."""
    return atomize_ret(to_anf(fn) if fn.form is Form.DATAFLOW else fn)


def _is_atom(e: Expr) -> bool:
    return isinstance(e, (Var, Const))


def atomize_ret(fn: FunctionIR) -> FunctionIR:
    """Let-bind compound return expressions (``fn f(..) { add(%a, %b) }``)."""
    bindings, ret = anf_bindings(fn)
    fields = ret.fields if isinstance(ret, Tuple) else (ret,)
    if all(_is_atom(f) for f in fields):
        return fn
    names = NameSupply(function_names(fn))
    bindings = list(bindings)

    def bind(e: Expr) -> Expr:
        if _is_atom(e):
            return e
        var = Var(names("r"), e.ty)
        bindings.append((var, e))
        return var

    if isinstance(ret, Tuple):
        new_ret: Expr = Tuple(tuple(bind(f) for f in fields), ty=ret.ty)
    else:
        new_ret = bind(ret)
    return make_anf(fn.name, fn.params, bindings, new_ret, fn.attrs)


def ensure_dataflow(fn: FunctionIR) -> FunctionIR:
    return to_dataflow(fn) if fn.form is Form.ANF else fn


def unused_names(fn: FunctionIR) -> NameSupply:
    return NameSupply(function_names(fn))
