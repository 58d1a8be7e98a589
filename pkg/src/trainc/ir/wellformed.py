from __future__ import annotations

from .expr import (
    Call,
    ClosureCall,
    Const,
    Expr,
    Form,
    FunctionIR,
    Let,
    Node,
    Tuple,
    TupleGet,
    Var,
    anf_bindings,
)


def check_wellformed(fn: FunctionIR, registry=None) -> list[str]:
    """Diagnostics for every violated invariant of ``fn``'s declared form.

    Never raises; an empty list means well-formed.
    """
    if registry is None:
        from ..opreg import default_registry

        registry = default_registry()
    diags: list[str] = []
    seen_params: set[str] = set()
    for p in fn.params:
        if p.name in seen_params:
            diags.append(f"duplicate parameter %{p.name}")
        seen_params.add(p.name)

    def check_op(node: Node, where: str) -> None:
        if isinstance(node, Call) and not registry.has_op(node.op):
            diags.append(f"{where}: unregistered operator {node.op!r}")
        if isinstance(node, ClosureCall):
            for d in check_wellformed(node.fn, registry):
                diags.append(f"closure {node.fn.name}: {d}")

    if fn.form is Form.ANF:
        _check_anf(fn, diags, check_op)
    else:
        _check_dataflow(fn, diags, check_op)
    return diags


def _check_anf(fn: FunctionIR, diags: list[str], check_op) -> None:
    defined: dict[str, Var] = {p.name: p for p in fn.params}
    bindings, ret = anf_bindings(fn)
    used: set[str] = set()

    def check_atom(a: Expr, where: str) -> None:
        if isinstance(a, Var):
            used.add(a.name)
            if a.name not in defined:
                diags.append(f"{where}: use of %{a.name} before definition")
            elif defined[a.name] is not a:
                diags.append(f"{where}: %{a.name} does not refer to its binding")
        elif isinstance(a, Const):
            pass
        else:
            diags.append(f"{where}: non-atomic argument ({type(a).__name__})")

    for var, value in bindings:
        where = f"let %{var.name}"
        if isinstance(value, Let):
            diags.append(f"{where}: nested let")
        elif not isinstance(value, Node):
            diags.append(f"{where}: binds an atom instead of an expression")
        else:
            if isinstance(value, TupleGet) and not isinstance(value.tuple_value, Var):
                diags.append(f"{where}: non-atomic argument (projection of an expression)")
            else:
                for a in value.operands():
                    check_atom(a, where)
            if isinstance(value, Tuple):
                diags.append(f"{where}: tuple values are only allowed as return values")
            check_op(value, where)
        if var.name in defined:
            diags.append(f"{where}: duplicate variable %{var.name}")
        defined[var.name] = var

    if isinstance(ret, Var):
        check_atom(ret, "return")
    elif isinstance(ret, Tuple):
        for f in ret.fields:
            if not isinstance(f, Var):
                diags.append("return: tuple fields must be variables")
            else:
                check_atom(f, "return")
    else:
        diags.append(f"return: expected a variable or tuple of variables, got {type(ret).__name__}")


def _check_dataflow(fn: FunctionIR, diags: list[str], check_op) -> None:
    params = {id(p) for p in fn.params}
    seen: set[int] = set()
    stack: list[Expr] = [fn.body, *fn.dead]
    while stack:
        e = stack.pop()
        if id(e) in seen:
            continue
        seen.add(id(e))
        if isinstance(e, Let):
            diags.append("let binding in dataflow form")
            stack.extend([e.value, e.body])
        elif isinstance(e, Var):
            if id(e) not in params:
                diags.append(f"free variable %{e.name}")
        elif isinstance(e, Node):
            check_op(e, f"node {e.name or e.uid}")
            stack.extend(e.operands())
    try:
        from .convert import dataflow_nodes

        dataflow_nodes(fn)
    except Exception as exc:  # cycle
        diags.append(str(exc))


def dead_bindings(fn: FunctionIR) -> list[str]:
    """Names of ANF bindings whose value is never used (a lint, not an error)."""
    bindings, ret = anf_bindings(fn)
    used: set[int] = set()
    for _, value in bindings:
        if isinstance(value, Node):
            used.update(id(a) for a in value.operands() if isinstance(a, Var))
    if isinstance(ret, Var):
        used.add(id(ret))
    elif isinstance(ret, Tuple):
        used.update(id(f) for f in ret.fields)
    return [v.name for v, _ in bindings if id(v) not in used]
