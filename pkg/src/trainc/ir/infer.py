"""Type inference driven by the registry's type relations."""

from __future__ import annotations

from ..errors import TypeInferenceError
from .expr import (
    Call,
    ClosureCall,
    Const,
    Expr,
    Form,
    FunctionIR,
    ModuleIR,
    Node,
    Tuple,
    TupleGet,
    Var,
    anf_bindings,
    make_anf,
)
from .convert import atomize_ret, rebuild_node
from .types import TensorType, TupleType, Type


class _Inferencer:
    def __init__(self, registry) -> None:
        self.reg = registry
        self.closures: dict[int, FunctionIR] = {}

    def node_type(self, node: Node, arg_types: list) -> Type:
        if isinstance(node, Call):
            if not self.reg.has_op(node.op):
                from ..errors import UnknownOp

                raise UnknownOp(f"unknown operator {node.op!r}")
            arity = self.reg.attr(node.op, "arity")
            if arity is not None and len(arg_types) != arity:
                raise TypeInferenceError(f"{node.op}: expected {arity} arguments, got {len(arg_types)}")
            return self.reg.type_rel(node.op)(arg_types, dict(node.attrs))
        if isinstance(node, Tuple):
            if any(t is None for t in arg_types):
                raise TypeInferenceError("tuple fields must be tensors")
            return TupleType(tuple(arg_types))
        if isinstance(node, TupleGet):
            (t,) = arg_types
            if not isinstance(t, TupleType):
                raise TypeInferenceError(f"projection .{node.index} of non-tuple {t}")
            if not 0 <= node.index < len(t.fields):
                raise TypeInferenceError(f"tuple index {node.index} out of range for {t}")
            return t.fields[node.index]
        if isinstance(node, ClosureCall):
            fn = self.closure(node.fn)
            if len(fn.params) != len(arg_types):
                raise TypeInferenceError(f"closure {fn.name}: arity mismatch")
            for p, t in zip(fn.params, arg_types):
                if p.ty != t:
                    raise TypeInferenceError(f"closure {fn.name}: parameter %{p.name}: {p.ty} given {t}")
            return fn.ret_type
        raise TypeError(type(node).__name__)

    def closure(self, fn: FunctionIR) -> FunctionIR:
        if id(fn) not in self.closures:
            self.closures[id(fn)] = self.function(fn)
        return self.closures[id(fn)]

    def atom_type(self, e: Expr, env: dict[int, Var]):
        if isinstance(e, Var):
            if id(e) not in env:
                raise TypeInferenceError(f"free variable %{e.name}")
            return env[id(e)].ty
        if isinstance(e, Const):
            return e.ty
        raise TypeInferenceError(f"unexpected {type(e).__name__} argument")

    def function(self, fn: FunctionIR) -> FunctionIR:
        for p in fn.params:
            if not isinstance(p.ty, TensorType):
                raise TypeInferenceError(f"parameter %{p.name} of {fn.name} is untyped")
        if fn.form is Form.ANF:
            return self.anf(fn)
        return self.dataflow(fn)

    def anf(self, fn: FunctionIR) -> FunctionIR:
        fn = atomize_ret(fn)
        env: dict[int, Var] = {id(p): p for p in fn.params}

        def sub(e: Expr) -> Expr:
            if isinstance(e, Var):
                if id(e) not in env:
                    raise TypeInferenceError(f"free variable %{e.name}")
                return env[id(e)]
            if isinstance(e, Node):
                return rebuild_node(e, tuple(sub(a) for a in e.operands()))
            return e

        bindings = []
        for var, value in anf_bindings(fn)[0]:
            if not isinstance(value, Node):
                raise TypeInferenceError(f"let %{var.name} binds an atom")
            value = sub(value)
            if isinstance(value, ClosureCall):
                value = ClosureCall(self.closure(value.fn), value.args)
            ty = self.node_type(value, [self._deep_type(a, env) for a in value.operands()])
            new_var = var.with_type(ty)
            env[id(var)] = new_var
            bindings.append((new_var, value))
        ret = anf_bindings(fn)[1]
        ret = sub(ret)
        if isinstance(ret, Tuple):
            ret = Tuple(ret.fields, ty=self.node_type(ret, [self._deep_type(a, env) for a in ret.fields]))
        return make_anf(fn.name, fn.params, bindings, ret, fn.attrs)

    def _deep_type(self, e: Expr, env):
        if isinstance(e, Node):
            # nested expression (not ANF); type it structurally
            return self.node_type(e, [self._deep_type(a, env) for a in e.operands()])
        if isinstance(e, Var):
            return e.ty
        return e.ty

    def dataflow(self, fn: FunctionIR) -> FunctionIR:
        memo: dict[int, Expr] = {}
        params = {id(p) for p in fn.params}

        def visit(e: Expr) -> Expr:
            if isinstance(e, Var):
                if id(e) not in params:
                    raise TypeInferenceError(f"free variable %{e.name}")
                return e
            if not isinstance(e, Node):
                return e
            if id(e) in memo:
                return memo[id(e)]
            ops = tuple(visit(a) for a in e.operands())
            ty = self.node_type(e, [a.ty for a in ops])
            node = rebuild_node(e, ops, ty=ty)
            if isinstance(node, ClosureCall):
                node = ClosureCall(
                    self.closure(e.fn),
                    ops,
                    name=node.name,
                    ty=ty,
                    node_attrs=node.node_attrs,
                    order_index=node.order_index,
                )
            memo[id(e)] = node
            return node

        body = visit(fn.body)
        dead = tuple(visit(d) for d in fn.dead)
        return FunctionIR(fn.name, fn.params, body, fn.form, dict(fn.attrs), dead)


def infer_types(obj: ModuleIR | FunctionIR, registry=None) -> ModuleIR | FunctionIR:
    """Annotate every variable (ANF) or node (dataflow) with its type.

    Idempotent.  Raises a :class:`TypeInferenceError` subclass on shape or
    dtype mismatches and unknown operators.
    """
    if registry is None:
        from ..opreg import default_registry

        registry = default_registry()
    inf = _Inferencer(registry)
    if isinstance(obj, FunctionIR):
        return inf.function(obj)
    main = inf.function(obj.main)
    out = ModuleIR.from_function(main)
    functions = dict(out.functions)
    for name, fn in obj.functions.items():
        if name not in functions:
            functions[name] = inf.closure(fn)
    ordered = {n: functions[n] for n in obj.functions if n in functions}
    ordered.update({n: f for n, f in functions.items() if n not in ordered})
    return ModuleIR(ordered, obj.entry)
