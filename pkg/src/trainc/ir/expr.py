"""Expression nodes, functions and modules.

Nodes use identity semantics: two ``Call`` objects with the same operator and
arguments are different nodes.  In dataflow form this is what makes sharing
explicit -- a value used twice is the *same* object referenced twice.

Compound nodes (``Call``, ``Tuple``, ``TupleGet``, ``ClosureCall``) carry the
bookkeeping that dataflow form needs to survive a round trip back to ANF: the
name and attributes of the variable they were bound to, their position in the
original let-sequence (``order_index``) and their type.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Any, Iterator, Union

import numpy as np

from .types import TensorType, TupleType, Type

AttrValue = Union[int, float, str]

_uids = itertools.count()


def _next_uid() -> int:
    return next(_uids)


class Form(enum.Enum):
    ANF = "anf"
    DATAFLOW = "dataflow"


@dataclass(frozen=True, eq=False)
class Expr:
    pass


@dataclass(frozen=True, eq=False)
class Var(Expr):
    name: str
    ty: Type | None = None
    attrs: dict[str, AttrValue] = field(default_factory=dict)

    def with_type(self, ty: Type | None) -> "Var":
        return Var(self.name, ty, dict(self.attrs))

    def with_attrs(self, **attrs: AttrValue) -> "Var":
        merged = dict(self.attrs)
        merged.update(attrs)
        return Var(self.name, self.ty, merged)

    def __repr__(self) -> str:
        return f"%{self.name}"


@dataclass(frozen=True, eq=False)
class Const(Expr):
    """A literal.  Scalars have ``ty=None`` and adopt the dtype of their context."""

    value: Any
    ty: TensorType | None = None
    path: str | None = None

    @property
    def is_scalar(self) -> bool:
        return self.ty is None

    def array(self) -> np.ndarray:
        assert self.ty is not None
        return np.asarray(self.value, dtype=self.ty.dtype.np).reshape(self.ty.shape)


@dataclass(frozen=True, eq=False)
class Node(Expr):
    name: str | None = field(default=None, kw_only=True)
    ty: Type | None = field(default=None, kw_only=True)
    node_attrs: dict[str, AttrValue] = field(default_factory=dict, kw_only=True)
    order_index: int | None = field(default=None, kw_only=True)
    uid: int = field(default_factory=_next_uid, kw_only=True)

    def operands(self) -> tuple[Expr, ...]:
        raise NotImplementedError

    @property
    def all_attrs(self) -> dict[str, AttrValue]:
        """Variable attributes plus ``order_index`` when present."""
        out = dict(self.node_attrs)
        if self.order_index is not None:
            out["order_index"] = self.order_index
        return out


@dataclass(frozen=True, eq=False)
class Call(Node):
    op: str
    args: tuple[Expr, ...]
    attrs: dict[str, AttrValue] = field(default_factory=dict)

    def operands(self) -> tuple[Expr, ...]:
        return self.args


@dataclass(frozen=True, eq=False)
class Tuple(Node):
    fields: tuple[Expr, ...]

    def operands(self) -> tuple[Expr, ...]:
        return self.fields


@dataclass(frozen=True, eq=False)
class TupleGet(Node):
    tuple_value: Expr
    index: int

    def operands(self) -> tuple[Expr, ...]:
        return (self.tuple_value,)


@dataclass(frozen=True, eq=False)
class ClosureCall(Node):
    fn: "FunctionIR"
    args: tuple[Expr, ...]

    def operands(self) -> tuple[Expr, ...]:
        return self.args


@dataclass(frozen=True, eq=False)
class Let(Expr):
    var: Var
    value: Expr
    body: Expr


@dataclass(frozen=True, eq=False)
class FunctionIR:
    name: str
    params: tuple[Var, ...]
    body: Expr
    form: Form = Form.ANF
    attrs: dict[str, AttrValue] = field(default_factory=dict)
    # dataflow form only: nodes whose value is never used (dead let-bindings),
    # kept as extra roots so that conversion back to ANF is lossless
    dead: tuple["Node", ...] = ()

    @property
    def ret_type(self) -> Type | None:
        if self.form is Form.ANF:
            _, ret = anf_bindings(self)
            return type_of(ret)
        return type_of(self.body)


@dataclass(frozen=True, eq=False)
class ModuleIR:
    functions: dict[str, FunctionIR]
    entry: str = "main"

    def __post_init__(self) -> None:
        if self.entry not in self.functions:
            raise ValueError(f"entry function {self.entry!r} not defined")

    @property
    def main(self) -> FunctionIR:
        return self.functions[self.entry]

    @classmethod
    def from_function(cls, fn: FunctionIR) -> "ModuleIR":
        """Module holding ``fn`` and every closure it (transitively) calls."""
        functions: dict[str, FunctionIR] = {}
        for c in collect_closures(fn):
            functions[c.name] = c
        functions[fn.name] = fn
        return cls(functions, fn.name)


Binding = tuple[Var, Expr]


def anf_bindings(fn: FunctionIR | Expr) -> tuple[list[Binding], Expr]:
    """Flatten a right-nested ``Let`` chain into ``(bindings, return_expr)``."""
    body = fn.body if isinstance(fn, FunctionIR) else fn
    out: list[Binding] = []
    while isinstance(body, Let):
        out.append((body.var, body.value))
        body = body.body
    return out, body


def build_lets(bindings: list[Binding], ret: Expr) -> Expr:
    body = ret
    for var, value in reversed(bindings):
        body = Let(var, value, body)
    return body


def make_anf(name: str, params, bindings: list[Binding], ret: Expr, attrs=None) -> FunctionIR:
    return FunctionIR(name, tuple(params), build_lets(bindings, ret), Form.ANF, dict(attrs or {}))


def type_of(e: Expr) -> Type | None:
    if isinstance(e, (Var, Const, Node)):
        return e.ty
    raise TypeError(f"no type for {type(e).__name__}")


def tensor_type(e: Expr) -> TensorType:
    ty = type_of(e)
    if not isinstance(ty, TensorType):
        raise TypeError(f"expected a tensor-typed expression, got {ty}")
    return ty


def value_operands(value: Expr) -> tuple[Expr, ...]:
    if isinstance(value, Node):
        return value.operands()
    return ()


def iter_var_uses(value: Expr) -> Iterator[Var]:
    """Variables referenced by one (atomic-argument) let value."""
    for a in value_operands(value):
        if isinstance(a, Var):
            yield a
        elif isinstance(a, Node):
            yield from iter_var_uses(a)


def collect_closures(fn: FunctionIR) -> list[FunctionIR]:
    """Closures reachable from ``fn`` in definition-before-use order."""
    seen: dict[int, FunctionIR] = {}
    order: list[FunctionIR] = []

    def visit_fn(f: FunctionIR) -> None:
        for node in iter_nodes(f):
            if isinstance(node, ClosureCall) and id(node.fn) not in seen:
                seen[id(node.fn)] = node.fn
                visit_fn(node.fn)
                order.append(node.fn)

    visit_fn(fn)
    return order


def iter_nodes(fn: FunctionIR) -> Iterator[Node]:
    """Every compound node of ``fn`` once, in either form."""
    seen: set[int] = set()
    if fn.form is Form.ANF:
        bindings, ret = anf_bindings(fn)
        roots = [v for _, v in bindings] + [ret]
    else:
        roots = [fn.body, *fn.dead]
    stack = list(reversed(roots))
    while stack:
        e = stack.pop()
        if not isinstance(e, Node) or id(e) in seen:
            continue
        seen.add(id(e))
        yield e
        stack.extend(reversed(e.operands()))


def fresh_namer(taken) -> "NameSupply":
    return NameSupply(set(taken))


class NameSupply:
    """Deterministic fresh variable names avoiding a taken set."""

    def __init__(self, taken: set[str]) -> None:
        self.taken = set(taken)
        self.counters: dict[str, int] = {}

    def __call__(self, prefix: str = "t") -> str:
        if prefix not in self.taken:
            self.taken.add(prefix)
            return prefix
        k = self.counters.get(prefix, 0)
        while True:
            name = f"{prefix}_{k}"
            k += 1
            if name not in self.taken:
                self.counters[prefix] = k
                self.taken.add(name)
                return name

    def reserve(self, name: str) -> None:
        self.taken.add(name)


def function_names(fn: FunctionIR) -> set[str]:
    names = {p.name for p in fn.params}
    if fn.form is Form.ANF:
        names.update(v.name for v, _ in anf_bindings(fn)[0])
    else:
        names.update(n.name for n in iter_nodes(fn) if n.name)
    return names
