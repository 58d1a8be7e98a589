"""Operator registry: base operators, dialect operators and dispatch.

A *base operator* owns the attribute table shared by every implementation:
arity, fusion category and the type relation.  A *dialect operator* registers
one backend's implementation of a base operator with an integer priority and
a device gate, and may override or extend the base attributes.  Attribute
lookup on a dialect operator checks, in order, its extras, its overrides and
finally the base table.
"""

from __future__ import annotations

import enum
import functools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .errors import DuplicateRegistration, UnimplementedOp, UnknownOp
from .ir.convert import rebuild_node
from .ir.expr import (
    Call,
    ClosureCall,
    Expr,
    Form,
    FunctionIR,
    Let,
    Node,
    Var,
    anf_bindings,
    make_anf,
)

log = logging.getLogger(__name__)


class OpCategory(enum.IntEnum):
    ELEMWISE = 0
    INJECTIVE = 1
    REDUCTION = 2
    OPAQUE = 3


TypeRel = Callable[[list, dict], Any]


@dataclass(frozen=True)
class BaseOp:
    name: str
    arity: int
    type_rel: TypeRel
    category: OpCategory
    attr_table: dict[str, Any] = field(default_factory=dict)

    def table(self) -> dict[str, Any]:
        out = {"arity": self.arity, "type_rel": self.type_rel, "category": self.category}
        out.update(self.attr_table)
        return out


@dataclass(frozen=True)
class DialectOp:
    dialect: str
    base: str
    priority: int
    device_gate: frozenset[str] = frozenset({"cpu"})
    overrides: dict[str, Any] = field(default_factory=dict)
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.dialect}.{self.base}"


@dataclass(frozen=True)
class DispatchConfig:
    device: str = "cpu"
    enabled_dialects: frozenset[str] = frozenset({"ref", "opt"})
    priority_overrides: dict[tuple[str, str], int] = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict) -> "DispatchConfig":
        dialects = obj.get("dialects", {"ref": True, "opt": True})
        overrides = {}
        for key, prio in obj.get("priority_overrides", {}).items():
            dialect, _, base = key.partition(".")
            if not base:
                raise ValueError(f"priority override key {key!r} must be dialect.op")
            overrides[(dialect, base)] = int(prio)
        return cls(
            device=obj.get("device", "cpu").lower(),
            enabled_dialects=frozenset(d for d, on in dialects.items() if on),
            priority_overrides=overrides,
        )

    def with_dialects(self, *dialects: str) -> "DispatchConfig":
        return DispatchConfig(self.device, frozenset(dialects), dict(self.priority_overrides))


class OpRegistry:
    def __init__(self) -> None:
        self.base_ops: dict[str, BaseOp] = {}
        self.dialect_ops: dict[tuple[str, str], DialectOp] = {}

    # registration
    def register_base_op(self, op: BaseOp) -> None:
        if op.name in self.base_ops:
            raise DuplicateRegistration(f"base operator {op.name!r} already registered")
        if "." in op.name:
            raise ValueError("base operator names may not contain '.'")
        self.base_ops[op.name] = op

    def register_dialect_op(self, op: DialectOp) -> None:
        if op.base not in self.base_ops:
            raise UnknownOp(f"dialect op {op.name!r} names unknown base {op.base!r}")
        key = (op.dialect, op.base)
        if key in self.dialect_ops:
            raise DuplicateRegistration(f"dialect operator {op.name!r} already registered")
        self.dialect_ops[key] = op

    # queries
    def split(self, name: str) -> tuple[str | None, str]:
        dialect, dot, base = name.rpartition(".")
        if not dot:
            return None, name
        return dialect, base

    def has_op(self, name: str) -> bool:
        dialect, base = self.split(name)
        if dialect is None:
            return base in self.base_ops
        return (dialect, base) in self.dialect_ops

    def base_op(self, name: str) -> BaseOp:
        _, base = self.split(name)
        try:
            return self.base_ops[base]
        except KeyError:
            raise UnknownOp(f"unknown operator {name!r}") from None

    def dialect_op(self, name: str) -> DialectOp:
        dialect, base = self.split(name)
        try:
            return self.dialect_ops[(dialect, base)]
        except KeyError:
            raise UnknownOp(f"unknown dialect operator {name!r}") from None

    def attr(self, name: str, key: str, default: Any = None) -> Any:
        dialect, base = self.split(name)
        if dialect is not None:
            dop = self.dialect_op(name)
            if key in dop.extras:
                return dop.extras[key]
            if key in dop.overrides:
                return dop.overrides[key]
        return self.base_op(base).table().get(key, default)

    def type_rel(self, name: str) -> TypeRel:
        return self.attr(name, "type_rel")

    def category(self, name: str) -> OpCategory:
        return self.attr(name, "category")

    def dialects(self) -> set[str]:
        return {d for d, _ in self.dialect_ops}

    def implementations(self, base: str) -> list[DialectOp]:
        return [op for (d, b), op in sorted(self.dialect_ops.items()) if b == base]

    def resolve(self, base: str, cfg: DispatchConfig) -> DialectOp:
        """Enabled, device-admissible implementation of maximal priority.

        Ties go to the lexicographically smallest dialect name.
        """
        best: tuple[int, str] | None = None
        chosen = None
        for op in self.implementations(base):
            if op.dialect not in cfg.enabled_dialects or cfg.device not in op.device_gate:
                continue
            prio = cfg.priority_overrides.get((op.dialect, base), op.priority)
            rank = (-prio, op.dialect)
            if best is None or rank < best:
                best, chosen = rank, op
        if chosen is None:
            raise UnimplementedOp(base, f"device={cfg.device}, dialects={sorted(cfg.enabled_dialects)}")
        return chosen


@functools.lru_cache(maxsize=None)
def default_registry() -> OpRegistry:
    from .oplib import build_default_registry

    return build_default_registry()


# ------------------------------------------------------------------ dispatch


def _dispatch_call(node: Call, cfg: DispatchConfig, reg: OpRegistry, shapes: str) -> str:
    dialect, base = reg.split(node.op)
    if dialect is not None:
        reg.dialect_op(node.op)
        return node.op
    try:
        return reg.resolve(base, cfg).name
    except UnimplementedOp as exc:
        raise UnimplementedOp(base, f"shapes {shapes}; {exc}") from None


def _shapes(node: Node) -> str:
    out = []
    for a in node.operands():
        ty = getattr(a, "ty", None)
        out.append(str(ty) if ty is not None else "scalar")
    return "(" + ", ".join(out) + ")"


def dispatch_pass(fn: FunctionIR, cfg: DispatchConfig, registry: OpRegistry | None = None) -> FunctionIR:
    """Rewrite every base-operator call to its resolved dialect operator.

    Fused closures are dispatched as a unit: their dialect tag already names
    the backend, so only the tag's availability is checked.
    """
    reg = registry or default_registry()

    def check_closure(c: ClosureCall) -> None:
        dialect = c.fn.attrs.get("dialect")
        # batched collectives run on the collective bus, not a kernel dialect
        if dialect is not None and dialect != "comm" and dialect not in cfg.enabled_dialects:
            raise UnimplementedOp(c.fn.name, f"closure dialect {dialect!r} disabled")

    if fn.form is Form.ANF:
        bindings, ret = anf_bindings(fn)
        out = []
        for var, value in bindings:
            if isinstance(value, Call):
                value = Call(_dispatch_call(value, cfg, reg, _shapes(value)), value.args, dict(value.attrs))
            elif isinstance(value, ClosureCall):
                check_closure(value)
            out.append((var, value))
        return make_anf(fn.name, fn.params, out, ret, fn.attrs)

    memo: dict[int, Expr] = {}

    def visit(e: Expr) -> Expr:
        if not isinstance(e, Node):
            return e
        if id(e) in memo:
            return memo[id(e)]
        ops = tuple(visit(a) for a in e.operands())
        if isinstance(e, Call):
            new = Call(
                _dispatch_call(e, cfg, reg, _shapes(e)),
                ops,
                dict(e.attrs),
                name=e.name,
                ty=e.ty,
                node_attrs=dict(e.node_attrs),
                order_index=e.order_index,
            )
        else:
            if isinstance(e, ClosureCall):
                check_closure(e)
            new = rebuild_node(e, ops)
        memo[id(e)] = new
        return new

    body = visit(fn.body)
    return FunctionIR(fn.name, fn.params, body, fn.form, dict(fn.attrs), tuple(visit(d) for d in fn.dead))
