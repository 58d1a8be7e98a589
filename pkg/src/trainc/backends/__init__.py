"""Kernel implementations for the ``ref`` and ``opt`` dialects."""

from __future__ import annotations

from ..errors import UnimplementedOp
from ..ir.convert import ensure_anf
from ..ir.expr import Call, Const, FunctionIR, Tuple, TupleGet, Var, anf_bindings
from ..oplib import COLLECTIVES
from .opt import OPT_KERNELS, compile_epilogue
from .ref import LOCAL, REF_KERNELS, ExecContext, Kernel

__all__ = [
    "ExecContext",
    "Kernel",
    "LOCAL",
    "closure_kernel",
    "op_kernel",
    "split_op",
]

_DIALECT_KERNELS = {"ref": REF_KERNELS, "opt": OPT_KERNELS}


def split_op(name: str) -> tuple[str | None, str]:
    if "." in name:
        dialect, base = name.split(".", 1)
        return dialect, base
    return None, name


def op_kernel(name: str) -> Kernel:
    """Kernel for a (possibly dialect-qualified) operator; base ops run on ``ref``."""
    dialect, base = split_op(name)
    if base in COLLECTIVES:
        raise UnimplementedOp(name, "collectives are executed by the collective bus")
    table = _DIALECT_KERNELS.get(dialect or "ref")
    if table is None or base not in table:
        raise UnimplementedOp(name, "no kernel")
    return table[base]


def closure_kernel(fn: FunctionIR) -> Kernel:
    """Build the kernel for a fused closure according to its dialect tag."""
    dialect = fn.attrs.get("dialect", "ref")
    if dialect == "opt":
        return compile_epilogue(fn)
    if dialect != "ref":
        raise UnimplementedOp(fn.name, f"no closure compiler for dialect {dialect!r}")
    return _body_runner(ensure_anf(fn))


def _body_runner(fn: FunctionIR) -> Kernel:
    """Run the closure body op by op with reference kernels (bit-identical to unfused)."""
    bindings, ret = anf_bindings(fn)
    steps = []
    for var, value in bindings:
        if isinstance(value, Call):
            steps.append((var, op_kernel(value.op), value.args, dict(value.attrs)))
        elif isinstance(value, TupleGet):
            steps.append((var, None, (value.tuple_value,), {"index": value.index}))
        else:
            raise UnimplementedOp(fn.name, f"closure body contains {type(value).__name__}")
    fields = ret.fields if isinstance(ret, Tuple) else (ret,)

    def kernel(args, attrs, ctx):
        env = {id(p): a for p, a in zip(fn.params, args)}

        def val(e):
            return e.value if isinstance(e, Const) and e.is_scalar else (
                e.array() if isinstance(e, Const) else env[id(e)]
            )

        for var, k, operands, kattrs in steps:
            if k is None:
                env[id(var)] = val(operands[0])[kattrs["index"]]
            else:
                outs = k([val(a) for a in operands], kattrs, ctx)
                env[id(var)] = outs[0] if len(outs) == 1 else tuple(outs)
        return [val(f) for f in fields]

    return kernel
