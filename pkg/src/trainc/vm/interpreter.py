"""Reference interpreter: direct evaluation of ANF or dataflow functions.

This is the semantic oracle used throughout the test-suite.  It calls the same
kernels as the VM, so a program whose kernels are all ``ref`` produces the
same bits on both.

Evaluation is written as a generator that yields :class:`CollectiveRequest`
objects; a driver answers each with the per-payload results.  ``evaluate``
answers them locally, which is only valid for single-rank programs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Generator

import numpy as np

from ..backends import LOCAL, ExecContext, closure_kernel, op_kernel, split_op
from ..backends.collectives import run_collective
from ..ir.convert import atomize_ret, dataflow_nodes
from ..ir.expr import (
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
)
from ..oplib import COLLECTIVES


@dataclass
class CollectiveRequest:
    kind: str
    payloads: list[np.ndarray]
    attrs: dict = field(default_factory=dict)
    label: str = ""


def bind_inputs(fn: FunctionIR, inputs) -> list[np.ndarray]:
    """Order ``inputs`` (a sequence or a name->array mapping) by parameter."""
    if isinstance(inputs, dict):
        missing = [p.name for p in fn.params if p.name not in inputs]
        if missing:
            raise KeyError(f"missing inputs: {missing}")
        values = [inputs[p.name] for p in fn.params]
    else:
        values = list(inputs)
        if len(values) != len(fn.params):
            raise TypeError(f"{fn.name} takes {len(fn.params)} inputs, got {len(values)}")
    out = []
    for p, v in zip(fn.params, values):
        v = np.asarray(v)
        if p.ty is not None and tuple(v.shape) != p.ty.shape:
            raise TypeError(f"input %{p.name}: shape {v.shape} does not match {p.ty}")
        out.append(v)
    return out


def _collective_kind(node: Node) -> str | None:
    if isinstance(node, Call):
        base = split_op(node.op)[1]
        return base if base in COLLECTIVES else None
    return None


class _Evaluator:
    def __init__(self, ctx: ExecContext, precision: str | None, closure_cache: dict) -> None:
        self.ctx = ctx
        self.f64 = precision == "f64"
        self.closures = closure_cache

    def const(self, c: Const):
        if c.is_scalar:
            return float(c.value)
        arr = c.array()
        return arr.astype(np.float64) if self.f64 else arr

    def node(self, node: Node, args: list) -> Generator:
        """Evaluate one compound node; returns an array or a tuple of arrays."""
        if isinstance(node, Tuple):
            return tuple(args)
        if isinstance(node, TupleGet):
            return args[0][node.index]
        if isinstance(node, ClosureCall):
            fn = node.fn
            if fn.attrs.get("dialect") == "comm":
                kind = fn.attrs["collective"]
                results = yield CollectiveRequest(kind, list(args), _comm_attrs(fn), fn.name)
                return tuple(results)
            key = id(fn)
            if key not in self.closures:
                self.closures[key] = closure_kernel(fn)
            outs = self.closures[key](args, {}, self.ctx)
            return tuple(outs) if _is_tuple_fn(fn) else outs[0]
        kind = _collective_kind(node)
        if kind is not None:
            (result,) = yield CollectiveRequest(kind, [args[0]], dict(node.attrs), node.name or "")
            return result
        outs = op_kernel(node.op)(args, dict(node.attrs), self.ctx)
        return outs[0]


def _is_tuple_fn(fn: FunctionIR) -> bool:
    if fn.form is Form.ANF:
        return isinstance(anf_bindings(fn)[1], Tuple)
    return isinstance(fn.body, Tuple) and fn.body.name is None


def _comm_attrs(fn: FunctionIR) -> dict:
    """Per-segment attributes of a batched collective closure."""
    segs = []
    for _, value in anf_bindings(fn)[0]:
        if isinstance(value, Call):
            segs.append(dict(value.attrs))
    return {"segments": segs}


StepHook = Callable[[int, str, Expr, object], None]


def evaluate_gen(
    fn: FunctionIR,
    inputs,
    *,
    ctx: ExecContext = LOCAL,
    precision: str | None = None,
    on_step: StepHook | None = None,
    closure_cache: dict | None = None,
) -> Generator:
    ev = _Evaluator(ctx, precision, {} if closure_cache is None else closure_cache)
    values = bind_inputs(fn, inputs)
    if ev.f64:
        values = [v.astype(np.float64) for v in values]
    env: dict[int, object] = {id(p): v for p, v in zip(fn.params, values)}

    def atom(e: Expr):
        if isinstance(e, Const):
            return ev.const(e)
        return env[id(e)]

    if fn.form is Form.ANF:
        bindings, ret = anf_bindings(atomize_ret(fn))
        for i, (var, value) in enumerate(bindings):
            result = yield from ev.node(value, [atom(a) for a in value.operands()])
            env[id(var)] = result
            if on_step is not None:
                on_step(i, var.name, value, result)
        fields = ret.fields if isinstance(ret, Tuple) else (ret,)
        return [atom(f) for f in fields]

    for i, node in enumerate(dataflow_nodes(fn)):
        result = yield from ev.node(node, [atom(a) for a in node.operands()])
        env[id(node)] = result
        if on_step is not None:
            on_step(i, node.name or "", node, result)
    body = fn.body
    fields = body.fields if isinstance(body, Tuple) and body.name is None else (body,)
    return [atom(f) for f in fields]


def drive_local(gen: Generator):
    """Run an evaluation generator, answering collectives as a single rank."""
    try:
        req = next(gen)
        while True:
            results = _local_answer(req)
            req = gen.send(results)
    except StopIteration as stop:
        return stop.value


def _local_answer(req: CollectiveRequest) -> list[np.ndarray]:
    segs = req.attrs.get("segments")
    if segs is None:
        return run_collective(req.kind, [req.payloads[0]], req.attrs)
    return [run_collective(req.kind, [p], a)[0] for p, a in zip(req.payloads, segs)]


def evaluate(
    fn: FunctionIR,
    inputs,
    *,
    ctx: ExecContext = LOCAL,
    precision: str | None = None,
    on_step: StepHook | None = None,
) -> list[np.ndarray]:
    """Outputs of ``fn`` on ``inputs`` (the return tuple flattened to a list)."""
    return drive_local(evaluate_gen(fn, inputs, ctx=ctx, precision=precision, on_step=on_step))

