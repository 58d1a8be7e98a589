"""Structural equality, independent of node identity."""

from __future__ import annotations

import numpy as np

from .expr import (
    Call,
    ClosureCall,
    Const,
    Expr,
    FunctionIR,
    ModuleIR,
    Node,
    Tuple,
    TupleGet,
    Var,
)
from .convert import to_anf
from .expr import anf_bindings


def _attrs_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    for k in a:
        x, y = a[k], b[k]
        if type(x) is not type(y):
            return False
        if isinstance(x, float) and np.isnan(x) and np.isnan(y):
            continue
        if x != y:
            return False
    return True


def _const_equal(a: Const, b: Const) -> bool:
    if a.is_scalar != b.is_scalar or a.path != b.path:
        return False
    if a.is_scalar:
        return np.float64(a.value).tobytes() == np.float64(b.value).tobytes()
    return a.ty == b.ty and a.array().tobytes() == b.array().tobytes()


def _expr_equal(a: Expr, b: Expr, fa: dict, fb: dict) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, Var):
        return a.name == b.name
    if isinstance(a, Const):
        return _const_equal(a, b)
    if isinstance(a, Call):
        if a.op != b.op or not _attrs_equal(a.attrs, b.attrs):
            return False
    elif isinstance(a, TupleGet):
        if a.index != b.index:
            return False
    elif isinstance(a, ClosureCall):
        if not _fn_equal(a.fn, b.fn):
            return False
    elif not isinstance(a, (Tuple,)):
        return False
    oa, ob = a.operands(), b.operands()
    return len(oa) == len(ob) and all(_expr_equal(x, y, fa, fb) for x, y in zip(oa, ob))


def _fn_equal(a: FunctionIR, b: FunctionIR) -> bool:
    a, b = to_anf(a), to_anf(b)
    if a.name != b.name or not _attrs_equal(a.attrs, b.attrs) or len(a.params) != len(b.params):
        return False
    for p, q in zip(a.params, b.params):
        if p.name != q.name or p.ty != q.ty or not _attrs_equal(p.attrs, q.attrs):
            return False
    ba, ra = anf_bindings(a)
    bb, rb = anf_bindings(b)
    if len(ba) != len(bb):
        return False
    for (va, xa), (vb, xb) in zip(ba, bb):
        if va.name != vb.name or not _attrs_equal(va.attrs, vb.attrs):
            return False
        if va.ty is not None and vb.ty is not None and va.ty != vb.ty:
            return False
        if not _expr_equal(xa, xb, {}, {}):
            return False
    return _expr_equal(ra, rb, {}, {})


def structural_equal(a: ModuleIR | FunctionIR, b: ModuleIR | FunctionIR) -> bool:
    if isinstance(a, FunctionIR) and isinstance(b, FunctionIR):
        return _fn_equal(a, b)
    if isinstance(a, ModuleIR) and isinstance(b, ModuleIR):
        return (
            a.entry == b.entry
            and list(a.functions) == list(b.functions)
            and all(_fn_equal(a.functions[k], b.functions[k]) for k in a.functions)
        )
    return False
