"""Typed functional IR in ANF and dataflow form."""

from .convert import ensure_anf, ensure_dataflow, to_anf, to_dataflow
from .expr import (
    Call,
    ClosureCall,
    Const,
    Expr,
    Form,
    FunctionIR,
    Let,
    ModuleIR,
    Node,
    Tuple,
    TupleGet,
    Var,
    anf_bindings,
    make_anf,
)
from .infer import infer_types
from .structural import structural_equal
from .text import parse_function, parse_text, print_function, print_text
from .types import DType, TensorType, TupleType, f16, f32
from .wellformed import check_wellformed, dead_bindings

__all__ = [
    "Call",
    "ClosureCall",
    "Const",
    "DType",
    "Expr",
    "Form",
    "FunctionIR",
    "Let",
    "ModuleIR",
    "Node",
    "TensorType",
    "Tuple",
    "TupleGet",
    "TupleType",
    "Var",
    "anf_bindings",
    "check_wellformed",
    "dead_bindings",
    "ensure_anf",
    "ensure_dataflow",
    "f16",
    "f32",
    "infer_types",
    "make_anf",
    "parse_function",
    "parse_text",
    "print_function",
    "print_text",
    "structural_equal",
    "to_anf",
    "to_dataflow",
]
