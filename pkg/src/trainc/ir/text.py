"""Textual IR: printer and recursive-descent parser.

Grammar (whitespace-insensitive, ``#`` starts a line comment)::

    module   := fn+
    fn       := "fn" NAME ("@" attrs)? "(" params? ")" "{" body "}"
    params   := param ("," param)*
    param    := "%" NAME ("@" attrs)? ":" type
    type     := ("f32"|"f16") "[" INT ("," INT)* "]"
    body     := letstmt* expr
    letstmt  := "let" "%" NAME ("@" attrs)? "=" expr ";"
    expr     := NAME "(" args? ")" | "(" args ")" | "%" NAME "." INT
              | "%" NAME | CONST
    args     := arg ("," arg)*
    arg      := expr | NAME "=" VALUE          # keyword args carry call attrs
    attrs    := "{" NAME "=" VALUE ("," NAME "=" VALUE)* "}"
    CONST    := FLOAT | "tensor" "(" type ";" FLOAT ("," FLOAT)* ")"
              | "tensor" "(" STRING ")"       # path to a TNSR file

Calling a name that was defined earlier in the module as a function produces
a closure call; any other name is an operator.
"""

from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np

from ..errors import ParseError
from .expr import (
    AttrValue,
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
from .types import DType, TensorType

# ---------------------------------------------------------------- printing


def format_float(v: float) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


_ESCAPES = {"\\": "\\\\", '"': '\\"', "\n": "\\n", "\t": "\\t"}


def format_value(v: AttrValue) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    if isinstance(v, str):
        return '"' + "".join(_ESCAPES.get(c, c) for c in v) + '"'
    raise TypeError(f"attribute values must be int, float or str, got {type(v).__name__}")


def format_attrs(attrs: dict[str, AttrValue]) -> str:
    return "{" + ", ".join(f"{k}={format_value(v)}" for k, v in attrs.items()) + "}"


def _format_const(c: Const) -> str:
    if c.is_scalar:
        return format_float(c.value)
    if c.path is not None:
        return f"tensor({format_value(c.path)})"
    flat = c.array().reshape(-1)
    return f"tensor({c.ty}; " + ", ".join(format_float(x) for x in flat.tolist()) + ")"


def format_expr(e: Expr) -> str:
    if isinstance(e, Var):
        return f"%{e.name}"
    if isinstance(e, Const):
        return _format_const(e)
    if isinstance(e, Call):
        parts = [format_expr(a) for a in e.args]
        parts += [f"{k}={format_value(v)}" for k, v in e.attrs.items()]
        return f"{e.op}({', '.join(parts)})"
    if isinstance(e, ClosureCall):
        return f"{e.fn.name}({', '.join(format_expr(a) for a in e.args)})"
    if isinstance(e, Tuple):
        return "(" + ", ".join(format_expr(f) for f in e.fields) + ")"
    if isinstance(e, TupleGet):
        if not isinstance(e.tuple_value, Var):
            raise ValueError("tuple projection must apply to a variable in text form")
        return f"%{e.tuple_value.name}.{e.index}"
    if isinstance(e, Let):
        raise ValueError("nested let has no textual form")
    raise TypeError(f"cannot print {type(e).__name__}")


def _format_param(p: Var) -> str:
    if not isinstance(p.ty, TensorType):
        raise ValueError(f"parameter %{p.name} needs a tensor type to be printed")
    attrs = f" @{format_attrs(p.attrs)}" if p.attrs else ""
    return f"%{p.name}{attrs}: {p.ty}"


def print_function(fn: FunctionIR) -> str:
    if fn.form is Form.DATAFLOW:
        from .convert import to_anf

        fn = to_anf(fn)
    head = f"fn {fn.name}"
    if fn.attrs:
        head += f" @{format_attrs(fn.attrs)}"
    lines = [f"{head}({', '.join(_format_param(p) for p in fn.params)}) {{"]
    bindings, ret = anf_bindings(fn)
    for var, value in bindings:
        attrs = f" @{format_attrs(var.attrs)}" if var.attrs else ""
        lines.append(f"  let %{var.name}{attrs} = {format_expr(value)};")
    lines.append(f"  {format_expr(ret)}")
    lines.append("}")
    return "\n".join(lines) + "\n"


def print_text(obj: ModuleIR | FunctionIR) -> str:
    """Canonical text of a module (or of a function plus its closures)."""
    if isinstance(obj, FunctionIR):
        obj = ModuleIR.from_function(obj)
    return "\n".join(print_function(f) for f in obj.functions.values())


# ---------------------------------------------------------------- lexing

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+|\#[^\n]*)
  | (?P<str>"(?:[^"\\\n]|\\.)*")
  | (?P<num>[-+]?(?:\d+(?:\.\d+)?(?:[eE][-+]?\d+)?|inf)(?![A-Za-z_]))
  | (?P<var>%[A-Za-z0-9_]+)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<punct>[(){}\[\],;:=@.?])
    """,
    re.VERBOSE,
)


class _Tok:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind: str, text: str, line: int, col: int) -> None:
        self.kind, self.text, self.line, self.col = kind, text, line, col

    def __repr__(self) -> str:
        return f"{self.kind}:{self.text!r}@{self.line}:{self.col}"


def _tokenize(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        col = pos - line_start + 1
        if m is None:
            raise ParseError(f"unexpected character {src[pos]!r}", line, col)
        kind = m.lastgroup
        text = m.group()
        if kind != "ws":
            toks.append(_Tok(kind, text, line, col))
        nl = text.count("\n")
        if nl:
            line += nl
            line_start = pos + text.rindex("\n") + 1
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


def _unescape(tok: _Tok) -> str:
    body = tok.text[1:-1]
    out = []
    i = 0
    inverse = {"\\": "\\", '"': '"', "n": "\n", "t": "\t"}
    while i < len(body):
        c = body[i]
        if c == "\\":
            nxt = body[i + 1]
            if nxt not in inverse:
                raise ParseError(f"unknown escape '\\{nxt}'", tok.line, tok.col + i + 1)
            out.append(inverse[nxt])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


# ---------------------------------------------------------------- parsing


class _Parser:
    def __init__(self, src: str, base_dir: Path | None) -> None:
        self.toks = _tokenize(src)
        self.i = 0
        self.base_dir = base_dir
        self.functions: dict[str, FunctionIR] = {}

    # token helpers
    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> _Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, msg: str, tok: _Tok | None = None) -> ParseError:
        tok = tok or self.tok
        return ParseError(msg, tok.line, tok.col)

    def advance(self) -> _Tok:
        t = self.tok
        self.i += 1
        return t

    def at(self, text: str) -> bool:
        return self.tok.kind in ("punct", "name") and self.tok.text == text

    def expect(self, text: str) -> _Tok:
        if not self.at(text):
            got = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, got {got!r}")
        return self.advance()

    def expect_kind(self, kind: str, what: str) -> _Tok:
        if self.tok.kind != kind:
            got = self.tok.text or "end of input"
            raise self.error(f"expected {what}, got {got!r}")
        return self.advance()

    # grammar
    def module(self) -> ModuleIR:
        if self.tok.kind == "eof":
            raise self.error("empty module")
        last = None
        while self.tok.kind != "eof":
            fn = self.function()
            if fn.name in self.functions:
                raise self.error(f"duplicate function {fn.name!r}")
            self.functions[fn.name] = fn
            last = fn.name
        entry = "main" if "main" in self.functions else last
        return ModuleIR(dict(self.functions), entry)

    def function(self) -> FunctionIR:
        self.expect("fn")
        name = self.expect_kind("name", "function name").text
        attrs = self.maybe_attrs()
        self.expect("(")
        self.scope: dict[str, Var] = {}
        params: list[Var] = []
        if not self.at(")"):
            while True:
                params.append(self.param())
                if not self.at(","):
                    break
                self.advance()
        self.expect(")")
        self.expect("{")
        bindings = []
        while self.at("let"):
            bindings.append(self.let())
        if self.at("}"):
            raise self.error("function body needs a return expression")
        ret = self.expr()
        self.expect("}")
        return make_anf(name, params, bindings, ret, attrs)

    def param(self) -> Var:
        tok = self.expect_kind("var", "parameter")
        attrs = self.maybe_attrs()
        self.expect(":")
        ty = self.type_()
        var = Var(tok.text[1:], ty, attrs)
        if var.name in self.scope:
            raise self.error(f"duplicate variable %{var.name}", tok)
        self.scope[var.name] = var
        return var

    def type_(self) -> TensorType:
        tok = self.expect_kind("name", "dtype")
        try:
            dtype = DType.parse(tok.text)
        except ValueError:
            raise self.error(f"unknown dtype {tok.text!r}", tok) from None
        self.expect("[")
        dims = []
        while True:
            if self.at("?"):
                raise self.error("dynamic shapes are not supported")
            t = self.expect_kind("num", "dimension")
            if not re.fullmatch(r"\d+", t.text) or int(t.text) < 1:
                raise self.error(f"dimension must be a positive integer, got {t.text}", t)
            dims.append(int(t.text))
            if not self.at(","):
                break
            self.advance()
        self.expect("]")
        return TensorType(dtype, tuple(dims))

    def let(self):
        self.expect("let")
        tok = self.expect_kind("var", "variable")
        attrs = self.maybe_attrs()
        self.expect("=")
        value = self.expr()
        self.expect(";")
        name = tok.text[1:]
        prev = self.scope.get(name)
        if prev is not None and id(prev) not in self.free_ids:
            raise self.error(f"duplicate variable %{name}", tok)
        var = Var(name, None, attrs)
        self.scope[name] = var
        return var, value

    def maybe_attrs(self) -> dict[str, AttrValue]:
        if not self.at("@"):
            return {}
        self.advance()
        self.expect("{")
        attrs: dict[str, AttrValue] = {}
        while True:
            key = self.expect_kind("name", "attribute name")
            self.expect("=")
            if key.text in attrs:
                raise self.error(f"duplicate attribute {key.text!r}", key)
            attrs[key.text] = self.value()
            if not self.at(","):
                break
            self.advance()
        self.expect("}")
        return attrs

    def value(self) -> AttrValue:
        tok = self.tok
        if tok.kind == "str":
            self.advance()
            return _unescape(tok)
        if tok.kind == "num":
            self.advance()
            return _number(tok.text)
        if tok.kind == "name" and tok.text == "nan":
            self.advance()
            return float("nan")
        raise self.error(f"expected an attribute value, got {tok.text!r}")

    def expr(self) -> Expr:
        tok = self.tok
        if tok.kind == "var":
            self.advance()
            var = self.lookup(tok)
            if self.at("."):
                self.advance()
                idx = self.expect_kind("num", "tuple index")
                if not re.fullmatch(r"\d+", idx.text):
                    raise self.error("tuple index must be a non-negative integer", idx)
                return TupleGet(var, int(idx.text))
            return var
        if tok.kind == "num" or (tok.kind == "name" and tok.text == "nan"):
            return Const(float(self.value()))
        if tok.kind == "punct" and tok.text == "(":
            self.advance()
            fields = [self.expr()]
            while self.at(","):
                self.advance()
                fields.append(self.expr())
            self.expect(")")
            return Tuple(tuple(fields))
        if tok.kind == "name":
            self.advance()
            if tok.text == "tensor":
                return self.tensor_const()
            self.expect("(")
            args: list[Expr] = []
            kwargs: dict[str, AttrValue] = {}
            if not self.at(")"):
                while True:
                    if self.tok.kind == "name" and self.peek().text == "=":
                        key = self.advance()
                        self.advance()
                        if key.text in kwargs:
                            raise self.error(f"duplicate attribute {key.text!r}", key)
                        kwargs[key.text] = self.value()
                    else:
                        if kwargs:
                            raise self.error("positional argument after keyword argument")
                        args.append(self.expr())
                    if not self.at(","):
                        break
                    self.advance()
            self.expect(")")
            if tok.text in self.functions:
                if kwargs:
                    raise self.error("closure calls take no keyword arguments", tok)
                return ClosureCall(self.functions[tok.text], tuple(args))
            return Call(tok.text, tuple(args), kwargs)
        raise self.error(f"expected an expression, got {tok.text or 'end of input'!r}")

    def tensor_const(self) -> Const:
        self.expect("(")
        if self.tok.kind == "str":
            path = _unescape(self.advance())
            self.expect(")")
            from ..tensorio import read_tensor

            full = Path(path) if self.base_dir is None else self.base_dir / path
            arr = read_tensor(full)
            ty = TensorType(DType.from_numpy(arr.dtype), arr.shape)
            return Const(arr, ty, path)
        ty = self.type_()
        self.expect(";")
        vals = [float(self.value())]
        while self.at(","):
            self.advance()
            vals.append(float(self.value()))
        self.expect(")")
        if len(vals) != ty.numel:
            raise self.error(f"tensor literal of type {ty} needs {ty.numel} values, got {len(vals)}")
        arr = np.asarray(vals, dtype=ty.dtype.np).reshape(ty.shape)
        return Const(arr, ty)

    def lookup(self, tok: _Tok) -> Var:
        name = tok.text[1:]
        var = self.scope.get(name)
        if var is None:
            # free variable: left for check_wellformed to report
            var = Var(name)
            self.scope[name] = var
            self.free_ids.add(id(var))
        return var


def _number(text: str) -> AttrValue:
    if re.fullmatch(r"[-+]?\d+", text):
        return int(text)
    return float(text)


def parse_text(source: str, base_dir: str | Path | None = None) -> ModuleIR:
    """Parse IR text into an untyped module.

    Raises :class:`ParseError` carrying line and column.
    """
    p = _Parser(source, Path(base_dir) if base_dir is not None else None)
    p.free_ids = set()
    return p.module()


def parse_function(source: str) -> FunctionIR:
    return parse_text(source).main
