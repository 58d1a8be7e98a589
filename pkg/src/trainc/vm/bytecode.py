"""Bytecode: instructions, the compiler from ANF, and the text (dis)assembler.

Registers are virtual and unlimited: one per parameter, per constant, per
tensor produced (closure outputs get one each) and per storage slab.  Every
produced buffer is freed right after its last use according to
:func:`trainc.memsched.liveness`.

Disassembly lists the constant, kernel and closure tables followed by the code,
one instruction per line as ``idx: OPCODE arg,arg,...``::

    .fn main
    .param 0 f32[2]
    .const 0 scalar 1.0
    .kernel 0 ref.add {} (f32[2],scalar) f32[2]
    .code
    0: LOADCONST 0,2
    1: ALLOCSTORAGE 256,3
    ...
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from ..errors import TraincError
from ..ir.convert import ensure_anf
from ..ir.expr import Call, ClosureCall, Const, FunctionIR, Tuple, TupleGet, anf_bindings
from ..ir.text import parse_text, print_function
from ..ir.types import DType, TensorType, TupleType
from ..memsched import liveness
from .pool import size_class


@dataclass(frozen=True)
class AllocStorage:
    size: int
    slab: int


@dataclass(frozen=True)
class AllocTensor:
    slab: int
    offset: int
    ty: TensorType
    dst: int


@dataclass(frozen=True)
class Invoke:
    kernel: int
    ins: tuple[int, ...]
    outs: tuple[int, ...]


@dataclass(frozen=True)
class InvokeClosure:
    closure: int
    ins: tuple[int, ...]
    outs: tuple[int, ...]


@dataclass(frozen=True)
class Move:
    src: int
    dst: int


@dataclass(frozen=True)
class Free:
    reg: int


@dataclass(frozen=True)
class LoadConst:
    const: int
    dst: int


@dataclass(frozen=True)
class Ret:
    regs: tuple[int, ...]


Instruction = Union[AllocStorage, AllocTensor, Invoke, InvokeClosure, Move, Free, LoadConst, Ret]


@dataclass(frozen=True)
class KernelEntry:
    op: str
    attrs: dict
    in_types: tuple  # TensorType or None (scalar literal)
    out_type: TensorType


@dataclass(frozen=True)
class ClosureEntry:
    fn: FunctionIR
    digest: str
    in_types: tuple
    out_types: tuple


@dataclass
class Bytecode:
    name: str
    params: list[TensorType]
    consts: list  # float | ndarray
    kernels: list[KernelEntry]
    closures: list[ClosureEntry]
    code: list[Instruction]
    n_regs: int
    tuple_return: bool = True
    debug_names: dict[int, str] = field(default_factory=dict)


def closure_digest(fn: FunctionIR) -> str:
    return hashlib.sha256(print_function(fn).encode()).hexdigest()[:16]


class UndispatchedOp(TraincError):
    pass


def compile_bytecode(fn: FunctionIR, require_dispatched: bool = True) -> Bytecode:
    """Lower a typed ANF function (dispatched and scheduled) to bytecode."""
    fn = ensure_anf(fn)
    bindings, ret = anf_bindings(fn)
    table = liveness(fn)
    n_regs = 0

    def reg() -> int:
        nonlocal n_regs
        n_regs += 1
        return n_regs - 1

    code: list[Instruction] = []
    regs: dict[str, int] = {}
    buffer_reg: dict[str, int] = {}
    names: dict[int, str] = {}
    for p in fn.params:
        regs[p.name] = reg()
        names[regs[p.name]] = p.name

    consts: list = []
    const_reg: dict[object, int] = {}

    def const(c: Const) -> int:
        key = ("s", np.float64(c.value).tobytes()) if c.is_scalar else ("t", id(c))
        if key not in const_reg:
            consts.append(float(c.value) if c.is_scalar else c.array())
            r = reg()
            code.append(LoadConst(len(consts) - 1, r))
            const_reg[key] = r
        return const_reg[key]

    kernels: list[KernelEntry] = []
    kernel_ids: dict[tuple, int] = {}
    closures: list[ClosureEntry] = []
    closure_ids: dict[int, int] = {}
    tuple_fields: dict[str, list[int]] = {}

    def arg_regs(args) -> tuple[int, ...]:
        out = []
        for a in args:
            if isinstance(a, Const):
                out.append(const(a))
            elif a.name in tuple_fields:
                out.extend(tuple_fields[a.name])
            else:
                out.append(regs[a.name])
        return tuple(out)

    def alloc(ty: TensorType, buf: str) -> int:
        slab = reg()
        code.append(AllocStorage(size_class(ty.size_bytes), slab))
        dst = reg()
        code.append(AllocTensor(slab, 0, ty, dst))
        buffer_reg[buf] = dst
        names[dst] = buf
        return dst

    def arg_type(a):
        return None if isinstance(a, Const) and a.is_scalar else a.ty

    frees_at: dict[int, list[str]] = {}
    for b, (lo, hi) in table.intervals.items():
        if b in table.pinned or b in table.outputs or b in {p.name for p in fn.params}:
            continue
        frees_at.setdefault(hi, []).append(b)

    for i, (var, value) in enumerate(bindings):
        if isinstance(value, Call):
            if require_dispatched and "." not in value.op:
                raise UndispatchedOp(f"%{var.name}: operator {value.op!r} is not dispatched")
            ins = arg_regs(value.args)
            key = (value.op, json.dumps(value.attrs, sort_keys=True), tuple(str(arg_type(a)) for a in value.args))
            if key not in kernel_ids:
                kernel_ids[key] = len(kernels)
                kernels.append(
                    KernelEntry(value.op, dict(value.attrs), tuple(arg_type(a) for a in value.args), var.ty)
                )
            dst = alloc(var.ty, var.name)
            regs[var.name] = dst
            code.append(Invoke(kernel_ids[key], ins, (dst,)))
        elif isinstance(value, ClosureCall):
            cfn = value.fn
            if id(cfn) not in closure_ids:
                closure_ids[id(cfn)] = len(closures)
                out_types = var.ty.fields if isinstance(var.ty, TupleType) else (var.ty,)
                closures.append(
                    ClosureEntry(cfn, closure_digest(cfn), tuple(arg_type(a) for a in value.args), tuple(out_types))
                )
            ins = arg_regs(value.args)
            if isinstance(var.ty, TupleType):
                outs = [alloc(t, f"{var.name}.{k}") for k, t in enumerate(var.ty.fields)]
                tuple_fields[var.name] = outs
            else:
                outs = [alloc(var.ty, var.name)]
                regs[var.name] = outs[0]
            code.append(InvokeClosure(closure_ids[id(cfn)], ins, tuple(outs)))
        elif isinstance(value, TupleGet):
            src = tuple_fields[value.tuple_value.name][value.index]
            dst = reg()
            names[dst] = var.name
            regs[var.name] = dst
            code.append(Move(src, dst))
        else:
            raise TraincError(f"cannot lower {type(value).__name__} binding %{var.name}")
        for b in sorted(frees_at.get(i, [])):
            code.append(Free(buffer_reg[b]))

    fields = ret.fields if isinstance(ret, Tuple) else (ret,)
    out_regs = arg_regs(fields)
    code.append(Ret(out_regs))
    return Bytecode(
        fn.name,
        [p.ty for p in fn.params],
        consts,
        kernels,
        closures,
        code,
        n_regs,
        isinstance(ret, Tuple),
        names,
    )


# ------------------------------------------------------------------ text format


def _ty(t) -> str:
    return "scalar" if t is None else str(t)


def _parse_ty(s: str):
    if s == "scalar":
        return None
    m = re.fullmatch(r"(f32|f16)\[([0-9,]+)\]", s)
    if not m:
        raise ValueError(f"bad type {s!r}")
    return TensorType(DType.parse(m.group(1)), tuple(int(d) for d in m.group(2).split(",")))


def _types(ts) -> str:
    return "(" + ";".join(_ty(t) for t in ts) + ")"


def _parse_types(s: str) -> tuple:
    inner = s[1:-1]
    return tuple(_parse_ty(t) for t in inner.split(";")) if inner else ()


def _regs(rs) -> str:
    return "[" + ",".join(str(r) for r in rs) + "]"


def _instr_text(ins: Instruction) -> str:
    if isinstance(ins, AllocStorage):
        return f"ALLOCSTORAGE {ins.size},{ins.slab}"
    if isinstance(ins, AllocTensor):
        return f"ALLOCTENSOR {ins.slab},{ins.offset},{ins.ty},{ins.dst}"
    if isinstance(ins, Invoke):
        return f"INVOKE {ins.kernel},{_regs(ins.ins)},{_regs(ins.outs)}"
    if isinstance(ins, InvokeClosure):
        return f"INVOKECLOSURE {ins.closure},{_regs(ins.ins)},{_regs(ins.outs)}"
    if isinstance(ins, Move):
        return f"MOVE {ins.src},{ins.dst}"
    if isinstance(ins, Free):
        return f"FREE {ins.reg}"
    if isinstance(ins, LoadConst):
        return f"LOADCONST {ins.const},{ins.dst}"
    if isinstance(ins, Ret):
        return f"RET {_regs(ins.regs)}"
    raise TypeError(type(ins).__name__)


def disassemble(bc: Bytecode) -> str:
    lines = [f".fn {bc.name} regs={bc.n_regs} tuple={int(bc.tuple_return)}"]
    for i, t in enumerate(bc.params):
        lines.append(f".param {i} {t}")
    for i, c in enumerate(bc.consts):
        if isinstance(c, float):
            lines.append(f".const {i} scalar {json.dumps(c)}")
        else:
            t = TensorType(DType.from_numpy(c.dtype), c.shape)
            lines.append(f".const {i} {t} {c.astype(c.dtype.newbyteorder('<')).tobytes().hex()}")
    for i, k in enumerate(bc.kernels):
        lines.append(f".kernel {i} {k.op} {json.dumps(k.attrs, sort_keys=True)} {_types(k.in_types)} {k.out_type}")
    for i, c in enumerate(bc.closures):
        lines.append(f".closure {i} {c.fn.name} {c.digest} {_types(c.in_types)} {_types(c.out_types)}")
        lines.extend("| " + line for line in print_function(c.fn).rstrip("\n").split("\n"))
    lines.append(".code")
    for i, ins in enumerate(bc.code):
        lines.append(f"{i}: {_instr_text(ins)}")
    return "\n".join(lines) + "\n"


def _split_top(s: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in s:
        if ch in "[(":
            depth += 1
        elif ch in "])":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    return out


def _parse_regs(s: str) -> tuple[int, ...]:
    inner = s.strip()[1:-1]
    return tuple(int(x) for x in inner.split(",")) if inner else ()


def _parse_instr(text: str) -> Instruction:
    op, _, rest = text.partition(" ")
    a = _split_top(rest)
    if op == "ALLOCSTORAGE":
        return AllocStorage(int(a[0]), int(a[1]))
    if op == "ALLOCTENSOR":
        return AllocTensor(int(a[0]), int(a[1]), _parse_ty(a[2]), int(a[3]))
    if op == "INVOKE":
        return Invoke(int(a[0]), _parse_regs(a[1]), _parse_regs(a[2]))
    if op == "INVOKECLOSURE":
        return InvokeClosure(int(a[0]), _parse_regs(a[1]), _parse_regs(a[2]))
    if op == "MOVE":
        return Move(int(a[0]), int(a[1]))
    if op == "FREE":
        return Free(int(a[0]))
    if op == "LOADCONST":
        return LoadConst(int(a[0]), int(a[1]))
    if op == "RET":
        return Ret(_parse_regs(rest))
    raise ValueError(f"unknown opcode {op!r}")


def assemble(text: str) -> Bytecode:
    """Inverse of :func:`disassemble`."""
    lines = text.rstrip("\n").split("\n")
    head = re.fullmatch(r"\.fn (\S+) regs=(\d+) tuple=([01])", lines[0])
    if not head:
        raise ValueError("bytecode text must start with a .fn header")
    params, consts, kernels, closures, code = [], [], [], [], []
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith(".param "):
            params.append(_parse_ty(line.split(" ", 2)[2]))
        elif line.startswith(".const "):
            _, _, kind, payload = line.split(" ", 3)
            if kind == "scalar":
                consts.append(float(json.loads(payload)))
            else:
                t = _parse_ty(kind)
                consts.append(np.frombuffer(bytes.fromhex(payload), dtype=t.dtype.np.newbyteorder("<")).astype(t.dtype.np).reshape(t.shape))
        elif line.startswith(".kernel "):
            m = re.fullmatch(r"\.kernel \d+ (\S+) (\{.*\}) (\(.*\)) (\S+)", line)
            kernels.append(KernelEntry(m.group(1), json.loads(m.group(2)), _parse_types(m.group(3)), _parse_ty(m.group(4))))
        elif line.startswith(".closure "):
            m = re.fullmatch(r"\.closure \d+ (\S+) (\S+) (\(.*\)) (\(.*\))", line)
            body = []
            while i + 1 < len(lines) and lines[i + 1].startswith("| "):
                i += 1
                body.append(lines[i][2:])
            fn = parse_text("\n".join(body) + "\n").main
            closures.append(ClosureEntry(fn, m.group(2), _parse_types(m.group(3)), _parse_types(m.group(4))))
        elif line == ".code":
            for cl in lines[i + 1 :]:
                idx, _, instr = cl.partition(": ")
                if int(idx) != len(code):
                    raise ValueError(f"instruction index {idx} out of sequence")
                code.append(_parse_instr(instr))
            break
        else:
            raise ValueError(f"unexpected line {line!r}")
        i += 1
    return Bytecode(head.group(1), params, consts, kernels, closures, code, int(head.group(2)), head.group(3) == "1")

