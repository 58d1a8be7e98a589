"""Reverse-mode automatic differentiation by source transformation over ANF.

The forward function is extended in place of a tape: the loss is appended,
then one adjoint per forward binding is emitted while walking the bindings in
reverse, and finally the optimiser update.  Each operator's adjoint is an
:class:`AdjointEntry` declaring which forward tensors it reads (its input
``x``, its output ``y``, both or neither), which is what lets the backward
pass keep only ``y`` alive for ``tanh``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import DuplicateRegistration, NonDifferentiable, TraincError
from .ir.convert import ensure_anf
from .ir.expr import (
    Call,
    Const,
    Expr,
    FunctionIR,
    NameSupply,
    Tuple,
    Var,
    anf_bindings,
    function_names,
    make_anf,
)
from .ir.infer import infer_types
from .ir.types import DType, TensorType
from .oplib import shape_attr
from .opreg import OpRegistry, default_registry


class Deps(enum.Enum):
    NEEDS_X = "x"
    NEEDS_Y = "y"
    NEEDS_BOTH = "both"
    NEEDS_NEITHER = "neither"

    @property
    def kept(self) -> frozenset[str]:
        return {
            Deps.NEEDS_X: frozenset({"x"}),
            Deps.NEEDS_Y: frozenset({"y"}),
            Deps.NEEDS_BOTH: frozenset({"x", "y"}),
            Deps.NEEDS_NEITHER: frozenset(),
        }[self]


class Mode(enum.Enum):
    DECOMPOSED = "decomposed"
    MONOLITHIC = "monolithic"


class Builder:
    """Emits typed let-bindings for adjoint code."""

    def __init__(self, registry: OpRegistry, names: NameSupply) -> None:
        self.reg = registry
        self.names = names
        self.bindings: list[tuple[Var, Expr]] = []

    def emit(self, op: str, args: Sequence[Expr], prefix: str = "t", var_attrs=None, **attrs) -> Var:
        args = tuple(args)
        ty = self.reg.type_rel(op)([a.ty for a in args], attrs)
        var = Var(self.names(prefix), ty, dict(var_attrs or {}))
        self.bindings.append((var, Call(op, args, attrs)))
        return var

    def unbroadcast(self, g: Var, target: Expr) -> Var:
        """Sum ``g`` down to ``target``'s shape when the forward op broadcast it."""
        if target.ty is None or g.ty.shape == target.ty.shape:
            return g
        return self.emit("sum_to", [g], shape=shape_attr(target.ty.shape))


# (builder, forward call, its output y, output gradient dy, wanted-input mask)
# -> one gradient (or None) per input.  dy is None only for the loss, whose
# seed gradient is an implicit one.
BuildFn = Callable[[Builder, Call, Var, "Var | None", list], list]


@dataclass(frozen=True)
class AdjointEntry:
    op: str
    deps: Deps
    build: BuildFn
    mode: Mode = Mode.DECOMPOSED


def _const(v: float) -> Const:
    return Const(float(v))


def _seeded(b: Builder, dy, like: Var) -> Var:
    """``dy`` materialised; only the loss has an implicit unit seed and it never reaches here."""
    if dy is None:
        raise TraincError("unit seed reached a non-loss operator")
    return dy


def _add_adj(b, call, y, dy, want):
    dy = _seeded(b, dy, y)
    return [b.unbroadcast(dy, a) if w else None for a, w in zip(call.args, want)]


def _sub_adj(b, call, y, dy, want):
    dy = _seeded(b, dy, y)
    x0, x1 = call.args
    g0 = b.unbroadcast(dy, x0) if want[0] else None
    g1 = b.unbroadcast(b.emit("neg", [dy]), x1) if want[1] else None
    return [g0, g1]


def _mul_adj(b, call, y, dy, want):
    dy = _seeded(b, dy, y)
    x0, x1 = call.args
    g0 = b.unbroadcast(b.emit("mul", [dy, x1]), x0) if want[0] else None
    g1 = b.unbroadcast(b.emit("mul", [dy, x0]), x1) if want[1] else None
    return [g0, g1]


def _div_adj(b, call, y, dy, want):
    dy = _seeded(b, dy, y)
    x0, x1 = call.args
    g0 = b.unbroadcast(b.emit("div", [dy, x1]), x0) if want[0] else None
    g1 = None
    if want[1]:
        g1 = b.unbroadcast(b.emit("neg", [b.emit("mul", [dy, b.emit("div", [y, x1])])]), x1)
    return [g0, g1]


def _neg_adj(b, call, y, dy, want):
    return [b.emit("neg", [_seeded(b, dy, y)])]


def _tanh_adj(b, call, y, dy, want):
    dy = _seeded(b, dy, y)
    return [b.emit("mul", [dy, b.emit("sub", [_const(1.0), b.emit("mul", [y, y])])])]


def _tanh_mono_adj(b, call, y, dy, want):
    return [b.emit("tanh_dx", [_seeded(b, dy, y), y])]


def _tanh_both_adj(b, call, y, dy, want):
    """1 - tanh(x)*y: correct but reads both x and y (for memory comparisons)."""
    dy = _seeded(b, dy, y)
    (x,) = call.args
    t = b.emit("tanh", [x])
    return [b.emit("mul", [dy, b.emit("sub", [_const(1.0), b.emit("mul", [t, y])])])]


def _relu_adj(b, call, y, dy, want):
    dy = _seeded(b, dy, y)
    return [b.emit("mul", [dy, b.emit("gtz", [call.args[0]])])]


def _matmul_adj(b, call, y, dy, want):
    dy = _seeded(b, dy, y)
    a, w = call.args
    ga = b.emit("matmul", [dy, b.emit("transpose", [w])]) if want[0] else None
    gw = b.emit("matmul", [b.emit("transpose", [a]), dy]) if want[1] else None
    return [ga, gw]


def _transpose_adj(b, call, y, dy, want):
    return [b.emit("transpose", [_seeded(b, dy, y)])]


def _reshape_adj(b, call, y, dy, want):
    return [b.emit("reshape", [_seeded(b, dy, y)], shape=shape_attr(call.args[0].ty.shape))]


def _broadcast_adj(b, call, y, dy, want):
    return [b.emit("sum_to", [_seeded(b, dy, y)], shape=shape_attr(call.args[0].ty.shape))]


def _sum_adj(b, call, y, dy, want):
    return [b.emit("broadcast_to", [_seeded(b, dy, y)], shape=shape_attr(call.args[0].ty.shape))]


def _mean_adj(b, call, y, dy, want):
    (x,) = call.args
    g = b.emit("mul", [_seeded(b, dy, y), _const(1.0 / x.ty.numel)])
    return [b.emit("broadcast_to", [g], shape=shape_attr(x.ty.shape))]


def _sum_to_adj(b, call, y, dy, want):
    return [b.emit("broadcast_to", [_seeded(b, dy, y)], shape=shape_attr(call.args[0].ty.shape))]


def _mse_adj(b, call, y, dy, want):
    """d/dpred mean((pred-label)^2) = (pred-label) * 2/N; the unit seed is not multiplied in."""
    pred, label = call.args
    if not any(want):
        return [None, None]
    n = pred.ty.numel
    g = b.emit("mul", [b.emit("sub", [pred, label]), _const(2.0 / n)])
    if dy is not None:
        g = b.emit("mul", [g, dy])
    return [g if want[0] else None, b.emit("neg", [g]) if want[1] else None]


def _softmax_adj(b, call, y, dy, want):
    return [b.emit("softmax_dx", [_seeded(b, dy, y), y])]


def _cast_adj(b, call, y, dy, want):
    (x,) = call.args
    return [b.emit("cast", [_seeded(b, dy, y)], dtype=x.ty.dtype.value)]


def _zero_adj(b, call, y, dy, want):
    return [None for _ in call.args]


class AdjointRegistry:
    def __init__(self, registry: OpRegistry | None = None) -> None:
        self.ops = registry or default_registry()
        self.entries: dict[str, AdjointEntry] = {}

    def register_adjoint(self, entry: AdjointEntry, replace: bool = False) -> None:
        if not self.ops.has_op(entry.op):
            raise TraincError(f"cannot register an adjoint for unknown operator {entry.op!r}")
        if entry.op in self.entries and not replace:
            raise DuplicateRegistration(f"adjoint for {entry.op!r} already registered")
        self.entries[entry.op] = entry

    def get(self, op: str) -> AdjointEntry:
        base = op.split(".", 1)[-1]
        try:
            return self.entries[base]
        except KeyError:
            raise NonDifferentiable(op) from None

    def copy(self) -> "AdjointRegistry":
        out = AdjointRegistry(self.ops)
        out.entries = dict(self.entries)
        return out


X, Y, BOTH, NEITHER = Deps.NEEDS_X, Deps.NEEDS_Y, Deps.NEEDS_BOTH, Deps.NEEDS_NEITHER

DEFAULT_ADJOINTS = [
    AdjointEntry("add", NEITHER, _add_adj),
    AdjointEntry("sub", NEITHER, _sub_adj),
    AdjointEntry("mul", X, _mul_adj),
    AdjointEntry("div", BOTH, _div_adj),
    AdjointEntry("neg", NEITHER, _neg_adj),
    AdjointEntry("tanh", Y, _tanh_adj),
    AdjointEntry("relu", X, _relu_adj),
    AdjointEntry("gtz", NEITHER, _zero_adj),
    AdjointEntry("matmul", X, _matmul_adj),
    AdjointEntry("transpose", NEITHER, _transpose_adj),
    AdjointEntry("reshape", NEITHER, _reshape_adj),
    AdjointEntry("broadcast_to", NEITHER, _broadcast_adj),
    AdjointEntry("sum", NEITHER, _sum_adj),
    AdjointEntry("mean", NEITHER, _mean_adj),
    AdjointEntry("sum_to", NEITHER, _sum_to_adj),
    AdjointEntry("mse", X, _mse_adj),
    AdjointEntry("softmax", Y, _softmax_adj),
    AdjointEntry("cast", NEITHER, _cast_adj),
]

TANH_MONOLITHIC = AdjointEntry("tanh", Y, _tanh_mono_adj, Mode.MONOLITHIC)
TANH_NEEDS_BOTH = AdjointEntry("tanh", BOTH, _tanh_both_adj)


def default_adjoints(monolithic_tanh: bool = False) -> AdjointRegistry:
    reg = AdjointRegistry()
    for e in DEFAULT_ADJOINTS:
        reg.register_adjoint(e)
    if monolithic_tanh:
        reg.register_adjoint(TANH_MONOLITHIC, replace=True)
    return reg


# ------------------------------------------------------------------ training spec


@dataclass(frozen=True)
class SGD:
    lr: float = 0.1

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class Adam:
    lr: float = 1e-3
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self) -> None:
        if min(self.lr, self.eps, self.beta1, self.beta2) <= 0:
            raise ValueError("adam hyperparameters must be positive")


@dataclass(frozen=True)
class TrainingSpec:
    loss: str = "mse"
    optimizer: SGD | Adam | None = field(default_factory=SGD)
    params: tuple[str, ...] | None = None  # None: every parameter marked param=1

    def __post_init__(self) -> None:
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingSpec":
        opt = obj.get("optimizer", {"kind": "sgd"})
        kind = opt.get("kind", "sgd")
        kw = {k: v for k, v in opt.items() if k != "kind"}
        optimizer = SGD(**kw) if kind == "sgd" else Adam(**kw)
        params = obj.get("params")
        if params is not None:
            params = tuple(p.lstrip("%") for p in params)
        return cls(obj.get("loss", "mse"), optimizer, params)


def _is_param(v: Var) -> bool:
    return bool(v.attrs.get("param"))


# ------------------------------------------------------------------ the transform


def autodiff(
    fn: FunctionIR,
    spec: TrainingSpec | None = None,
    adjoints: AdjointRegistry | None = None,
    registry: OpRegistry | None = None,
) -> FunctionIR:
    """All-in-one training step for the forward function ``fn``.

    Parameters of the result: batch inputs, ``%label``, trained parameters,
    optimiser states.  Results: ``(loss, new params..., new states...)``, or
    ``(loss, grads...)`` when the spec has no optimiser.
    """
    spec = spec or TrainingSpec()
    reg = registry or default_registry()
    adjoints = adjoints or default_adjoints()
    fn = infer_types(ensure_anf(fn), reg)
    bindings, ret = anf_bindings(fn)
    if not isinstance(ret, Var):
        raise TraincError("autodiff expects a forward function returning a single tensor")
    for _, value in bindings:
        if not isinstance(value, Call):
            raise TraincError(f"autodiff expects plain operator calls, found {type(value).__name__}")

    if spec.params is None:
        trained = [p for p in fn.params if _is_param(p)]
    else:
        by_name = {p.name: p for p in fn.params}
        missing = [n for n in spec.params if n not in by_name]
        if missing:
            raise TraincError(f"unknown parameters {missing}")
        trained = [by_name[n] for n in spec.params]
    if not trained:
        raise TraincError("no parameters to train")
    # trained params are marked param=1 in the output regardless of input marking
    remap = {id(p): (p.with_attrs(param=1) if id(p) in {id(t) for t in trained} else p) for p in fn.params}
    inputs = [remap[id(p)] for p in fn.params if id(p) not in {id(t) for t in trained}]
    trained = [remap[id(p)] for p in trained]
    names = NameSupply(function_names(fn) | {"label", "loss"})
    fwd, env = _rebind(bindings, remap)
    ret = env[id(ret)]

    label = Var("label", ret.ty)
    b = Builder(reg, names)
    b.bindings = list(fwd)
    loss_call = Call("mse", (ret, label), {})
    loss = Var("loss", TensorType(ret.ty.dtype, (1,)))
    b.bindings.append((loss, loss_call))

    # which vars depend on a trained parameter
    active = {id(p) for p in trained}
    for var, value in b.bindings:
        if any(isinstance(a, Var) and id(a) in active for a in value.args):
            active.add(id(var))

    contributions: dict[int, list[tuple[int, int, Var]]] = {}
    forward = list(b.bindings)
    index_of = {id(v): i for i, (v, _) in enumerate(forward)}
    grads: dict[int, Var | None] = {}

    for i in range(len(forward) - 1, -1, -1):
        var, call = forward[i]
        if id(var) not in active:
            continue
        if var is loss:
            dy = None
        else:
            dy = _accumulate(b, contributions.pop(id(var), []), var)
            if dy is None:
                continue
        entry = adjoints.get(call.op)
        want = [isinstance(a, Var) and id(a) in active for a in call.args]
        gs = entry.build(b, call, var, dy, want)
        for k, (arg, g) in enumerate(zip(call.args, gs)):
            if g is None or not isinstance(arg, Var) or id(arg) not in active:
                continue
            contributions.setdefault(id(arg), []).append((i, k, g))

    for p in trained:
        grads[id(p)] = _accumulate(b, contributions.pop(id(p), []), p)

    outputs: list[Var] = [loss]
    state_params: list[Var] = []
    opt = spec.optimizer
    if opt is None:
        for p in trained:
            g = grads[id(p)]
            if g is None:
                raise TraincError(f"parameter %{p.name} does not influence the loss")
            outputs.append(_tag(b, g, grad_of=p.name))
    else:
        for p in trained:
            g = grads[id(p)]
            if g is not None:
                grads[id(p)] = _tag(b, g, grad_of=p.name)
        new_params, new_states, state_params = _optimizer(b, opt, trained, grads)
        outputs += new_params + new_states

    params = inputs + [label] + trained + state_params
    out = make_anf(fn.name, params, b.bindings, Tuple(tuple(outputs)), fn.attrs)
    return infer_types(out, reg)


def _rebind(bindings, remap: dict[int, Var]):
    """Copy forward bindings with parameter references replaced per ``remap``.

    Returns the new bindings and the old-id -> new-var environment.
    """
    env = dict(remap)
    out = []
    for var, call in bindings:
        args = tuple(env.get(id(a), a) if isinstance(a, Var) else a for a in call.args)
        new_var = Var(var.name, var.ty, dict(var.attrs))
        env[id(var)] = new_var
        out.append((new_var, Call(call.op, args, dict(call.attrs))))
    return out, env


def _accumulate(b: Builder, contribs: list[tuple[int, int, Var]], like: Var) -> Var | None:
    """Sum fan-out contributions as an explicit add chain in forward order of their consumers."""
    if not contribs:
        return None
    contribs = sorted(contribs, key=lambda c: (c[0], c[1]))
    acc = contribs[0][2]
    for _, _, g in contribs[1:]:
        acc = b.emit("add", [acc, g])
    return acc


def _tag(b: Builder, g: Var, **attrs) -> Var:
    """Attach attributes to the binding of ``g`` (re-creating its Var)."""
    for k, (var, value) in enumerate(b.bindings):
        if var is g:
            new = var.with_attrs(**attrs)
            b.bindings[k] = (new, value)
            _substitute(b, g, new, start=k + 1)
            return new
    # g is a parameter or input; bind a copy so it can carry the attribute
    return b.emit("add", [g, _const(0.0)], var_attrs=attrs)


def _substitute(b: Builder, old: Var, new: Var, start: int) -> None:
    for k in range(start, len(b.bindings)):
        var, value = b.bindings[k]
        if any(a is old for a in value.args):
            args = tuple(new if a is old else a for a in value.args)
            b.bindings[k] = (var, Call(value.op, args, dict(value.attrs)))


def _optimizer(b: Builder, opt, trained: list[Var], grads: dict[int, Var | None]):
    new_params: list[Var] = []
    new_states: list[Var] = []
    state_params: list[Var] = []
    if isinstance(opt, SGD):
        for p in trained:
            g = grads[id(p)]
            if g is None:
                new_params.append(b.emit("add", [p, _const(0.0)], f"{p.name}_new", {"new_param": p.name}))
                continue
            new_params.append(b.emit("sgd_update", [p, g], f"{p.name}_new", {"new_param": p.name}, lr=float(opt.lr)))
        return new_params, new_states, state_params

    step = Var(b.names("adam_t"), TensorType(DType.F32, (1,)), {"opt_state": "step"})
    state_params.append(step)
    t_new = b.emit("add", [step, _const(1.0)], f"{step.name}_new", {"new_opt_state": "step"})
    new_states.append(t_new)
    hyper = dict(lr=float(opt.lr), eps=float(opt.eps), beta1=float(opt.beta1), beta2=float(opt.beta2))
    for p in trained:
        g = grads[id(p)]
        m = Var(b.names(f"{p.name}_m"), p.ty, {"opt_state": f"{p.name}:m"})
        v = Var(b.names(f"{p.name}_v"), p.ty, {"opt_state": f"{p.name}:v"})
        state_params += [m, v]
        if g is None:
            new_states += [
                b.emit("add", [m, _const(0.0)], f"{m.name}_new", {"new_opt_state": f"{p.name}:m"}),
                b.emit("add", [v, _const(0.0)], f"{v.name}_new", {"new_opt_state": f"{p.name}:v"}),
            ]
            new_params.append(b.emit("add", [p, _const(0.0)], f"{p.name}_new", {"new_param": p.name}))
            continue
        m_new = b.emit("adam_m", [m, g], f"{m.name}_new", {"new_opt_state": f"{p.name}:m"}, beta1=hyper["beta1"])
        v_new = b.emit("adam_v", [v, g], f"{v.name}_new", {"new_opt_state": f"{p.name}:v"}, beta2=hyper["beta2"])
        new_states += [m_new, v_new]
        new_params.append(
            b.emit("adam_param", [p, m_new, v_new, t_new], f"{p.name}_new", {"new_param": p.name}, **hyper)
        )
    return new_params, new_states, state_params


# ------------------------------------------------------------------ reports


def dependency_report(fn_trained: FunctionIR, adjoints: AdjointRegistry | None = None) -> dict[str, frozenset]:
    """Forward tensors (``x``/``y``) each differentiated forward op keeps for backward."""
    adjoints = adjoints or default_adjoints()
    out: dict[str, frozenset] = {}
    for var, value in anf_bindings(ensure_anf(fn_trained))[0]:
        if var.name == "loss":
            break
        if isinstance(value, Call):
            base = value.op.split(".", 1)[-1]
            out.setdefault(base, adjoints.get(base).deps.kept)
    return out

