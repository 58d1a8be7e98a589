"""ZeRO-style partitioning of a single-device training step.

Every rank runs the same program on its slice of the global batch.  Gradients
are reduce-scattered (summed in rank order, then scaled by ``1/n``), the
optimiser updates only the rank's shard of each parameter and of its states,
and the updated shards are all-gathered back into full parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import TraincError
from ..ir.convert import ensure_anf, rebuild_node
from ..ir.expr import Call, Const, Expr, FunctionIR, NameSupply, Node, Var, anf_bindings, function_names, make_anf
from ..ir.infer import infer_types
from ..ir.types import TensorType
from ..oplib import shard_len


class NotATrainingStep(TraincError):
    """The function lacks the parameter / gradient / update attributes autodiff emits."""


@dataclass(frozen=True)
class World:
    n_ranks: int

    def __post_init__(self) -> None:
        if self.n_ranks < 1:
            raise ValueError("n_ranks must be >= 1")


@dataclass(frozen=True)
class ShardSpec:
    shape: tuple[int, ...]
    shard: int
    pad: int

    @classmethod
    def of(cls, shape: tuple[int, ...], n_ranks: int) -> "ShardSpec":
        numel = math.prod(shape)
        s = shard_len(numel, n_ranks)
        return cls(tuple(shape), s, n_ranks * s - numel)


def _base(op: str) -> str:
    return op.rsplit(".", 1)[-1]


def is_sharded_state(key: str) -> bool:
    """Per-parameter optimiser states (``"w1:m"``) shard; global ones (``"step"``) replicate."""
    return ":" in key


def shard_specs(fn_train: FunctionIR, world: World) -> dict[str, ShardSpec]:
    """Shard layout of every trainable parameter."""
    return {p.name: ShardSpec.of(p.ty.shape, world.n_ranks) for p in fn_train.params if p.attrs.get("param")}


def _check_training_step(fn: FunctionIR, bindings) -> None:
    if not any(p.attrs.get("param") for p in fn.params):
        raise NotATrainingStep(f"{fn.name}: no parameter is marked param=1")
    if not any("grad_of" in v.attrs for v, _ in bindings):
        raise NotATrainingStep(f"{fn.name}: no binding carries grad_of (not an autodiff output)")
    if not any("new_param" in v.attrs for v, _ in bindings):
        raise NotATrainingStep(f"{fn.name}: no binding carries new_param (no optimiser step)")


def _mse_scales(bindings) -> dict[str, float]:
    """Bindings ``mul(sub(pred, label), 2/N)`` emitted for an mse loss, by name.

    The constant is the mean over the batch; it must be recomputed when the
    batch is split.
    """
    losses = {
        (id(value.args[0]), id(value.args[1])): value.args[0].ty.numel
        for _, value in bindings
        if isinstance(value, Call) and _base(value.op) == "mse"
    }
    subs = {}
    for var, value in bindings:
        if isinstance(value, Call) and _base(value.op) == "sub" and len(value.args) == 2:
            key = (id(value.args[0]), id(value.args[1]))
            if key in losses:
                subs[id(var)] = losses[key]
    out = {}
    for var, value in bindings:
        if isinstance(value, Call) and _base(value.op) == "mul":
            a, c = value.args
            if isinstance(a, Var) and id(a) in subs and isinstance(c, Const) and c.is_scalar:
                if math.isclose(float(c.value), 2.0 / subs[id(a)], rel_tol=1e-12):
                    out[var.name] = subs[id(a)]
    return out


def partition_zero(fn_train: FunctionIR, world: World) -> FunctionIR:
    """Rank-parametric training step for ``world`` (optimiser and gradient sharding).

    With a single rank every inserted collective would be a no-op, so the
    function is returned unchanged.
    """
    fn = infer_types(ensure_anf(fn_train))
    bindings, ret = anf_bindings(fn)
    _check_training_step(fn, bindings)
    n = world.n_ranks
    if n == 1:
        return fn

    names = NameSupply(function_names(fn))
    env: dict[int, Expr] = {}
    params = []
    for p in fn.params:
        ty = p.ty
        if p.attrs.get("param"):
            new = p
        elif "opt_state" in p.attrs:
            key = str(p.attrs["opt_state"])
            new = p.with_type(TensorType(ty.dtype, (shard_len(ty.numel, n),))) if is_sharded_state(key) else p
        else:
            if not ty.shape or ty.shape[0] % n:
                raise ValueError(f"batch input %{p.name}: {ty} does not split evenly over {n} ranks")
            new = p.with_type(TensorType(ty.dtype, (ty.shape[0] // n, *ty.shape[1:])))
        env[id(p)] = new
        params.append(new)
    param_by_name = {p.name: env[id(p)] for p in fn.params if p.attrs.get("param")}

    scales = _mse_scales(bindings)
    grad_shard: dict[int, Var] = {}  # id(old grad var) -> scaled shard var
    local: dict[str, Var] = {}  # param name -> its local shard var
    out: list[tuple[Var, Expr]] = []

    def emit(name: str, value: Call, **attrs) -> Var:
        var = Var(names(name), None, attrs)
        out.append((var, value))
        return var

    def local_shard(pname: str) -> Var:
        if pname not in local:
            local[pname] = emit(f"{pname}_local", Call("local_shard", (param_by_name[pname],), {"n_ranks": n}))
        return local[pname]

    def arg(a: Expr) -> Expr:
        return env.get(id(a), a) if isinstance(a, Var) else a

    for var, value in bindings:
        args = [arg(a) for a in value.operands()]
        attrs = dict(var.attrs)
        is_update = "new_param" in attrs or "new_opt_state" in attrs
        if is_update:
            for i, a in enumerate(value.operands()):
                if isinstance(a, Var) and id(a) in grad_shard:
                    args[i] = grad_shard[id(a)]
                elif isinstance(a, Var) and a.attrs.get("param") and a.name in param_by_name:
                    args[i] = local_shard(a.name)
        if var.name in scales:
            args[1] = Const(2.0 / (scales[var.name] // n))
        if not isinstance(value, Call):
            raise NotATrainingStep(f"%{var.name}: only operator calls are supported before partitioning")
        new_value = Call(value.op, tuple(args), dict(value.attrs))

        if "grad_of" in attrs:
            pname = str(attrs.pop("grad_of"))
            full = Var(var.name, None, attrs)
            out.append((full, new_value))
            env[id(var)] = full
            summed = emit(f"{pname}_grad_rs", Call("reduce_scatter", (full,), {"n_ranks": n}))
            grad_shard[id(var)] = emit(f"{pname}_grad", Call("mul", (summed, Const(1.0 / n))), grad_of=pname)
        elif "new_param" in attrs:
            pname = str(attrs["new_param"])
            upd = emit(f"{pname}_shard_new", new_value)
            shape = ",".join(map(str, param_by_name[pname].ty.shape))
            full = Var(var.name, None, attrs)
            out.append((full, Call("all_gather", (upd,), {"n_ranks": n, "shape": shape})))
            env[id(var)] = full
        else:
            new_var = Var(var.name, None, attrs)
            out.append((new_var, new_value))
            env[id(var)] = new_var

    if isinstance(ret, Node):
        ret = rebuild_node(ret, tuple(arg(a) for a in ret.operands()), ty=None)
    else:
        ret = arg(ret)
    attrs = dict(fn.attrs)
    attrs["n_ranks"] = n
    return infer_types(make_anf(fn.name, params, out, ret, attrs))


def opt_state_bytes(fn: FunctionIR) -> dict[str, int]:
    """Bytes of every optimiser-state input, keyed by state."""
    return {str(p.attrs["opt_state"]): p.ty.size_bytes for p in fn.params if "opt_state" in p.attrs}


def split_batch(value, rank: int, n_ranks: int):
    """Rows of the global batch owned by ``rank``."""
    b = value.shape[0] // n_ranks
    return value[rank * b : (rank + 1) * b]
