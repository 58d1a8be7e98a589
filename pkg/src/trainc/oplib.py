"""Built-in base operators, their type relations, and the two stock dialects.

Type relations receive one entry per argument -- a ``TensorType``, or ``None``
for a scalar literal, which takes the dtype of its tensor siblings -- plus the
call attributes, and return the output type.
"""

from __future__ import annotations

import math

from .errors import DTypeMismatch, ShapeMismatch, TypeInferenceError
from .ir.types import DType, TensorType
from .opreg import BaseOp, DialectOp, OpCategory, OpRegistry

E, I, R, O = OpCategory.ELEMWISE, OpCategory.INJECTIVE, OpCategory.REDUCTION, OpCategory.OPAQUE


def shape_attr(shape) -> str:
    return ",".join(str(int(d)) for d in shape)


def parse_shape_attr(text) -> tuple[int, ...]:
    if isinstance(text, int):
        return (text,)
    return tuple(int(t) for t in str(text).split(","))


def _tensors(op: str, types: list) -> list[TensorType]:
    ts = [t for t in types if t is not None]
    if not ts:
        raise TypeInferenceError(f"{op}: needs at least one tensor argument")
    for t in ts:
        if not isinstance(t, TensorType):
            raise TypeInferenceError(f"{op}: tuple-typed argument")
    return ts


def _common_dtype(op: str, types: list) -> DType:
    ts = _tensors(op, types)
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise DTypeMismatch(f"{op}: mixed dtypes {sorted(d.value for d in dtypes)} need an explicit cast")
    return ts[0].dtype


def broadcast_shapes(op: str, shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    """Trailing-dimension broadcasting (size-1 dims stretch)."""
    rank = max(len(s) for s in shapes)
    out = []
    for k in range(1, rank + 1):
        dims = {s[-k] for s in shapes if len(s) >= k}
        big = dims - {1}
        if len(big) > 1:
            raise ShapeMismatch(f"{op}: cannot broadcast shapes {shapes}")
        out.append(big.pop() if big else 1)
    return tuple(reversed(out))


def elemwise_rel(op: str):
    def rel(types, attrs):
        dtype = _common_dtype(op, types)
        shape = broadcast_shapes(op, [t.shape for t in types if t is not None])
        return TensorType(dtype, shape)

    return rel


def first_arg_rel(op: str):
    """Elementwise update whose result keeps the first argument's type."""
    base = elemwise_rel(op)

    def rel(types, attrs):
        out = base(types, attrs)
        first = types[0]
        if first is None or out.shape != first.shape:
            raise ShapeMismatch(f"{op}: operands broadcast to {out.shape}, expected {first and first.shape}")
        return first

    return rel


def _unary(op: str):
    def rel(types, attrs):
        (t,) = _tensors(op, types)
        return t

    return rel


def _cast_rel(types, attrs):
    (t,) = _tensors("cast", types)
    return t.with_dtype(DType.parse(attrs["dtype"]))


def _transpose_rel(types, attrs):
    (t,) = _tensors("transpose", types)
    if len(t.shape) != 2:
        raise ShapeMismatch(f"transpose: expected a 2-d tensor, got {t}")
    return TensorType(t.dtype, t.shape[::-1])


def _reshape_rel(types, attrs):
    (t,) = _tensors("reshape", types)
    shape = parse_shape_attr(attrs["shape"])
    if math.prod(shape) != t.numel:
        raise ShapeMismatch(f"reshape: {t} to {shape} changes element count")
    return TensorType(t.dtype, shape)


def _broadcast_to_rel(types, attrs):
    (t,) = _tensors("broadcast_to", types)
    shape = parse_shape_attr(attrs["shape"])
    if broadcast_shapes("broadcast_to", [t.shape, shape]) != shape:
        raise ShapeMismatch(f"broadcast_to: {t} does not broadcast to {shape}")
    return TensorType(t.dtype, shape)


def _sum_to_rel(types, attrs):
    (t,) = _tensors("sum_to", types)
    shape = parse_shape_attr(attrs["shape"])
    if broadcast_shapes("sum_to", [t.shape, shape]) != t.shape:
        raise ShapeMismatch(f"sum_to: {shape} does not broadcast to {t}")
    return TensorType(t.dtype, shape)


def _full_reduce(op: str):
    def rel(types, attrs):
        (t,) = _tensors(op, types)
        return TensorType(t.dtype, (1,))

    return rel


def _matmul_rel(types, attrs):
    if any(t is None for t in types):
        raise TypeInferenceError("matmul: scalar operand")
    a, b = types
    dtype = _common_dtype("matmul", types)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeMismatch(f"matmul: expected 2-d operands, got {a} and {b}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions differ ({a} x {b})")
    return TensorType(dtype, (a.shape[0], b.shape[1]))


def _mse_rel(types, attrs):
    dtype = _common_dtype("mse", types)
    a, b = types
    if a is None or b is None or a.shape != b.shape:
        raise ShapeMismatch(f"mse: prediction {a} and label {b} differ")
    return TensorType(dtype, (1,))


def _softmax_rel(types, attrs):
    (t,) = _tensors("softmax", types)
    return t


def _same_shape(op: str):
    def rel(types, attrs):
        dtype = _common_dtype(op, types)
        shapes = {t.shape for t in types if t is not None}
        if len(shapes) != 1:
            raise ShapeMismatch(f"{op}: operand shapes differ: {sorted(shapes)}")
        return TensorType(dtype, shapes.pop())

    return rel


def shard_len(numel: int, n_ranks: int) -> int:
    return -(-numel // n_ranks)


def _reduce_scatter_rel(types, attrs):
    (t,) = _tensors("reduce_scatter", types)
    return TensorType(t.dtype, (shard_len(t.numel, int(attrs["n_ranks"])),))


def _local_shard_rel(types, attrs):
    (t,) = _tensors("local_shard", types)
    return TensorType(t.dtype, (shard_len(t.numel, int(attrs["n_ranks"])),))


def _all_gather_rel(types, attrs):
    (t,) = _tensors("all_gather", types)
    n = int(attrs["n_ranks"])
    shape = parse_shape_attr(attrs["shape"])
    if len(t.shape) != 1 or t.shape[0] != shard_len(math.prod(shape), n):
        raise ShapeMismatch(f"all_gather: shard {t} does not match full shape {shape} over {n} ranks")
    return TensorType(t.dtype, shape)


BASE_OPS: list[BaseOp] = [
    BaseOp("add", 2, elemwise_rel("add"), E),
    BaseOp("sub", 2, elemwise_rel("sub"), E),
    BaseOp("mul", 2, elemwise_rel("mul"), E),
    BaseOp("div", 2, elemwise_rel("div"), E),
    BaseOp("neg", 1, _unary("neg"), E),
    BaseOp("tanh", 1, _unary("tanh"), E),
    BaseOp("relu", 1, _unary("relu"), E),
    BaseOp("gtz", 1, _unary("gtz"), E),
    BaseOp("tanh_dx", 2, elemwise_rel("tanh_dx"), E),
    BaseOp("cast", 1, _cast_rel, E),
    BaseOp("transpose", 1, _transpose_rel, I),
    BaseOp("reshape", 1, _reshape_rel, I),
    BaseOp("broadcast_to", 1, _broadcast_to_rel, I),
    BaseOp("sum", 1, _full_reduce("sum"), R),
    BaseOp("mean", 1, _full_reduce("mean"), R),
    BaseOp("sum_to", 1, _sum_to_rel, R),
    BaseOp("matmul", 2, _matmul_rel, O),
    BaseOp("softmax", 1, _softmax_rel, O),
    BaseOp("softmax_dx", 2, _same_shape("softmax_dx"), O),
    BaseOp("mse", 2, _mse_rel, O),
    BaseOp("sgd_update", 2, first_arg_rel("sgd_update"), E),
    BaseOp("adam_m", 2, first_arg_rel("adam_m"), E),
    BaseOp("adam_v", 2, first_arg_rel("adam_v"), E),
    BaseOp("adam_param", 4, first_arg_rel("adam_param"), E),
    BaseOp("all_reduce", 1, _unary("all_reduce"), O, {"collective": "all_reduce"}),
    BaseOp("reduce_scatter", 1, _reduce_scatter_rel, O, {"collective": "reduce_scatter"}),
    BaseOp("all_gather", 1, _all_gather_rel, O, {"collective": "all_gather"}),
    BaseOp("local_shard", 1, _local_shard_rel, O, {"rank_dependent": True}),
]

COLLECTIVES = frozenset({"all_reduce", "reduce_scatter", "all_gather"})

REF_PRIORITY = 5
OPT_PRIORITY = 12


def build_default_registry() -> OpRegistry:
    reg = OpRegistry()
    for op in BASE_OPS:
        reg.register_base_op(op)
    for op in BASE_OPS:
        reg.register_dialect_op(DialectOp("ref", op.name, REF_PRIORITY))
    reg.register_dialect_op(DialectOp("opt", "matmul", OPT_PRIORITY, extras={"tile": 32}))
    return reg
