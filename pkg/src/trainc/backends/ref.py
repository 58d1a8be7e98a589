"""Reference kernels: the ground-truth semantics of every base operator.

Every kernel has the signature ``kernel(args, attrs, ctx) -> list[ndarray]``
where ``args`` holds arrays and plain Python floats (scalar literals).  They
are pure and deterministic: elementwise arithmetic follows IEEE f32, f16
storage is rounded after each primitive step, and reductions accumulate left
to right.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..oplib import parse_shape_attr, shard_len
from .numerics import F64, Numerics, left_fold_sum

Kernel = Callable[[list, dict, "ExecContext"], list]


@dataclass(frozen=True)
class ExecContext:
    rank: int = 0
    n_ranks: int = 1


LOCAL = ExecContext()


def _binary(fn):
    def kernel(args, attrs, ctx):
        nm = Numerics.of(args)
        a, b = (nm.up(x) for x in args)
        return [nm.out(nm.rnd(fn(a, b)))]

    return kernel


def _unary(fn):
    def kernel(args, attrs, ctx):
        nm = Numerics.of(args)
        return [nm.out(nm.rnd(fn(nm.up(args[0]))))]

    return kernel


def _relu(x):
    return np.where(x > 0, x, np.zeros_like(x))


def _gtz(x):
    return (x > 0).astype(x.dtype)


def tanh_dx(args, attrs, ctx):
    """``dy * (1 - y*y)`` with the same rounding steps as the decomposed form."""
    nm = Numerics.of(args)
    dy, y = (nm.up(x) for x in args)
    one = nm.up(1.0)
    yy = nm.rnd(y * y)
    return [nm.out(nm.rnd(dy * nm.rnd(one - yy)))]


def cast(args, attrs, ctx):
    (x,) = args
    if x.dtype == F64:
        return [x.copy()]
    target = np.float16 if attrs["dtype"] == "f16" else np.float32
    return [np.ascontiguousarray(x.astype(target))]


def transpose(args, attrs, ctx):
    return [np.ascontiguousarray(args[0].T)]


def reshape(args, attrs, ctx):
    return [args[0].reshape(parse_shape_attr(attrs["shape"])).copy()]


def broadcast_to(args, attrs, ctx):
    return [np.ascontiguousarray(np.broadcast_to(args[0], parse_shape_attr(attrs["shape"])))]


def sum_(args, attrs, ctx):
    nm = Numerics.of(args)
    return [nm.out(left_fold_sum(nm.up(args[0])))]


def mean(args, attrs, ctx):
    nm = Numerics.of(args)
    x = nm.up(args[0])
    s = nm.rnd(left_fold_sum(x))
    return [nm.out(nm.rnd(s / nm.compute.type(x.size)))]


def sum_to(args, attrs, ctx):
    """Reduce broadcast dimensions back to ``shape``, one axis at a time."""
    nm = Numerics.of(args)
    x = nm.up(args[0])
    target = parse_shape_attr(attrs["shape"])
    padded = (1,) * (x.ndim - len(target)) + tuple(target)
    for axis in range(x.ndim):
        if padded[axis] == 1 and x.shape[axis] != 1:
            x = left_fold_sum(x, axis=axis, keepdims=True)
    return [nm.out(nm.rnd(x).reshape(target))]


def matmul(args, attrs, ctx):
    """Triple-loop semantics: each output element is a left fold over k.

    Vectorised over (i, j) as a sequence of rank-1 updates, which performs the
    same scalar operations in the same order as the naive loop nest.
    f16 operands accumulate in f32 and are rounded once at the end.
    """
    nm = Numerics.of(args)
    a, b = (nm.up(x) for x in args)
    m, k = a.shape
    n = b.shape[1]
    acc = np.zeros((m, n), dtype=nm.compute)
    for kk in range(k):
        acc += a[:, kk : kk + 1] * b[kk : kk + 1, :]
    return [nm.out(acc)]


def softmax(args, attrs, ctx):
    nm = Numerics.of(args)
    x = nm.up(args[0])
    e = nm.rnd(np.exp(nm.rnd(x - x.max(axis=-1, keepdims=True))))
    s = nm.rnd(left_fold_sum(e, axis=-1, keepdims=True))
    return [nm.out(nm.rnd(e / s))]


def softmax_dx(args, attrs, ctx):
    nm = Numerics.of(args)
    dy, y = (nm.up(x) for x in args)
    s = nm.rnd(left_fold_sum(nm.rnd(dy * y), axis=-1, keepdims=True))
    return [nm.out(nm.rnd(y * nm.rnd(dy - s)))]


def mse(args, attrs, ctx):
    """``mean((pred - label)^2)`` as a left fold."""
    nm = Numerics.of(args)
    p, t = (nm.up(x) for x in args)
    d = nm.rnd(p - t)
    s = nm.rnd(left_fold_sum(nm.rnd(d * d)))
    return [nm.out(nm.rnd(s / nm.compute.type(p.size)))]


def sgd_update(args, attrs, ctx):
    nm = Numerics.of(args)
    p, g = (nm.up(x) for x in args)
    lr = nm.compute.type(attrs["lr"])
    return [nm.out(nm.rnd(p - nm.rnd(lr * g)))]


def adam_m(args, attrs, ctx):
    nm = Numerics.of(args)
    m, g = (nm.up(x) for x in args)
    b1 = nm.compute.type(attrs["beta1"])
    one = nm.compute.type(1.0)
    return [nm.out(nm.rnd(nm.rnd(b1 * m) + nm.rnd((one - b1) * g)))]


def adam_v(args, attrs, ctx):
    nm = Numerics.of(args)
    v, g = (nm.up(x) for x in args)
    b2 = nm.compute.type(attrs["beta2"])
    one = nm.compute.type(1.0)
    return [nm.out(nm.rnd(nm.rnd(b2 * v) + nm.rnd(nm.rnd((one - b2) * g) * g)))]


def adam_param(args, attrs, ctx):
    """Bias-corrected Adam step; ``t`` is the (already incremented) step count."""
    nm = Numerics.of(args)
    p, m, v, t = (nm.up(x) for x in args)
    c = nm.compute.type
    lr, eps, b1, b2 = c(attrs["lr"]), c(attrs["eps"]), c(attrs["beta1"]), c(attrs["beta2"])
    one = c(1.0)
    step = t.reshape(-1)[0]
    mhat = nm.rnd(m / (one - np.power(b1, step)))
    vhat = nm.rnd(v / (one - np.power(b2, step)))
    denom = nm.rnd(nm.rnd(np.sqrt(vhat)) + eps)
    return [nm.out(nm.rnd(p - nm.rnd(lr * nm.rnd(mhat / denom))))]


def pad_flat(x: np.ndarray, n_ranks: int) -> np.ndarray:
    """Flatten and zero-pad to ``n_ranks * shard_len`` elements."""
    flat = np.ravel(x)
    total = shard_len(flat.size, n_ranks) * n_ranks
    if total == flat.size:
        return flat.copy()
    out = np.zeros(total, dtype=x.dtype)
    out[: flat.size] = flat
    return out


def local_shard(args, attrs, ctx):
    (x,) = args
    n = int(attrs["n_ranks"])
    s = shard_len(x.size, n)
    return [pad_flat(x, n)[ctx.rank * s : (ctx.rank + 1) * s].copy()]


REF_KERNELS: dict[str, Kernel] = {
    "add": _binary(np.add),
    "sub": _binary(np.subtract),
    "mul": _binary(np.multiply),
    "div": _binary(np.divide),
    "neg": _unary(np.negative),
    "tanh": _unary(np.tanh),
    "relu": _unary(_relu),
    "gtz": _unary(_gtz),
    "tanh_dx": tanh_dx,
    "cast": cast,
    "transpose": transpose,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "sum": sum_,
    "mean": mean,
    "sum_to": sum_to,
    "matmul": matmul,
    "softmax": softmax,
    "softmax_dx": softmax_dx,
    "mse": mse,
    "sgd_update": sgd_update,
    "adam_m": adam_m,
    "adam_v": adam_v,
    "adam_param": adam_param,
    "local_shard": local_shard,
}
