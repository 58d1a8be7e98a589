"""Optimised kernels: blocked matmul and the matmul+add+activation epilogue."""

from __future__ import annotations

import numpy as np

from ..ir.expr import Call, FunctionIR, Tuple, Var, anf_bindings
from ..ir.convert import ensure_anf
from .numerics import Numerics

TILE = 32


def blocked_matmul(a: np.ndarray, b: np.ndarray, tile: int = TILE) -> np.ndarray:
    """``a @ b`` in 3-d tiles; each tile product goes through BLAS.

    Remainder tiles at the matrix edges are simply shorter slices.
    """
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    for i0 in range(0, m, tile):
        i1 = min(i0 + tile, m)
        for j0 in range(0, n, tile):
            j1 = min(j0 + tile, n)
            acc = np.zeros((i1 - i0, j1 - j0), dtype=a.dtype)
            for k0 in range(0, k, tile):
                k1 = min(k0 + tile, k)
                acc += a[i0:i1, k0:k1] @ b[k0:k1, j0:j1]
            out[i0:i1, j0:j1] = acc
    return out


def matmul(args, attrs, ctx):
    nm = Numerics.of(args)
    a, b = (nm.up(x) for x in args)
    return [nm.out(blocked_matmul(a, b, int(attrs.get("tile", TILE))))]


OPT_KERNELS = {"matmul": matmul}

_ACTIVATIONS = {
    "relu": lambda x: np.where(x > 0, x, np.zeros_like(x)),
    "tanh": np.tanh,
}


class EpilogueMismatch(ValueError):
    pass


def _base(op: str) -> str:
    return op.rsplit(".", 1)[-1]


def compile_epilogue(fn: FunctionIR, tile: int = TILE):
    """Kernel for a closure whose body is ``act(add(matmul(a, b), c))``.

    The closure may return any of the three intermediates (as a tuple); all
    requested ones are produced.  Raises :class:`EpilogueMismatch` for any
    other body.
    """
    fn = ensure_anf(fn)
    bindings, ret = anf_bindings(fn)
    ops = [_base(v.op) if isinstance(v, Call) else None for _, v in bindings]
    if len(bindings) != 3 or ops[0] != "matmul" or ops[1] != "add" or ops[2] not in _ACTIVATIONS:
        raise EpilogueMismatch(f"closure {fn.name}: body {ops} is not matmul+add+activation")
    (mm_var, mm), (add_var, add), (act_var, act) = bindings
    params = {id(p): i for i, p in enumerate(fn.params)}
    if not all(isinstance(a, Var) and id(a) in params for a in mm.args):
        raise EpilogueMismatch("matmul operands must be closure parameters")
    add_args = list(add.args)
    if sum(1 for a in add_args if a is mm_var) != 1:
        raise EpilogueMismatch("add must consume the matmul result exactly once")
    mm_first = add_args[0] is mm_var
    bias = add_args[1] if mm_first else add_args[0]
    if act.args[0] is not add_var:
        raise EpilogueMismatch("activation must consume the add result")
    slots = {id(mm_var): 0, id(add_var): 1, id(act_var): 2}
    fields = ret.fields if isinstance(ret, Tuple) else (ret,)
    try:
        out_slots = [slots[id(f)] for f in fields]
    except KeyError:
        raise EpilogueMismatch("closure returns a non-intermediate value") from None
    ia, ib = (params[id(a)] for a in mm.args)
    bias_index = params.get(id(bias)) if isinstance(bias, Var) else None
    act_fn = _ACTIVATIONS[ops[2]]

    def kernel(args, attrs, ctx):
        nm = Numerics.of(args)
        a, b = nm.up(args[ia]), nm.up(args[ib])
        c = nm.up(args[bias_index]) if bias_index is not None else nm.up(bias.value)
        # epilogue applied to the whole output; identical to per-tile application
        h = nm.rnd(blocked_matmul(a, b, tile))
        z = nm.rnd(h + c if mm_first else c + h)
        y = nm.rnd(act_fn(z))
        vals = (h, z, y)
        return [nm.out(vals[s]) for s in out_slots]

    return kernel
