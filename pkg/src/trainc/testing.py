"""Oracles shared by the test-suite and demos.

* :func:`gradcheck` compares autodiff gradients with central finite
  differences, all evaluated in float64 by the reference interpreter.
* :func:`random_function` generates random well-typed ANF functions for
  round-trip and equivalence properties.
* :func:`rel_error` is the normwise relative error used for every tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import AdjointRegistry, TrainingSpec, autodiff
from .ir.expr import Call, Const, FunctionIR, NameSupply, Tuple, Var, make_anf
from .ir.types import DType, TensorType
from .vm.interpreter import evaluate


def rel_error(a, b) -> float:
    """max|a - b| / max|b| (0 when both are identically zero)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    if scale == 0.0:
        return diff
    return diff / scale


def max_rel_error(xs, ys) -> float:
    return max((rel_error(x, y) for x, y in zip(xs, ys)), default=0.0)


def bits_equal(xs, ys) -> bool:
    return len(xs) == len(ys) and all(
        np.asarray(x).dtype == np.asarray(y).dtype and np.asarray(x).tobytes() == np.asarray(y).tobytes()
        for x, y in zip(xs, ys)
    )


@dataclass
class GradcheckResult:
    errors: dict[str, float]
    checked: int
    skipped: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def _loss_and_relu_signs(fn: FunctionIR, inputs) -> tuple[float, bytes]:
    """Loss of a training function plus the sign pattern of every relu input."""
    signs: list[bytes] = []

    def hook(i, name, value, result):
        if isinstance(value, Call) and value.op.split(".")[-1] == "relu":
            signs.append(np.packbits(np.asarray(result) > 0).tobytes())

    outs = evaluate(fn, inputs, precision="f64", on_step=hook)
    return float(outs[0][0]), b"".join(signs)


def gradcheck(
    fwd: FunctionIR,
    inputs: dict[str, np.ndarray],
    *,
    coords_per_param: int = 4,
    seed: int = 0,
    adjoints: AdjointRegistry | None = None,
) -> GradcheckResult:
    """Autodiff vs central differences on random coordinates of every parameter.

    ``inputs`` maps every parameter of the training function (including
    ``label``) to a value.  The step is ``h = 1e-3 * max(1, |theta|)``;
    coordinates whose perturbation flips a relu input are skipped.
    """
    train = autodiff(fwd, TrainingSpec(optimizer=None), adjoints)
    params = [p for p in train.params if p.attrs.get("param")]
    base = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    outs = evaluate(train, base, precision="f64")
    grads = dict(zip((p.name for p in params), outs[1:]))
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked = skipped = 0
    for p in params:
        theta = base[p.name]
        k = min(coords_per_param, theta.size)
        idx = rng.choice(theta.size, size=k, replace=False)
        ad, fd = [], []
        for i in idx:
            h = 1e-3 * max(1.0, abs(float(theta.flat[i])))
            vals = []
            signs = []
            for s in (+1.0, -1.0):
                pert = dict(base)
                t = theta.copy()
                t.flat[i] += s * h
                pert[p.name] = t
                loss, sign = _loss_and_relu_signs(train, pert)
                vals.append(loss)
                signs.append(sign)
            if signs[0] != signs[1]:
                skipped += 1
                continue
            checked += 1
            fd.append((vals[0] - vals[1]) / (2 * h))
            ad.append(float(grads[p.name].flat[i]))
        errors[p.name] = rel_error(ad, fd) if ad else 0.0
    return GradcheckResult(errors, checked, skipped)


# ------------------------------------------------------------------ random programs

_UNARY = ("neg", "tanh", "relu")
_BINARY = ("add", "sub", "mul")


def random_function(seed: int, n_ops: int | None = None, attrs: bool = True) -> FunctionIR:
    """A random typed ANF function over small f32 tensors.

    Uses elementwise, injective, reduction and matmul ops, scalar literals,
    variable attributes, fan-out and tuple returns.
    """
    rng = np.random.default_rng(seed)
    n_ops = n_ops or int(rng.integers(3, 12))
    rows, cols = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    full = TensorType(DType.F32, (rows, cols))
    params = [Var(f"p{i}", full) for i in range(int(rng.integers(1, 4)))]
    if attrs and rng.random() < 0.5:
        params.append(Var("w", TensorType(DType.F32, (cols,)), {"param": 1}))
    names = NameSupply({p.name for p in params})
    pool: list[Var] = [p for p in params]
    bindings = []
    for _ in range(n_ops):
        full_vars = [v for v in pool if v.ty.shape == full.shape]
        kind = rng.random()
        var_attrs = {}
        if attrs and rng.random() < 0.2:
            var_attrs = {"tag": str(rng.choice(["fwd", "bwd"])), "k": int(rng.integers(0, 9))}
        if kind < 0.35:
            op = str(rng.choice(_UNARY))
            a = full_vars[int(rng.integers(len(full_vars)))]
            call = Call(op, (a,), {})
            ty = full
        elif kind < 0.75:
            op = str(rng.choice(_BINARY))
            a = full_vars[int(rng.integers(len(full_vars)))]
            b = pool[int(rng.integers(len(pool)))]
            if b.ty.shape not in (full.shape, (cols,)) or rng.random() < 0.15:
                b = Const(float(np.float32(rng.normal())))
            args = (a, b) if rng.random() < 0.7 else (b, a)
            call = Call(op, args, {})
            ty = full
        elif kind < 0.85:
            a = full_vars[int(rng.integers(len(full_vars)))]
            call = Call("sum_to", (a,), {"shape": str(cols)})
            ty = TensorType(DType.F32, (cols,))
        else:
            a = full_vars[int(rng.integers(len(full_vars)))]
            tvar = Var(names("tr"), TensorType(DType.F32, (cols, rows)))
            square = Var(names("sq"), TensorType(DType.F32, (cols, cols)))
            bindings.append((tvar, Call("transpose", (a,), {})))
            bindings.append((square, Call("matmul", (tvar, a), {})))
            pool += [tvar, square]
            call = Call("matmul", (a, square), {})
            ty = full
        var = Var(names("v"), ty, var_attrs)
        bindings.append((var, call))
        pool.append(var)
    results = [v for v, _ in bindings]
    n_ret = int(rng.integers(1, min(3, len(results)) + 1))
    picked = sorted(rng.choice(len(results), size=n_ret, replace=False))
    ret = results[picked[-1]] if n_ret == 1 else Tuple(tuple(results[i] for i in picked))
    return make_anf("main", params, bindings, ret)


def random_inputs(fn: FunctionIR, seed: int, scale: float = 1.0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [(scale * rng.standard_normal(p.ty.shape)).astype(p.ty.dtype.np) for p in fn.params]
