"""Automatic mixed precision: cast insertion driven by a per-operator policy.

Every operator resolves to f16 or f32 from the policy and the dtypes reaching
it.  Tensor operands of the wrong dtype get a ``cast``.  When one value needs
the same cast for several consumers, consumers that can absorb an elementwise
producer into their fused closure each get their own (exclusive) cast, and the
rest share a single one.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .ir.convert import ensure_dataflow, rebuild_node, topo_order, dataflow_nodes
from .ir.expr import Call, ClosureCall, Const, Expr, Form, FunctionIR, NameSupply, Node, Tuple, Var, function_names
from .ir.types import DType, TensorType, TupleType
from .opreg import OpRegistry, default_registry


class Precision(enum.Enum):
    ALWAYS_F16 = "always_f16"
    ALWAYS_F32 = "always_f32"
    FOLLOW = "follow"


class Sharing(enum.Enum):
    SHARED = "shared"
    EXCLUSIVE = "exclusive"


_F16_OPS = ("matmul",)
_F32_OPS = (
    "sum", "mean", "sum_to", "softmax", "softmax_dx", "mse",
    "sgd_update", "adam_m", "adam_v", "adam_param",
)  # fmt: skip


@dataclass
class PrecisionPolicy:
    """Precision per base operator; ``cast`` is neutral and never listed."""

    rules: dict[str, Precision]

    @classmethod
    def default(cls, registry: OpRegistry | None = None) -> "PrecisionPolicy":
        reg = registry or default_registry()
        rules = {}
        for name in reg.base_ops:
            if name == "cast":
                continue
            if name in _F16_OPS:
                rules[name] = Precision.ALWAYS_F16
            elif name in _F32_OPS:
                rules[name] = Precision.ALWAYS_F32
            else:
                rules[name] = Precision.FOLLOW
        return cls(rules)

    @classmethod
    def uniform(cls, precision: Precision, registry: OpRegistry | None = None) -> "PrecisionPolicy":
        reg = registry or default_registry()
        return cls({n: precision for n in reg.base_ops if n != "cast"})

    def with_overrides(self, overrides: dict[str, str | Precision]) -> "PrecisionPolicy":
        rules = dict(self.rules)
        for op, p in overrides.items():
            if op not in rules:
                raise KeyError(f"policy override for unknown operator {op!r}")
            rules[op] = Precision(p)
        return PrecisionPolicy(rules)

    def of(self, op: str) -> Precision:
        base = op.rsplit(".", 1)[-1]
        try:
            return self.rules[base]
        except KeyError:
            raise KeyError(f"precision policy has no entry for {base!r}") from None


@dataclass(frozen=True)
class CastSite:
    producer: Expr
    consumer: Node
    target: DType
    sharing: Sharing = Sharing.SHARED


@dataclass
class CastPlan:
    sites: list[CastSite] = field(default_factory=list)

    def count(self) -> int:
        """Number of distinct cast operators the plan creates."""
        keys = set()
        for s in self.sites:
            keys.add((id(s.producer), s.target, id(s.consumer) if s.sharing is Sharing.EXCLUSIVE else None))
        return len(keys)


def _dtype(e: Expr) -> DType | None:
    if isinstance(e, Const) and e.is_scalar:
        return None
    ty = e.ty
    return ty.dtype if isinstance(ty, TensorType) else None


def _resolve(precision: Precision, in_dtypes: list[DType]) -> DType:
    if precision is Precision.ALWAYS_F16:
        return DType.F16
    if precision is Precision.ALWAYS_F32:
        return DType.F32
    uniq = set(in_dtypes)
    return uniq.pop() if len(uniq) == 1 else DType.F32


def plan_casts(fn: FunctionIR, policy: PrecisionPolicy, registry: OpRegistry | None = None):
    """Compute the resolved dtype of every node and the raw cast sites.

    Returns ``(nodes, new_types, needs)``: ``needs`` maps a consumer node id to
    its per-operand target dtype (``None`` where no cast is needed).
    """
    reg = registry or default_registry()
    nodes = topo_order(dataflow_nodes(fn))
    types: dict[int, object] = {id(p): p.ty for p in fn.params}
    needs: dict[int, list[DType | None]] = {}

    def cur(e: Expr):
        if isinstance(e, Node):
            return types[id(e)]
        if isinstance(e, Var):
            return types[id(e)]
        return None if e.is_scalar else e.ty

    for n in nodes:
        args = n.operands()
        arg_types = [cur(a) for a in args]
        targets: list[DType | None] = [None] * len(args)
        if isinstance(n, Call) and n.op.rsplit(".", 1)[-1] != "cast":
            tensor_dts = [t.dtype for t in arg_types if isinstance(t, TensorType)]
            want = _resolve(policy.of(n.op), tensor_dts)
            for i, t in enumerate(arg_types):
                if isinstance(t, TensorType) and t.dtype is not want:
                    targets[i] = want
                    arg_types[i] = t.with_dtype(want)
        elif isinstance(n, ClosureCall):
            for i, (t, p) in enumerate(zip(arg_types, n.fn.params)):
                if isinstance(t, TensorType) and t.dtype is not p.ty.dtype:
                    targets[i] = p.ty.dtype
                    arg_types[i] = p.ty
        needs[id(n)] = targets
        if isinstance(n, Call):
            types[id(n)] = reg.type_rel(n.op)(arg_types, dict(n.attrs))
        elif isinstance(n, ClosureCall):
            types[id(n)] = n.ty
        elif isinstance(n, Tuple):
            types[id(n)] = TupleType(tuple(arg_types))
        else:  # TupleGet
            types[id(n)] = arg_types[0].fields[n.index]
    return nodes, types, needs


def place_casts(fn: FunctionIR, nodes, needs, *, fusion_aware: bool = True, registry=None) -> CastPlan:
    """Decide exclusive or shared casts for every (producer, dtype) pair."""
    from .fusion import absorbs_elemwise_producer

    groups: dict[tuple[int, DType], list[tuple[Expr, Node]]] = {}
    for n in nodes:
        for a, target in zip(n.operands(), needs[id(n)]):
            if target is not None:
                key = (id(a), target)
                if all(c is not n for _, c in groups.get(key, [])):
                    groups.setdefault(key, []).append((a, n))
    plan = CastPlan()
    for (_, target), uses in groups.items():
        capable = [
            fusion_aware and len(uses) > 1 and isinstance(c, Call) and absorbs_elemwise_producer(c.op, registry=registry)
            for _, c in uses
        ]
        for (a, c), excl in zip(uses, capable):
            plan.sites.append(CastSite(a, c, target, Sharing.EXCLUSIVE if excl else Sharing.SHARED))
    return plan


def autocast(
    fn: FunctionIR,
    policy: PrecisionPolicy | None = None,
    *,
    fusion_aware: bool = True,
    registry: OpRegistry | None = None,
) -> FunctionIR:
    """Insert casts so every operator runs at its resolved precision."""
    policy = policy or PrecisionPolicy.default(registry)
    reg = registry or default_registry()
    fn = ensure_dataflow(fn)
    nodes, types, needs = plan_casts(fn, policy, reg)
    plan = place_casts(fn, nodes, needs, fusion_aware=fusion_aware, registry=reg)
    if not plan.sites:
        return fn
    site_of = {(id(s.producer), id(s.consumer), s.target): s for s in plan.sites}
    names = NameSupply(function_names(fn))
    memo: dict[int, Expr] = {}
    casts: dict[tuple, Node] = {}
    counter = 0

    def mapped(e: Expr) -> Expr:
        return memo.get(id(e), e)

    def cast_of(a: Expr, consumer: Node, target: DType) -> Node:
        nonlocal counter
        site = site_of[(id(a), id(consumer), target)]
        key = (id(a), target, id(consumer) if site.sharing is Sharing.EXCLUSIVE else None)
        if key not in casts:
            src = mapped(a)
            base = getattr(a, "name", None) or "c"
            ty = src.ty.with_dtype(target)
            casts[key] = Call(
                "cast", (src,), {"dtype": str(target)}, name=names(f"{base}_{target}"), ty=ty, order_index=counter
            )
            counter += 1
        return casts[key]

    for n in nodes:
        args = []
        for a, target in zip(n.operands(), needs[id(n)]):
            args.append(mapped(a) if target is None else cast_of(a, n, target))
        new = rebuild_node(n, tuple(args), ty=types[id(n)], order_index=counter)
        counter += 1
        memo[id(n)] = new

    body = fn.body
    if isinstance(body, Tuple) and body.name is None:
        fields = tuple(mapped(f) for f in body.fields)
        new_body: Expr = Tuple(fields, ty=TupleType(tuple(f.ty for f in fields)))
    else:
        new_body = mapped(body)
    return FunctionIR(fn.name, fn.params, new_body, Form.DATAFLOW, dict(fn.attrs), tuple(mapped(d) for d in fn.dead))


def cast_census(fn: FunctionIR) -> dict[str, int]:
    """Standalone cast calls, casts inside closures and closures containing one."""
    from .fusion import closures_of
    from .ir.expr import anf_bindings
    from .ir.convert import ensure_anf

    fn = ensure_dataflow(fn)
    nodes = dataflow_nodes(fn)
    standalone = sum(1 for n in nodes if isinstance(n, Call) and n.op.rsplit(".", 1)[-1] == "cast")
    inner = with_cast = 0
    for c in closures_of(fn):
        k = sum(
            1 for _, v in anf_bindings(ensure_anf(c.fn))[0] if isinstance(v, Call) and v.op.rsplit(".", 1)[-1] == "cast"
        )
        inner += k
        with_cast += k > 0
    return {"standalone": standalone, "fused": inner, "closures_with_cast": with_cast}


def f16_violations(fn: FunctionIR, policy: PrecisionPolicy) -> list[str]:
    """Names of ALWAYS_F32 operators that receive an f16 tensor (should be empty)."""
    out = []
    for n in dataflow_nodes(ensure_dataflow(fn)):
        if isinstance(n, Call) and n.op.rsplit(".", 1)[-1] != "cast":
            if policy.of(n.op) is Precision.ALWAYS_F32 and any(_dtype(a) is DType.F16 for a in n.operands()):
                out.append(n.name or n.op)
    return out


# ------------------------------------------------------------------ verification


@dataclass
class AmpReport:
    losses_amp: list[float]
    losses_f32: list[float]
    max_delta: float
    threshold: float
    loss_dtypes: list[str]
    reference_delta: float | None = None

    @property
    def divergent(self) -> bool:
        return self.max_delta > self.threshold


def amp_verify(
    fn_amp: FunctionIR,
    fn_f32: FunctionIR,
    model,
    steps: int,
    seed: int = 0,
    *,
    threshold: float = 5e-2,
    runner: str = "vm",
    dispatch=None,
    reference: bool = True,
) -> AmpReport:
    """Train both step functions on identical data and compare loss curves.

    With ``reference`` the f32 baseline is also run on data and initial
    parameters rounded through f16; the resulting loss gap is the size of
    deviation attributable to f16 input rounding alone.
    """
    from .training import initial_state, train

    amp = train(fn_amp, model, steps, seed, runner=runner, dispatch=dispatch)
    base = train(fn_f32, model, steps, seed, runner=runner, dispatch=dispatch)
    delta = max((abs(a - b) for a, b in zip(amp.losses, base.losses)), default=0.0)
    ref_delta = None
    if reference and steps:
        state = {k: _f16_round(v) for k, v in initial_state(fn_f32, model, seed).items()}
        pert = train(
            fn_f32,
            model,
            steps,
            seed,
            runner=runner,
            dispatch=dispatch,
            state=state,
            data_transform=lambda d: {k: _f16_round(v) for k, v in d.items()},
        )
        ref_delta = max(abs(a - b) for a, b in zip(pert.losses, base.losses))
    return AmpReport(amp.losses, base.losses, delta, threshold, amp.loss_dtypes, ref_delta)


def _f16_round(v: np.ndarray) -> np.ndarray:
    return v.astype(np.float16).astype(v.dtype)
