from __future__ import annotations

import sys

import numpy as np
import pytest

from trainc.autodiff import Adam, SGD, TrainingSpec, autodiff
from trainc.ir import Tuple, Var, anf_bindings, infer_types, make_anf, parse_function
from trainc.ir.expr import iter_var_uses
from trainc.models import get_model


def parse(src: str):
    """Parse and type a single-function IR snippet."""
    return infer_types(parse_function(src))


def model_inputs(fn, model, seed: int = 0, step: int = 0) -> list[np.ndarray]:
    """Positional inputs for a model's forward or training function."""
    values = dict(model.init_params(seed))
    x, label = model.data(seed, step)
    values.update(x=x, label=label)
    out = []
    for p in fn.params:
        if p.name in values:
            out.append(values[p.name])
        else:
            out.append(np.zeros(p.ty.shape, dtype=p.ty.dtype.np))
    return out


@pytest.fixture(scope="session")
def mlp2():
    return get_model("mlp2")


@pytest.fixture(scope="session")
def mlp3():
    return get_model("mlp3")


@pytest.fixture(scope="session")
def mlp2_sgd(mlp2):
    return autodiff(mlp2.forward(), TrainingSpec(optimizer=SGD()))


@pytest.fixture(scope="session")
def mlp2_adam(mlp2):
    return autodiff(mlp2.forward(), TrainingSpec(optimizer=Adam()))


@pytest.fixture(scope="session")
def mlp3_sgd(mlp3):
    return autodiff(mlp3.forward(), TrainingSpec(optimizer=SGD()))


DIAMOND = """fn main(%x: f32[100]) {
  let %a = broadcast_to(%x, shape="10,100");
  let %b = neg(%x);
  let %c = add(%a, %b);
  %c
}"""

# small graphs with at most ten movable bindings where the order matters;
# sizes: f32[100] = 400 B, f32[10,100] = 4000 B, f32[1] = 4 B
CURATED = {
    "diamond": DIAMOND,
    "two_reductions": """fn main(%x: f32[100], %y: f32[100]) {
  let %a = broadcast_to(%x, shape="10,100");
  let %b = broadcast_to(%y, shape="10,100");
  let %sa = sum(%a);
  let %sb = sum(%b);
  let %o = add(%sa, %sb);
  %o
}""",
    "fan": """fn main(%x: f32[100]) {
  let %a = broadcast_to(%x, shape="10,100");
  let %b = broadcast_to(%x, shape="10,100");
  let %c = broadcast_to(%x, shape="10,100");
  let %ta = tanh(%a);
  let %sa = sum(%ta);
  let %sb = sum(%b);
  let %sc = sum(%c);
  let %u = add(%sa, %sb);
  let %o = add(%u, %sc);
  %o
}""",
    "fan_reduce": """fn main(%x: f32[10,100]) {
  let %p = tanh(%x);
  let %q = relu(%x);
  let %r = neg(%x);
  let %sp = sum(%p);
  let %sq = sum(%q);
  let %sr = sum(%r);
  let %u = add(%sp, %sq);
  let %o = add(%u, %sr);
  %o
}""",
}

# graphs where the greedy p-c rule is known to miss the optimum (myopic choice)
GAP_CASES = {
    "late_small": """fn main(%x: f32[100]) {
  let %big = broadcast_to(%x, shape="10,100");
  let %n = neg(%x);
  let %m = relu(%n);
  let %s = sum(%big);
  let %o = add(%m, %s);
  %o
}""",
    "fan_in": """fn main(%x: f32[10,100], %y: f32[100]) {
  let %p = tanh(%x);
  let %q = relu(%x);
  let %r = neg(%y);
  let %sp = sum(%p);
  let %sq = sum(%q);
  let %w = add(%sp, %sq);
  let %o = add(%r, %w);
  %o
}""",
}


def topological_orders(fn):
    """Every dependence-respecting reordering of an ANF function's bindings."""
    bindings, ret = anf_bindings(fn)
    names = {v.name for v, _ in bindings}
    deps = [{u.name for u in iter_var_uses(value) if u.name in names} for _, value in bindings]

    def extend(done: frozenset, acc: list):
        if len(acc) == len(bindings):
            yield make_anf(fn.name, fn.params, list(acc), ret, fn.attrs)
            return
        for i, (var, _) in enumerate(bindings):
            if var.name not in done and deps[i] <= done:
                yield from extend(done | {var.name}, acc + [bindings[i]])

    yield from extend(frozenset(), [])


def accounting_peak(fn, pin_params: bool = True) -> int:
    """Peak bytes under the planner's model, recomputed from scratch.

    A tensor is resident from its producing binding through its last use;
    parameters (when pinned) and returned values stay resident throughout.
    """
    bindings, ret = anf_bindings(fn)
    n = len(bindings)
    size = {p.name: p.ty.size_bytes for p in fn.params}
    span = {p.name: [0, n - 1 if pin_params else 0] for p in fn.params}
    for i, (var, value) in enumerate(bindings):
        for u in iter_var_uses(value):
            span[u.name][1] = max(span[u.name][1], i)
        size[var.name] = var.ty.size_bytes
        span[var.name] = [i, i]
    for u in ret.fields if isinstance(ret, Tuple) else (ret,):
        if isinstance(u, Var):
            span[u.name][1] = n - 1
    return max(sum(size[k] for k, (lo, hi) in span.items() if lo <= i <= hi) for i in range(n))


def deep_chain(layers: int = 6):
    """A forward pass whose activations outweigh its single parameter."""
    lines = ["let %h0 = mul(%x, %w);"]
    for i in range(1, layers + 1):
        lines += [f"let %t{i} = tanh(%h{i - 1});", f"let %h{i} = mul(%t{i}, %w);"]
    body = "\n  ".join(lines)
    return parse(f"fn main(%x: f32[256,64], %w @{{param=1}}: f32[64]) {{\n  {body}\n  %h{layers}\n}}")


def corpus(n_random: int = 50):
    """(name, function, inputs) triples spanning every kind of graph the passes emit."""
    from trainc.autocast import autocast
    from trainc.fusion import FusionConfig, fuse_pass
    from trainc.ir import to_anf
    from trainc.memsched import schedule
    from trainc.testing import random_function, random_inputs

    out = []
    ref_fusion = FusionConfig(dialects=frozenset({"ref"}))
    for name in ("mlp2", "mlp3"):
        m = get_model(name)
        out.append((f"{name}.forward", infer_types(m.forward()), None, m))
        for opt in (SGD(), Adam()):
            train = autodiff(m.forward(), TrainingSpec(optimizer=opt))
            tag = f"{name}.{type(opt).__name__.lower()}"
            out.append((tag, train, None, m))
            out.append((f"{tag}.scheduled", schedule(train), None, m))
            out.append((f"{tag}.fused", to_anf(fuse_pass(train, cfg=ref_fusion)), None, m))
            out.append((f"{tag}.amp", to_anf(autocast(train)), None, m))
    for name, src in {**CURATED, **GAP_CASES}.items():
        fn = parse(src)
        out.append((f"curated.{name}", fn, random_inputs(fn, 0), None))
    chain = autodiff(deep_chain(), TrainingSpec())
    out.append(("deep_chain", chain, random_inputs(chain, 0, scale=0.5), None))
    for seed in range(n_random):
        fn = random_function(seed)
        out.append((f"random.{seed}", fn, random_inputs(fn, seed), None))
    return [(name, fn, inputs if inputs is not None else model_inputs(fn, m)) for name, fn, inputs, m in out]


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number].line())
