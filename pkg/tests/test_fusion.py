from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trainc.errors import DuplicateRegistration, UnknownOp
from trainc.fusion import (
    FusionConfig,
    FusionPattern,
    PNode,
    closures_of,
    default_patterns,
    fuse_pass,
    fusion_equivalence_check,
    gemm_epilogue,
    kernel_count,
    materialization_set,
)
from trainc.ir import Call, anf_bindings, check_wellformed, print_text, to_anf
from trainc.ir.expr import ClosureCall
from trainc.opreg import DispatchConfig, dispatch_pass
from trainc.testing import max_rel_error, random_function, random_inputs
from trainc.vm.bytecode import compile_bytecode
from trainc.vm.machine import run
from trainc.vm.interpreter import evaluate

from conftest import model_inputs, parse

EPILOGUE_CHAIN = """fn main(%x: f32[4,8], %w: f32[8,8], %b: f32[8]) {
  let %h = matmul(%x, %w);
  let %a = add(%h, %b);
  let %r = relu(%a);
  let %s = mul(%r, 2.0);
  let %n = neg(%s);
  %n
}"""

SHARED_ADD = """fn main(%x: f32[4,8], %w: f32[8,8], %b: f32[8]) {
  let %h = matmul(%x, %w);
  let %a = add(%h, %b);
  let %r1 = relu(%a);
  let %r2 = relu(%a);
  (%r1, %r2)
}"""

REF_ONLY = FusionConfig(dialects=frozenset({"ref"}))


def members(c: ClosureCall) -> list[str]:
    return [v.name for v, _ in anf_bindings(to_anf(c.fn))[0]]


def pattern_of(c: ClosureCall) -> str:
    return c.fn.attrs.get("pattern")


def test_register_pattern_errors():
    reg = default_patterns()
    with pytest.raises(UnknownOp):
        reg.register_pattern(FusionPattern("opt.bad", "opt", 1, PNode("conv2d", (None,))))
    with pytest.raises(DuplicateRegistration):
        reg.register_pattern(gemm_epilogue("relu", 5))
    with pytest.raises(DuplicateRegistration):
        reg.register_pattern(FusionPattern("opt.other", "opt", 30, PNode("neg", (None,))))


def test_default_pattern_priorities():
    assert [(p.name, p.priority) for p in default_patterns().ordered()] == [
        ("opt.matmul_add_relu", 30),
        ("opt.matmul_add_tanh", 29),
    ]


def test_epilogue_pattern_then_rules():
    fused = fuse_pass(parse(EPILOGUE_CHAIN))
    cs = closures_of(fused)
    assert [pattern_of(c) for c in cs] == ["opt.matmul_add_relu", "rules"]
    assert members(cs[0]) == ["h", "a", "r"]
    assert members(cs[1]) == ["s", "n"]
    assert cs[0].fn.attrs["dialect"] == "opt" and cs[1].fn.attrs["dialect"] == "ref"


def test_single_op_unchanged():
    fn = parse("fn main(%x: f32[3]) { let %y = tanh(%x); %y }")
    assert print_text(to_anf(fuse_pass(fn))) == print_text(fn)


def test_overlapping_matches_pick_earlier_root():
    fn = parse(SHARED_ADD)
    first = fuse_pass(fn)
    (pat,) = [c for c in closures_of(first) if pattern_of(c) == "opt.matmul_add_relu"]
    assert "r1" in members(pat) and "r2" not in members(pat)
    _, ret = anf_bindings(to_anf(pat.fn))
    assert "a" in {f.name for f in ret.fields}
    assert print_text(first) == print_text(fuse_pass(fn))
    inputs = random_inputs(fn, 0)
    assert fusion_equivalence_check(fn, first, inputs) <= 1e-6


def test_materialization_set_tanh(mlp2_sgd):
    assert "z1" in materialization_set(mlp2_sgd)


def test_materialization_set_inference_graph(mlp2):
    assert materialization_set(mlp2.forward()) == frozenset()


@pytest.mark.parametrize("name", ["mlp2_sgd", "mlp3_sgd"])
def test_materialization_set_matches_runtime_reads(name, request, mlp2):
    fn = request.getfixturevalue(name)
    defined = {p.name for p in fn.params}
    reads: set[str] = set()
    backward = False

    def hook(i, var, value, result):
        nonlocal backward
        if backward:
            reads.update(a.name for a in value.operands() if getattr(a, "name", None) in defined)
        else:
            defined.add(var)
        if var == "loss":
            backward = True

    from trainc.models import get_model

    model = get_model("mlp3" if "mlp3" in name else "mlp2")
    evaluate(fn, model_inputs(fn, model), on_step=hook)
    assert materialization_set(fn) == reads


def test_materialized_tensors_escape_closures(mlp3_sgd):
    fused = to_anf(fuse_pass(mlp3_sgd))
    bound = {v.name for v, _ in anf_bindings(fused)[0]} | {p.name for p in fused.params}
    assert materialization_set(mlp3_sgd) <= bound


def test_reject_materialized_flag(mlp3_sgd):
    fused = fuse_pass(mlp3_sgd, cfg=FusionConfig(reject_materialized=True))
    mat = materialization_set(mlp3_sgd)
    for c in closures_of(fused):
        inner = set(members(c))
        _, ret = anf_bindings(to_anf(c.fn))
        outs = {f.name for f in ret.fields} if hasattr(ret, "fields") else {ret.name}
        assert not (inner - outs) & mat


def test_kernel_count_strictly_drops(mlp2_sgd):
    assert kernel_count(fuse_pass(mlp2_sgd)) < kernel_count(mlp2_sgd)


def test_disabling_top_pattern(mlp3_sgd):
    base = fuse_pass(mlp3_sgd)
    off = fuse_pass(mlp3_sgd, cfg=FusionConfig(disable_patterns=("opt.matmul_add_relu",)))
    assert sum(pattern_of(c) == "opt.matmul_add_relu" for c in closures_of(base)) == 1
    assert sum(pattern_of(c) == "opt.matmul_add_relu" for c in closures_of(off)) == 0
    touched = {"h1", "a1", "z1"}
    before = {frozenset(members(c)) for c in closures_of(base) if pattern_of(c) == "rules"}
    after = {frozenset(members(c)) for c in closures_of(off) if pattern_of(c) == "rules"}
    assert {g for g in before if not g & touched} <= after


def test_max_group_cap(mlp2_sgd):
    fused = fuse_pass(mlp2_sgd, cfg=FusionConfig(max_group=2))
    rule_groups = [c for c in closures_of(fused) if pattern_of(c) == "rules"]
    assert rule_groups and all(len(members(c)) <= 2 for c in rule_groups)


def test_disabled_fusion_is_identity(mlp2_sgd):
    out = fuse_pass(mlp2_sgd, cfg=FusionConfig(enabled=False))
    assert print_text(to_anf(out)) == print_text(mlp2_sgd)


def test_fused_graph_is_acyclic_and_wellformed(mlp3_sgd):
    fused = to_anf(fuse_pass(mlp3_sgd))
    assert check_wellformed(fused) == []


def test_ref_rule_fusion_is_bit_identical(mlp2, mlp2_sgd):
    fused = fuse_pass(mlp2_sgd, cfg=REF_ONLY)
    ins = model_inputs(mlp2_sgd, mlp2)
    assert fusion_equivalence_check(mlp2_sgd, fused, ins, DispatchConfig().with_dialects("ref")) == 0.0


def test_opt_epilogue_matches_ref(mlp2, mlp2_sgd):
    fused = fuse_pass(mlp2_sgd)
    assert any(c.fn.attrs["dialect"] == "opt" for c in closures_of(fused))
    ins = model_inputs(mlp2_sgd, mlp2)
    ref = run(compile_bytecode(to_anf(dispatch_pass(mlp2_sgd, DispatchConfig().with_dialects("ref")))), ins)
    opt = run(compile_bytecode(to_anf(dispatch_pass(fused, DispatchConfig()))), ins)
    assert max_rel_error(opt, ref) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_random_graph_equivalence(seed):
    fn = random_function(seed)
    fused = fuse_pass(fn)
    assert check_wellformed(to_anf(fused)) == []
    assert fusion_equivalence_check(fn, fused, random_inputs(fn, seed)) <= 1e-6
