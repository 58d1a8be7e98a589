from __future__ import annotations

import pytest

from trainc.errors import DuplicateRegistration, UnimplementedOp, UnknownOp
from trainc.ir import Call, print_text, to_dataflow
from trainc.ir.expr import iter_nodes
from trainc.oplib import build_default_registry, elemwise_rel
from trainc.opreg import (
    BaseOp,
    DialectOp,
    DispatchConfig,
    OpCategory,
    OpRegistry,
    default_registry,
    dispatch_pass,
)

from conftest import parse


@pytest.fixture
def reg():
    return build_default_registry()


def test_register_base_op_and_duplicate():
    r = OpRegistry()
    r.register_base_op(BaseOp("tanh", 1, elemwise_rel("tanh"), OpCategory.ELEMWISE))
    assert r.category("tanh") is OpCategory.ELEMWISE
    with pytest.raises(DuplicateRegistration):
        r.register_base_op(BaseOp("tanh", 1, elemwise_rel("tanh"), OpCategory.ELEMWISE))


def test_dialect_op_requires_known_base_and_unique_pair(reg):
    with pytest.raises(UnknownOp):
        reg.register_dialect_op(DialectOp("opt", "conv2d", 10))
    with pytest.raises(DuplicateRegistration):
        reg.register_dialect_op(DialectOp("opt", "matmul", 3))


def test_default_matmul_priorities():
    r = default_registry()
    assert r.dialect_op("ref.matmul").priority == 5
    assert r.dialect_op("opt.matmul").priority == 12


def test_attribute_inheritance_precedence(reg):
    def state_rel(types, attrs):
        return "with-state"

    reg.register_base_op(BaseOp("scale", 1, elemwise_rel("scale"), OpCategory.ELEMWISE, {"note": "base"}))
    reg.register_dialect_op(
        DialectOp("opt", "scale", 1, overrides={"type_rel": state_rel, "note": "override"}, extras={"note": "extra"})
    )
    assert reg.type_rel("opt.scale") is state_rel
    assert reg.attr("opt.scale", "note") == "extra"
    assert reg.attr("scale", "note") == "base"
    assert reg.category("opt.scale") is OpCategory.ELEMWISE


def test_resolve_by_priority(reg):
    assert reg.resolve("matmul", DispatchConfig()).name == "opt.matmul"
    assert reg.resolve("matmul", DispatchConfig().with_dialects("ref")).name == "ref.matmul"


def test_resolve_tie_breaks_lexicographically(reg):
    reg.register_base_op(BaseOp("twin", 1, elemwise_rel("twin"), OpCategory.ELEMWISE))
    reg.register_dialect_op(DialectOp("opt", "twin", 7))
    reg.register_dialect_op(DialectOp("ref", "twin", 7))
    assert reg.resolve("twin", DispatchConfig()).dialect == "opt"


def test_priority_override_flips_choice(reg):
    cfg = DispatchConfig(priority_overrides={("ref", "matmul"): 20})
    assert reg.resolve("matmul", cfg).name == "ref.matmul"


def test_resolve_without_candidate(reg):
    with pytest.raises(UnimplementedOp):
        reg.resolve("tanh", DispatchConfig().with_dialects("opt"))
    with pytest.raises(UnimplementedOp):
        reg.resolve("tanh", DispatchConfig(device="gpu"))


def test_dispatch_mixed_module():
    fn = parse("fn main(%a: f32[2,3], %b: f32[3,4]) { let %m = matmul(%a, %b); let %t = tanh(%m); %t }")
    out = dispatch_pass(to_dataflow(fn), DispatchConfig())
    ops = sorted(n.op for n in iter_nodes(out) if isinstance(n, Call))
    assert ops == ["opt.matmul", "ref.tanh"]


def test_dispatch_ref_only_and_idempotent():
    fn = parse("fn main(%x: f32[3]) { let %t = tanh(%x); %t }")
    once = dispatch_pass(to_dataflow(fn), DispatchConfig().with_dialects("ref"))
    assert [n.op for n in iter_nodes(once) if isinstance(n, Call)] == ["ref.tanh"]
    assert print_text(dispatch_pass(once, DispatchConfig())) == print_text(once)


def test_dispatch_error_names_op_and_shapes():
    fn = parse("fn main(%x: f32[3]) { let %t = tanh(%x); %t }")
    with pytest.raises(UnimplementedOp) as info:
        dispatch_pass(to_dataflow(fn), DispatchConfig().with_dialects("opt"))
    assert "tanh" in str(info.value) and "3" in str(info.value)


def test_dispatch_config_from_json():
    cfg = DispatchConfig.from_json({"device": "CPU", "dialects": {"ref": True, "opt": False}, "priority_overrides": {"ref.matmul": 3}})
    assert cfg.device == "cpu"
    assert cfg.enabled_dialects == {"ref"}
    assert cfg.priority_overrides == {("ref", "matmul"): 3}
