from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trainc.autodiff import (
    TANH_NEEDS_BOTH,
    Adam,
    SGD,
    TrainingSpec,
    autodiff,
    default_adjoints,
    dependency_report,
)
from trainc.errors import NonDifferentiable
from trainc.ir import Call, anf_bindings, print_text
from trainc.memsched import liveness
from trainc.testing import gradcheck
from trainc.vm.interpreter import evaluate

from conftest import model_inputs, parse

# forward bodies over a [3,4] parameter %w and a data input %x; the
# returned var is the prediction compared against %label by mse
OP_CASES = {
    "add": ("f32[3,4]", ["let %p = add(%w, %x);"]),
    "sub": ("f32[3,4]", ["let %p = sub(%x, %w);"]),
    "mul": ("f32[3,4]", ["let %p = mul(%w, %x);"]),
    "div": ("f32[3,4]", ["let %s = mul(%w, %w);", "let %d = add(%s, 1.0);", "let %p = div(%x, %d);"]),
    "neg": ("f32[3,4]", ["let %m = mul(%w, %x);", "let %p = neg(%m);"]),
    "tanh": ("f32[3,4]", ["let %m = mul(%w, %x);", "let %p = tanh(%m);"]),
    "relu": ("f32[3,4]", ["let %m = mul(%w, %x);", "let %p = relu(%m);"]),
    "matmul": ("f32[2,3]", ["let %p = matmul(%x, %w);"]),
    "transpose": ("f32[4,3]", ["let %t = transpose(%w);", "let %p = add(%t, %x);"]),
    "reshape": ("f32[2,6]", ['let %r = reshape(%w, shape="2,6");', "let %p = add(%r, %x);"]),
    "broadcast_to": (
        "f32[3,4]",
        ['let %s = sum_to(%w, shape="4");', 'let %b = broadcast_to(%s, shape="3,4");', "let %p = mul(%b, %x);"],
    ),
    "sum": ("f32[3,4]", ["let %m = mul(%w, %x);", "let %s = sum(%m);", 'let %p = reshape(%s, shape="1");']),
    "mean": ("f32[3,4]", ["let %m = mul(%w, %x);", "let %s = mean(%m);", 'let %p = reshape(%s, shape="1");']),
    "sum_to": ("f32[3,4]", ["let %m = mul(%w, %x);", 'let %p = sum_to(%m, shape="4");']),
    "softmax": ("f32[3,4]", ["let %m = mul(%w, %x);", "let %p = softmax(%m);"]),
}


def op_forward(op: str):
    xty, body = OP_CASES[op]
    lines = "\n  ".join(body)
    return parse(f"fn main(%x: {xty}, %w @{{param=1}}: f32[3,4]) {{\n  {lines}\n  %p\n}}")


def op_inputs(fwd, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    shapes = {p.name: p.ty.shape for p in fwd.params}
    shapes["label"] = fwd.ret_type.shape
    return {k: rng.standard_normal(s) for k, s in shapes.items()}


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_per_op_gradcheck(op):
    fwd = op_forward(op)
    for seed in range(3):
        res = gradcheck(fwd, op_inputs(fwd, seed), coords_per_param=6, seed=seed)
        assert res.checked > 0
        assert res.max_error <= 1e-3, (op, seed, res.errors)


def test_monolithic_tanh_gradcheck():
    fwd = op_forward("tanh")
    res = gradcheck(fwd, op_inputs(fwd, 1), adjoints=default_adjoints(monolithic_tanh=True))
    assert res.max_error <= 1e-3
    ops = {v.op for _, v in anf_bindings(autodiff(fwd, TrainingSpec(optimizer=None), default_adjoints(True)))[0]}
    assert "tanh_dx" in ops


def test_tanh_adjoint_formula():
    fwd = parse("fn main(%x: f32[3], %w @{param=1}: f32[3]) { let %y = tanh(%w); %y }")
    text = print_text(autodiff(fwd, TrainingSpec(optimizer=None)))
    assert "mul(%y, %y)" in text and "sub(1.0," in text


def test_stationary_point():
    fwd = parse("fn main(%w @{param=1}: f32[1]) { let %y = tanh(%w); %y }")
    train = autodiff(fwd, TrainingSpec(optimizer=None))
    loss, grad = evaluate(train, {"w": np.zeros(1, np.float32), "label": np.zeros(1, np.float32)})
    assert loss[0] == 0.0 and grad[0] == 0.0


def test_fanout_accumulates():
    fwd = parse(
        "fn main(%w @{param=1}: f32[4]) { let %a = tanh(%w); let %b = tanh(%w); let %c = add(%a, %b); %c }"
    )
    rng = np.random.default_rng(0)
    inputs = {"w": rng.standard_normal(4), "label": rng.standard_normal(4)}
    assert gradcheck(fwd, inputs).max_error <= 1e-3
    train = autodiff(fwd, TrainingSpec(optimizer=None))
    _, g = evaluate(train, inputs, precision="f64")
    w, lab = inputs["w"], inputs["label"]
    pred = 2 * np.tanh(w)
    expected = (2 / 4) * (pred - lab) * 2 * (1 - np.tanh(w) ** 2)
    np.testing.assert_allclose(g, expected, rtol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mlp_gradcheck_hypothesis(seed):
    from trainc.models import get_model

    for name in ("mlp2", "mlp3"):
        m = get_model(name, batch=4)
        fwd = m.forward()
        x, label = m.data(seed, 0, batch=4)
        inputs = {**m.init_params(seed), "x": x, "label": label}
        assert gradcheck(fwd, inputs, coords_per_param=2, seed=seed).max_error <= 1e-3


def test_dependency_report(mlp2_sgd, mlp3_sgd):
    rep = dependency_report(mlp2_sgd)
    assert rep["tanh"] == {"y"}
    assert rep["matmul"] == {"x"}
    assert rep["add"] == frozenset()
    assert dependency_report(mlp3_sgd)["relu"] == {"x"}


def test_needs_y_shortens_tanh_input_lifetime(mlp2):
    both = default_adjoints()
    both.register_adjoint(TANH_NEEDS_BOTH, replace=True)
    lean = liveness(autodiff(mlp2.forward(), TrainingSpec()))
    fat = liveness(autodiff(mlp2.forward(), TrainingSpec(), both))
    assert lean.last_use("a1") < fat.last_use("a1")


def test_autodiff_is_deterministic(mlp2):
    a = print_text(autodiff(mlp2.forward(), TrainingSpec(optimizer=Adam())))
    b = print_text(autodiff(mlp2.forward(), TrainingSpec(optimizer=Adam())))
    assert a == b


def test_grad_of_attrs(mlp2_sgd):
    tagged = {v.attrs["grad_of"] for v, _ in anf_bindings(mlp2_sgd)[0] if "grad_of" in v.attrs}
    assert tagged == {"w1", "b1", "w2", "b2"}


def test_sgd_step_is_exact(mlp2, mlp2_sgd):
    grads_fn = autodiff(mlp2.forward(), TrainingSpec(optimizer=None))
    ins = model_inputs(grads_fn, mlp2)
    _, *grads = evaluate(grads_fn, ins)
    outs = evaluate(mlp2_sgd, model_inputs(mlp2_sgd, mlp2))
    lr = np.float32(0.1)
    for p, g, new in zip(ins[2:], grads, outs[1:]):
        assert np.array_equal(new, p - lr * g)


def test_adam_step_matches_scalar_reference(mlp2, mlp2_adam):
    grads_fn = autodiff(mlp2.forward(), TrainingSpec(optimizer=None))
    ins = model_inputs(grads_fn, mlp2)
    _, *grads = evaluate(grads_fn, ins)
    outs = evaluate(mlp2_adam, model_inputs(mlp2_adam, mlp2))
    lr, eps, b1, b2 = 1e-3, 1e-8, 0.9, 0.999
    for p, g, new in zip(ins[2:], grads, outs[1:5]):
        p64, g64 = p.astype(np.float64), g.astype(np.float64)
        m, v = (1 - b1) * g64, (1 - b2) * g64 * g64
        ref = p64 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        assert np.max(np.abs(new - ref)) <= 1e-7 * max(1.0, np.max(np.abs(ref)))


def test_training_spec_validation():
    with pytest.raises(ValueError):
        SGD(lr=0)
    with pytest.raises(ValueError):
        TrainingSpec(loss="xent")
    spec = TrainingSpec.from_json({"loss": "mse", "optimizer": {"kind": "sgd", "lr": 0.1}, "params": ["%w1", "%b1"]})
    assert spec.params == ("w1", "b1")


def test_params_subset(mlp2):
    fn = autodiff(mlp2.forward(), TrainingSpec(params=("w2",)))
    assert [v.attrs["new_param"] for v, _ in anf_bindings(fn)[0] if "new_param" in v.attrs] == ["w2"]


def test_non_differentiable_op():
    fwd = parse("fn main(%w @{param=1}: f32[3]) { let %y = gtz(%w); %y }")
    adj = default_adjoints()
    del adj.entries["gtz"]
    with pytest.raises(NonDifferentiable):
        autodiff(fwd, TrainingSpec(), adj)
