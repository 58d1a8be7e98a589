from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trainc.backends import LOCAL, op_kernel
from trainc.backends.collectives import all_gather, all_reduce, reduce_scatter, run_collective
from trainc.backends.numerics import left_fold_sum, round_f16
from trainc.backends.opt import EpilogueMismatch, blocked_matmul, compile_epilogue
from trainc.backends.priorities import (
    PRIORITY_BASE,
    PRIORITY_STEP,
    PriorityTable,
    case_key,
    derive_priorities,
)
from trainc.errors import UnimplementedOp
from trainc.testing import rel_error

from conftest import parse


def run1(op, *args, **attrs):
    (out,) = op_kernel(op)(list(args), attrs, LOCAL)
    return out


def test_relu_of_negative_is_zero():
    out = run1("ref.relu", np.array([-1.0, 0.0, 2.5], np.float32))
    assert out.tolist() == [0.0, 0.0, 2.5]


def test_matmul_by_identity():
    a = np.random.default_rng(0).standard_normal((5, 5)).astype(np.float32)
    np.testing.assert_array_equal(run1("ref.matmul", a, np.eye(5, dtype=np.float32)), a)


def test_sum_is_left_fold():
    x = np.array([1e8, 1.0, -1e8, 1.0], np.float32)
    expected = np.float32(0)
    for v in x:
        expected = np.float32(expected + v)
    out = run1("ref.sum", x)
    assert out.reshape(-1)[0] == expected
    assert left_fold_sum(x)[0] == expected


@pytest.mark.parametrize("n", [64, 33])
def test_blocked_matmul_close_to_ref(n):
    rng = np.random.default_rng(n)
    a, b = (rng.standard_normal((n, n)).astype(np.float32) for _ in range(2))
    assert rel_error(run1("opt.matmul", a, b), run1("ref.matmul", a, b)) <= 1e-6


def test_blocked_matmul_uneven_tiles():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((7, 13))
    b = rng.standard_normal((13, 5))
    np.testing.assert_allclose(blocked_matmul(a, b, tile=4), a @ b, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 40), k=st.integers(1, 40), n=st.integers(1, 40), seed=st.integers(0, 2**16))
def test_dialects_agree_on_matmul(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, k)).astype(np.float32)
    b = rng.standard_normal((k, n)).astype(np.float32)
    assert rel_error(run1("opt.matmul", a, b), run1("ref.matmul", a, b)) <= 1e-6


EPILOGUE = """fn ep(%a: f32[4,8], %b: f32[8,6], %c: f32[6]) {
  let %h = matmul(%a, %b);
  let %z = add(%h, %c);
  let %y = relu(%z);
  (%h, %y)
}"""


def test_epilogue_kernel_outputs():
    fn = parse(EPILOGUE)
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 8)).astype(np.float32)
    b = rng.standard_normal((8, 6)).astype(np.float32)
    c = rng.standard_normal(6).astype(np.float32)
    h, y = compile_epilogue(fn)([a, b, c], {}, LOCAL)
    assert rel_error(h, a @ b) <= 1e-6
    assert (y >= 0).all()
    np.testing.assert_array_equal(y, np.maximum(h + c, 0))


def test_epilogue_rejects_other_bodies():
    fn = parse("fn ep(%a: f32[4,8], %b: f32[8,6]) {\n  let %h = matmul(%a, %b);\n  let %y = relu(%h);\n  %y\n}")
    with pytest.raises(EpilogueMismatch):
        compile_epilogue(fn)


def test_kernels_are_pure():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((6, 6)).astype(np.float32)
    b = rng.standard_normal((6, 6)).astype(np.float32)
    a0, b0 = a.copy(), b.copy()
    for op in ("ref.matmul", "opt.matmul", "ref.add", "ref.mul"):
        first = run1(op, a, b)
        second = run1(op, a, b)
        assert first.tobytes() == second.tobytes()
        np.testing.assert_array_equal(a, a0)
        np.testing.assert_array_equal(b, b0)


def test_unknown_kernel():
    with pytest.raises(UnimplementedOp):
        op_kernel("opt.softmax")
    with pytest.raises(UnimplementedOp):
        op_kernel("ref.all_reduce")


def _f16_neighbours():
    """Consecutive positive finite f16 pairs and their f32 midpoints."""
    bits = np.arange(0, 0x7BFF, dtype=np.uint16)  # up to the largest finite minus one
    lo = bits.view(np.float16)
    hi = (bits + 1).view(np.float16)
    mid = (lo.astype(np.float64) + hi.astype(np.float64)) / 2
    return bits, lo, hi, mid


def test_f16_midpoints_are_exact_in_f32():
    _, _, _, mid = _f16_neighbours()
    assert (mid.astype(np.float32).astype(np.float64) == mid).all()


def test_f16_rounding_ties_to_even():
    bits, lo, hi, mid = _f16_neighbours()
    # the even neighbour is the one whose last mantissa bit is clear
    expected = np.where(bits % 2 == 0, lo, hi)
    got = round_f16(mid.astype(np.float32))
    assert got.view(np.uint16).tolist() == expected.view(np.uint16).tolist()
    neg = round_f16(-mid.astype(np.float32))
    assert neg.view(np.uint16).tolist() == (-expected).view(np.uint16).tolist()


def test_f16_rounding_off_midpoint_goes_to_nearest():
    _, lo, hi, mid = _f16_neighbours()
    below = np.nextafter(mid.astype(np.float32), np.float32(0))
    keep = below.astype(np.float64) > lo.astype(np.float64)
    assert (round_f16(below[keep]) == lo[keep]).all()


def test_f16_arithmetic_rounds_each_step():
    a = np.array([2048.0], np.float16)
    one = np.array([1.0], np.float16)
    # 2048 + 1 is a tie between 2048 and 2050 in f16; ties go to 2048
    assert run1("ref.add", a, one)[0] == np.float16(2048)
    assert run1("ref.add", a, one).dtype == np.float16


def test_all_reduce_of_ones():
    outs = all_reduce([np.ones(3, np.float32) for _ in range(4)])
    assert all(o.tolist() == [4.0, 4.0, 4.0] for o in outs)


def test_reduce_scatter_then_gather_is_all_reduce():
    rng = np.random.default_rng(4)
    payloads = [rng.standard_normal((3, 5)).astype(np.float32) for _ in range(4)]
    shards = reduce_scatter(payloads)
    assert [s.size for s in shards] == [4, 4, 4, 4]  # 15 elements padded to 16
    gathered = all_gather(shards, "3,5")
    for g, ar in zip(gathered, all_reduce(payloads)):
        assert g.tobytes() == ar.tobytes()


def test_reduction_in_rank_order():
    payloads = [np.array([1e8], np.float32), np.array([1.0], np.float32), np.array([-1e8], np.float32)]
    (out, *_) = all_reduce(payloads)
    assert out[0] == np.float32(np.float32(1e8 + np.float32(1.0)) - np.float32(1e8))


def test_collective_rank_count_check():
    with pytest.raises(ValueError, match="expects 3 ranks"):
        run_collective("all_reduce", [np.ones(2)] * 2, {"n_ranks": 3})


CASES = {"matmul": [[[32, 32], [32, 32]]], "tanh": [[[64]]]}


def _fake_log(opt_faster: bool) -> dict:
    fast, slow = [1e-5, 1.1e-5, 0.9e-5], [3e-5, 2.9e-5, 3.1e-5]
    return {
        case_key("ref.matmul", [[32, 32], [32, 32]]): slow if opt_faster else fast,
        case_key("opt.matmul", [[32, 32], [32, 32]]): fast if opt_faster else slow,
        case_key("ref.tanh", [[64]]): fast,
    }


@pytest.mark.parametrize("opt_faster", [True, False])
def test_priorities_follow_latency(tmp_path, opt_faster):
    log = tmp_path / "lat.json"
    log.write_text(json.dumps(_fake_log(opt_faster)))
    table = derive_priorities(CASES, replay=log)
    hi, lo = PRIORITY_BASE + PRIORITY_STEP, PRIORITY_BASE
    winner, loser = ("opt.matmul", "ref.matmul") if opt_faster else ("ref.matmul", "opt.matmul")
    assert table.priorities[winner] == hi and table.priorities[loser] == lo
    # a base op with one implementation still gets a priority and wins
    assert table.priorities["ref.tanh"] == PRIORITY_BASE


def test_priority_replay_is_deterministic(tmp_path):
    rec = tmp_path / "rec.json"
    measured = derive_priorities(CASES, repeats=2, record=rec)
    replayed = [derive_priorities(CASES, replay=rec) for _ in range(2)]
    assert replayed[0].priorities == replayed[1].priorities == measured.priorities
    assert set(json.loads(rec.read_text())) == set(_fake_log(True))


def test_priority_table_json_round_trip():
    table = PriorityTable({"opt.matmul": 12, "ref.matmul": 10})
    back = PriorityTable.from_json(table.to_json())
    assert back.priorities == table.priorities
    assert back.overrides() == {("opt", "matmul"): 12, ("ref", "matmul"): 10}
    with pytest.raises(ValueError):
        PriorityTable.from_json('{"matmul": 3}')
