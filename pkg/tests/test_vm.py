from __future__ import annotations

import threading

import numpy as np
import pytest

from trainc.errors import TraincError
from trainc.ir import to_anf
from trainc.memsched import peak_memory
from trainc.opreg import DispatchConfig, dispatch_pass
from trainc.tensorio import decode_tensor, encode_tensor
from trainc.testing import bits_equal
from trainc.vm.bytecode import (
    AllocStorage,
    AllocTensor,
    Free,
    Invoke,
    Ret,
    assemble,
    compile_bytecode,
    disassemble,
)
from trainc.vm.interpreter import evaluate
from trainc.vm.machine import KernelCache, VirtualMachine
from trainc.vm.pool import StoragePool, size_class
from trainc.vm.profile import profile

from conftest import corpus, parse

REF = DispatchConfig().with_dialects("ref")
CORPUS = corpus(n_random=20)


def lower(fn, cfg: DispatchConfig = REF):
    return compile_bytecode(to_anf(dispatch_pass(fn, cfg)))


def test_single_add_program_shape():
    bc = lower(parse("fn main(%a: f32[2], %b: f32[2]) { let %c = add(%a, %b); %c }"))
    kinds = [type(i) for i in bc.code]
    assert kinds[-1] is Ret
    assert kinds.index(AllocStorage) < kinds.index(AllocTensor) < kinds.index(Invoke)
    assert bc.kernels[0].op == "ref.add"


def test_add_values():
    bc = lower(parse("fn main(%a: f32[2], %b: f32[2]) { let %c = add(%a, %b); %c }"))
    (out,) = VirtualMachine(bc).run([np.array([1, 2], np.float32), np.array([3, 4], np.float32)])
    assert out.tolist() == [4.0, 6.0]


def test_chain_reuses_slabs():
    fn = parse("fn main(%x: f32[64]) { let %a = tanh(%x); let %b = neg(%a); let %c = relu(%b); %c }")
    vm = VirtualMachine(lower(fn))
    vm.run([np.ones(64, np.float32)])
    assert vm.pool.stats.reuses >= 1
    assert vm.pool.stats.high_water <= 2 * size_class(256)


def test_undispatched_is_rejected():
    with pytest.raises(TraincError):
        compile_bytecode(parse("fn main(%x: f32[2]) { let %a = tanh(%x); %a }"))


def test_input_type_mismatch():
    vm = VirtualMachine(lower(parse("fn main(%x: f32[2]) { let %a = tanh(%x); %a }")))
    with pytest.raises(TypeError):
        vm.run([np.ones(3, np.float32)])


@pytest.mark.parametrize("name,fn,inputs", CORPUS, ids=[c[0] for c in CORPUS])
def test_vm_matches_interpreter(name, fn, inputs):
    fn = to_anf(dispatch_pass(fn, REF))
    bc = compile_bytecode(fn)
    vm = VirtualMachine(bc, cache=KernelCache())
    assert bits_equal(vm.run(inputs), evaluate(fn, inputs))
    assert vm.pool.stats.live_bytes == 0
    assert vm.pool.stats.high_water <= 1.25 * max(peak_memory(fn).peak, 1)
    text = disassemble(bc)
    assert disassemble(assemble(text)) == text


def test_cache_compiles_each_key_once(mlp2, mlp2_adam):
    from conftest import model_inputs

    bc = lower(mlp2_adam)
    cache = KernelCache()
    vm = VirtualMachine(bc, cache=cache)
    ins = model_inputs(mlp2_adam, mlp2)
    first = vm.run(ins)
    for _ in range(2):
        assert bits_equal(vm.run(ins), first)
    assert set(cache.compiles.values()) == {1}
    assert cache.total_hits == vm.invokes - len(cache.compiles)
    cache.clear()
    assert bits_equal(VirtualMachine(bc, cache=cache).run(ins), first)


def test_free_follows_last_use():
    bc = lower(parse("fn main(%x: f32[4]) { let %a = tanh(%x); let %b = neg(%a); let %c = relu(%b); %c }"))
    freed = [i.reg for i in bc.code if isinstance(i, Free)]
    assert len(freed) == len(set(freed)) == 2


def test_double_release_asserts():
    pool = StoragePool()
    slab = pool.alloc(300)
    pool.release(slab)
    with pytest.raises(AssertionError):
        pool.release(slab)


def test_size_classes():
    assert size_class(1) == 4
    assert [size_class(n) for n in (17, 21, 33, 256, 257)] == [20, 24, 40, 256, 320]
    for n in range(4, 5000, 7):
        assert n <= size_class(n) <= 1.25 * n


def test_concurrent_cache_use(mlp2, mlp2_sgd):
    from conftest import model_inputs

    bc = lower(mlp2_sgd)
    cache = KernelCache()
    ins = model_inputs(mlp2_sgd, mlp2)
    expected = VirtualMachine(bc, cache=KernelCache()).run(ins)
    results = [None] * 4

    def work(k):
        results[k] = VirtualMachine(bc, cache=cache).run(ins)

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(bits_equal(r, expected) for r in results)


def test_profile_report(mlp2, mlp2_sgd):
    from conftest import model_inputs

    bc = lower(mlp2_sgd)
    ins = model_inputs(mlp2_sgd, mlp2)
    one = profile(bc, ins, repeats=1, cache=KernelCache())
    five = profile(bc, ins, repeats=5, cache=KernelCache())
    assert set(one.to_dict()) == set(five.to_dict())
    assert five.compiles_by_run[0] > 0 and five.compiles_by_run[1:] == [0] * 4
    assert all(k.median_seconds >= 0 for k in five.kernels.values())
    assert "kernel,invokes,median_us" in five.table()


def test_opt_matmul_profiles_faster():
    from trainc.backends.priorities import measure_case
    import statistics

    ref = statistics.median(measure_case("ref.matmul", [(64, 64), (64, 64)], 5))
    opt = statistics.median(measure_case("opt.matmul", [(64, 64), (64, 64)], 5))
    # host-dependent; only the measurement itself is checked
    assert ref > 0 and opt > 0


@pytest.mark.parametrize("dtype", [np.float32, np.float16])
def test_tensor_io_round_trip(dtype):
    arr = np.arange(24, dtype=dtype).reshape(2, 3, 4) / 7
    data = encode_tensor(arr)
    assert data[:4] == b"TNSR" and data[4] == (0 if dtype == np.float32 else 1) and data[5] == 3
    back = decode_tensor(data)
    assert back.dtype == arr.dtype and back.tobytes() == arr.tobytes()
