"""Register virtual machine with a storage pool and a process-wide kernel cache.

Kernel "compilation" is shape-specialised kernel construction: the first
invocation of a cache key looks up (or, for closures, builds) the kernel and
binds its attributes; later invocations with an equal key reuse it.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Generator

import numpy as np

from ..backends import LOCAL, ExecContext, closure_kernel, op_kernel, split_op
from ..ir.types import TensorType
from ..oplib import COLLECTIVES
from .bytecode import (
    AllocStorage,
    AllocTensor,
    Bytecode,
    Free,
    Invoke,
    InvokeClosure,
    LoadConst,
    Move,
    Ret,
)
from .interpreter import CollectiveRequest, _comm_attrs, _local_answer
from .pool import Slab, StoragePool


def _type_key(t) -> str:
    return "scalar" if t is None else str(t)


@dataclass
class KernelCache:
    """Thread-safe map from kernel keys to built kernels.

    Two threads racing on a fresh key may both build it; the last insert wins,
    which is harmless because equal keys build identical kernels.
    """

    entries: dict = field(default_factory=dict)
    compiles: dict = field(default_factory=dict)
    hits: dict = field(default_factory=dict)
    compile_seconds: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def get(self, key, build: Callable[[], Callable]) -> tuple[Callable, bool]:
        """Return ``(kernel, compiled_now)``."""
        with self._lock:
            k = self.entries.get(key)
            if k is not None:
                self.hits[key] = self.hits.get(key, 0) + 1
                return k, False
        t0 = time.perf_counter()
        k = build()
        dt = time.perf_counter() - t0
        with self._lock:
            self.entries[key] = k
            self.compiles[key] = self.compiles.get(key, 0) + 1
            self.compile_seconds += dt
        return k, True

    def clear(self) -> None:
        with self._lock:
            self.entries.clear()
            self.compiles.clear()
            self.hits.clear()
            self.compile_seconds = 0.0

    @property
    def total_compiles(self) -> int:
        return sum(self.compiles.values())

    @property
    def total_hits(self) -> int:
        return sum(self.hits.values())


KERNEL_CACHE = KernelCache()


def _bound(kernel, attrs: dict):
    def run(args, ctx):
        return kernel(args, attrs, ctx)

    return run


@dataclass
class InvokeEvent:
    """One kernel or closure invocation, as seen by a profiler hook."""

    label: str
    seconds: float
    compiled: bool
    compile_seconds: float


class VirtualMachine:
    """Executes one :class:`Bytecode` program; single-threaded per instance."""

    def __init__(
        self,
        bc: Bytecode,
        *,
        cache: KernelCache | None = None,
        pool: StoragePool | None = None,
        ctx: ExecContext = LOCAL,
    ) -> None:
        self.bc = bc
        self.cache = KERNEL_CACHE if cache is None else cache
        self.pool = StoragePool() if pool is None else pool
        self.ctx = ctx
        self.on_invoke: Callable[[InvokeEvent], None] | None = None
        self.invokes = 0

    # -- kernel lookup

    def _kernel(self, idx: int):
        entry = self.bc.kernels[idx]
        key = (entry.op, tuple(_type_key(t) for t in entry.in_types), tuple(sorted(entry.attrs.items())))
        attrs = dict(entry.attrs)
        return self.cache.get(key, lambda: _bound(op_kernel(entry.op), attrs))

    def _closure(self, idx: int):
        entry = self.bc.closures[idx]
        key = ("closure", entry.digest, tuple(_type_key(t) for t in entry.in_types))
        fn = entry.fn
        return self.cache.get(key, lambda: _bound(closure_kernel(fn), {}))

    # -- execution

    def _check_inputs(self, inputs) -> list:
        values = list(inputs.values()) if isinstance(inputs, dict) else list(inputs)
        if len(values) != len(self.bc.params):
            raise TypeError(f"{self.bc.name} takes {len(self.bc.params)} inputs, got {len(values)}")
        out = []
        for i, (ty, v) in enumerate(zip(self.bc.params, values)):
            v = np.asarray(v)
            if tuple(v.shape) != ty.shape or v.dtype != ty.dtype.np:
                raise TypeError(f"input {i}: {v.dtype}{list(v.shape)} does not match {ty}")
            out.append(v)
        return out

    def run_gen(self, inputs) -> Generator:
        """Execute, yielding a :class:`CollectiveRequest` at every collective."""
        bc = self.bc
        regs: list = [None] * bc.n_regs
        slabs: dict[int, Slab] = {}  # slab register -> slab
        owner: dict[int, int] = {}  # tensor register -> slab register
        for i, v in enumerate(self._check_inputs(inputs)):
            regs[i] = v
        hook = self.on_invoke
        for ins in bc.code:
            if isinstance(ins, Invoke):
                entry = bc.kernels[ins.kernel]
                args = [regs[r] for r in ins.ins]
                base = split_op(entry.op)[1]
                self.invokes += 1
                if base in COLLECTIVES:
                    (result,) = yield CollectiveRequest(base, [args[0]], dict(entry.attrs), entry.op)
                    _store(regs[ins.outs[0]], result)
                    continue
                kernel, compiled = self._kernel(ins.kernel)
                t0 = time.perf_counter()
                outs = kernel(args, self.ctx)
                _store(regs[ins.outs[0]], outs[0])
                if hook is not None:
                    hook(InvokeEvent(entry.op, time.perf_counter() - t0, compiled, 0.0))
            elif isinstance(ins, InvokeClosure):
                entry = bc.closures[ins.closure]
                args = [regs[r] for r in ins.ins]
                self.invokes += 1
                if entry.fn.attrs.get("dialect") == "comm":
                    kind = entry.fn.attrs["collective"]
                    outs = yield CollectiveRequest(kind, args, _comm_attrs(entry.fn), entry.fn.name)
                else:
                    kernel, compiled = self._closure(ins.closure)
                    t0 = time.perf_counter()
                    outs = kernel(args, self.ctx)
                    if hook is not None:
                        hook(InvokeEvent(f"closure:{entry.fn.name}", time.perf_counter() - t0, compiled, 0.0))
                for r, o in zip(ins.outs, outs):
                    _store(regs[r], o)
            elif isinstance(ins, AllocStorage):
                slabs[ins.slab] = self.pool.alloc(ins.size)
                regs[ins.slab] = slabs[ins.slab]
            elif isinstance(ins, AllocTensor):
                regs[ins.dst] = _view(slabs[ins.slab], ins.offset, ins.ty)
                owner[ins.dst] = ins.slab
            elif isinstance(ins, Move):
                regs[ins.dst] = regs[ins.src]
            elif isinstance(ins, Free):
                slab_reg = owner.pop(ins.reg)
                self.pool.release(slabs.pop(slab_reg))
                regs[ins.reg] = regs[slab_reg] = None
            elif isinstance(ins, LoadConst):
                regs[ins.dst] = bc.consts[ins.const]
            elif isinstance(ins, Ret):
                outputs = [np.array(regs[r], copy=True) for r in ins.regs]
                for slab_reg in list(slabs):
                    self.pool.release(slabs.pop(slab_reg))
                return outputs
        raise RuntimeError("bytecode ended without Ret")

    def run(self, inputs) -> list[np.ndarray]:
        """Execute single-rank, answering collectives locally."""
        gen = self.run_gen(inputs)
        try:
            req = next(gen)
            while True:
                req = gen.send(_local_answer(req))
        except StopIteration as stop:
            return stop.value


def _view(slab: Slab, offset: int, ty: TensorType) -> np.ndarray:
    n = ty.size_bytes
    return slab.data[offset : offset + n].view(ty.dtype.np).reshape(ty.shape)


def _store(dst: np.ndarray, value) -> None:
    value = np.asarray(value)
    assert value.dtype == dst.dtype and value.shape == dst.shape, (value.dtype, value.shape, dst.dtype, dst.shape)
    np.copyto(dst, value)


def run(bc: Bytecode, inputs, *, ctx: ExecContext = LOCAL, cache: KernelCache | None = None) -> list[np.ndarray]:
    return VirtualMachine(bc, cache=cache, ctx=ctx).run(inputs)
