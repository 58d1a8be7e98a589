"""Per-kernel latency profiling on top of the VM."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

from .bytecode import Bytecode
from .machine import InvokeEvent, KernelCache, VirtualMachine


@dataclass
class KernelStat:
    label: str
    invokes_per_run: int
    median_seconds: float  # median over repeats of the per-run total
    per_run_seconds: list[float] = field(default_factory=list)


@dataclass
class ProfileReport:
    repeats: int
    kernels: dict[str, KernelStat]
    run_seconds: list[float]
    compile_seconds_by_run: list[float]
    compiles_by_run: list[int]
    pool: dict

    @property
    def median_run_seconds(self) -> float:
        return statistics.median(self.run_seconds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["median_run_seconds"] = self.median_run_seconds
        return d

    def table(self) -> str:
        rows = ["kernel,invokes,median_us"]
        for k in sorted(self.kernels.values(), key=lambda s: -s.median_seconds):
            rows.append(f"{k.label},{k.invokes_per_run},{k.median_seconds * 1e6:.1f}")
        return "\n".join(rows) + "\n"


def profile(bc: Bytecode, inputs, repeats: int = 5, *, cache: KernelCache | None = None) -> ProfileReport:
    """Run ``bc`` ``repeats`` times and aggregate per-kernel wall time.

    Kernel construction happens on first use of each cache key, so its cost
    lands in ``compile_seconds_by_run[0]`` unless the cache was already warm.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    vm = VirtualMachine(bc, cache=cache)
    per_run: list[dict[str, list[float]]] = []
    run_seconds, compile_s, compiles = [], [], []
    for _ in range(repeats):
        bucket: dict[str, list[float]] = {}

        def hook(ev: InvokeEvent, bucket=bucket) -> None:
            bucket.setdefault(ev.label, []).append(ev.seconds)

        vm.on_invoke = hook
        c0, n0 = vm.cache.compile_seconds, vm.cache.total_compiles
        t0 = time.perf_counter()
        vm.run(inputs)
        run_seconds.append(time.perf_counter() - t0)
        compile_s.append(vm.cache.compile_seconds - c0)
        compiles.append(vm.cache.total_compiles - n0)
        per_run.append(bucket)
    kernels = {}
    for label in per_run[0]:
        totals = [sum(r.get(label, [])) for r in per_run]
        kernels[label] = KernelStat(label, len(per_run[0][label]), statistics.median(totals), totals)
    return ProfileReport(repeats, kernels, run_seconds, compile_s, compiles, asdict(vm.pool.stats))
