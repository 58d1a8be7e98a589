"""Dispatch priorities derived from measured kernel latencies.

Each (dialect op, argument shapes) case is compiled to a one-instruction
program and profiled on the VM.  Latencies can be recorded to, and replayed
from, a JSON log so the derivation is reproducible without timing noise.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PRIORITY_BASE = 10
PRIORITY_STEP = 2


def case_key(op: str, shapes) -> str:
    """``"opt.matmul|64x64;64x64"``."""
    return op + "|" + ";".join("x".join(map(str, s)) for s in shapes)


@dataclass
class PriorityTable:
    priorities: dict[str, int]
    medians: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.priorities, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PriorityTable":
        obj = json.loads(text)
        if not isinstance(obj, dict) or not all(isinstance(v, int) and "." in k for k, v in obj.items()):
            raise ValueError("priority table must map 'dialect.op' to integers")
        return cls(dict(obj))

    def overrides(self) -> dict[tuple[str, str], int]:
        """In the form expected by ``DispatchConfig.priority_overrides``."""
        return {tuple(k.split(".", 1)): v for k, v in self.priorities.items()}


def measure_case(op: str, shapes, repeats: int, seed: int = 0) -> list[float]:
    """Per-run latencies (seconds) of a single ``op`` invocation."""
    from ..ir.infer import infer_types
    from ..ir.text import parse_text
    from ..vm.bytecode import compile_bytecode
    from ..vm.profile import profile

    params = ", ".join(f"%a{i}: f32[{','.join(map(str, s))}]" for i, s in enumerate(shapes))
    args = ", ".join(f"%a{i}" for i in range(len(shapes)))
    fn = infer_types(parse_text(f"fn main({params}) {{\n  {op}({args})\n}}\n").main)
    rng = np.random.default_rng(seed)
    inputs = [rng.standard_normal(s).astype(np.float32) for s in shapes]
    report = profile(compile_bytecode(fn), inputs, repeats)
    (stat,) = report.kernels.values()
    return stat.per_run_seconds


def derive_priorities(
    cases: dict[str, list],
    repeats: int = 5,
    *,
    replay: str | Path | None = None,
    record: str | Path | None = None,
    registry=None,
) -> PriorityTable:
    """Rank the implementing dialects of each base op by measured latency.

    ``cases`` maps a base op to a list of argument-shape lists.  For every
    implementing dialect the per-shape medians are summed; the fastest dialect
    gets the highest priority.  With ``replay`` the latencies come from a log
    previously written with ``record`` and nothing is measured.
    """
    from ..opreg import default_registry

    reg = registry or default_registry()
    log: dict[str, list[float]] = json.loads(Path(replay).read_text()) if replay else {}
    table: dict[str, int] = {}
    medians: dict[str, float] = {}
    for base, shape_list in sorted(cases.items()):
        impls = reg.implementations(base)
        totals = []
        for impl in impls:
            total = 0.0
            for shapes in shape_list:
                key = case_key(impl.name, shapes)
                if replay:
                    lat = log[key]
                else:
                    lat = measure_case(impl.name, shapes, repeats)
                    log[key] = lat
                med = statistics.median(lat)
                medians[key] = med
                total += med
            totals.append((total, impl.dialect, impl.name))
        totals.sort()
        n = len(totals)
        for rank, (_, _, name) in enumerate(totals):
            table[name] = PRIORITY_BASE + PRIORITY_STEP * (n - 1 - rank)
    if record:
        Path(record).write_text(json.dumps(log, indent=2, sort_keys=True) + "\n")
    return PriorityTable(table, medians)
