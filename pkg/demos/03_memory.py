"""Peak memory, greedy scheduling and rematerialization.

Run: python3 demos/03_memory.py
"""

from __future__ import annotations

from trainc.autodiff import TrainingSpec, autodiff
from trainc.errors import BudgetInfeasible
from trainc.ir import infer_types, parse_function
from trainc.memsched import memory_floor, peak_memory, rematerialize, schedule
from trainc.models import get_model

# a chain whose activations outweigh its single parameter
lines = ["let %h0 = mul(%x, %w);"]
for i in range(1, 7):
    lines += [f"let %t{i} = tanh(%h{i - 1});", f"let %h{i} = mul(%t{i}, %w);"]
body = "\n  ".join(lines)
chain = infer_types(parse_function(f"fn main(%x: f32[256,64], %w @{{param=1}}: f32[64]) {{\n  {body}\n  %h6\n}}"))
step = schedule(autodiff(chain, TrainingSpec()))
peak = peak_memory(step).peak
print(f"deep chain training step: peak {peak} B, floor {memory_floor(step)} B")
for frac in (1.0, 0.95, 0.9, 0.85, 0.8, 0.6):
    try:
        out, plan = rematerialize(step, int(peak * frac))
        print(f"  budget {frac:.0%}: peak {peak_memory(out).peak} B with {plan.overhead} replays")
    except BudgetInfeasible as exc:
        print(f"  budget {frac:.0%}: {exc}")

# on the MLP the pinned parameters and their gradients leave almost nothing to evict
mlp = autodiff(get_model("mlp2").forward(), TrainingSpec())
p, f = peak_memory(mlp).peak, memory_floor(mlp)
print(f"mlp2 training step: peak {p} B, floor {f} B ({f / p:.1%} of peak)")
