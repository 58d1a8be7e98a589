"""Autocast on the training step, and how its casts interact with fusion.

Run: python3 demos/02_mixed_precision.py
"""

from __future__ import annotations

from trainc.autocast import PrecisionPolicy, amp_verify, autocast, cast_census, f16_violations
from trainc.autodiff import TrainingSpec, autodiff
from trainc.fusion import fuse_pass
from trainc.ir import parse_function, infer_types, print_text, to_anf
from trainc.models import get_model

# one f16 producer, two elementwise consumers: each gets its own cast so that
# fusion can pull the cast into the consumer's closure
src = """fn main(%x: f32[4,8], %w: f32[8,8], %b1: f32[8], %b2: f32[8]) {
  let %h = matmul(%x, %w);
  let %c1 = add(%h, %b1);
  let %c2 = mul(%h, %b2);
  (%c1, %c2)
}"""
small = autocast(infer_types(parse_function(src)))
print(print_text(to_anf(small)))
print("cast census after fusion:", cast_census(fuse_pass(small)))

model = get_model("mlp2")
step = autodiff(model.forward(), TrainingSpec())
amp = autocast(step)
print("AlwaysF32 ops fed f16:", f16_violations(amp, PrecisionPolicy.default()))
report = amp_verify(amp, step, model, 50)
print(f"50 steps: max |loss(amp) - loss(f32)| = {report.max_delta:.2e}")
print(f"f32 run on f16-rounded inputs differs by {report.reference_delta:.2e}")
