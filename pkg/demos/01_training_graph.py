"""From a forward MLP to a fused, dispatched training step.

Run: python3 demos/01_training_graph.py
"""

from __future__ import annotations

from trainc.autodiff import TrainingSpec, autodiff
from trainc.fusion import closures_of, fuse_pass, kernel_count
from trainc.ir import print_text, to_anf
from trainc.models import get_model
from trainc.opreg import DispatchConfig, dispatch_pass
from trainc.training import train

model = get_model("mlp2")
forward = model.forward()
print(print_text(forward))

step = autodiff(forward, TrainingSpec())
print(f"training step: {kernel_count(step)} kernels")

fused = fuse_pass(step)
for c in closures_of(fused):
    print(f"  closure {c.fn.name}: pattern={c.fn.attrs.get('pattern')} dialect={c.fn.attrs['dialect']}")
print(f"after fusion: {kernel_count(fused)} kernels")

program = to_anf(dispatch_pass(fused, DispatchConfig()))
losses = train(program, model, 20, seed=0).losses
print("loss every 5 steps:", [round(x, 5) for x in losses[::5]])
