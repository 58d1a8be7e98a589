"""Training loop over a compiled training-step function.

A training step takes the data inputs (``x``, ``label``), the parameters
(``@{param=1}``) and optimiser states (``@{opt_state=...}``) and returns the
loss followed by outputs tagged ``new_param`` / ``new_opt_state``.  The loop
threads those outputs back into the next step's inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ir.convert import ensure_anf
from .ir.expr import FunctionIR, Tuple, anf_bindings
from .models import BuiltinModel
from .opreg import DispatchConfig, dispatch_pass
from .vm.bytecode import compile_bytecode
from .vm.interpreter import evaluate
from .vm.machine import VirtualMachine


@dataclass(frozen=True)
class StepSignature:
    """How a training step's inputs and outputs map onto the training state."""

    inputs: tuple[str, ...]  # per parameter: "data:<name>", "param:<name>" or "opt:<key>"
    outputs: tuple[str | None, ...]  # per output: "loss", "param:<name>", "opt:<key>" or None

    @classmethod
    def of(cls, fn: FunctionIR) -> "StepSignature":
        ins = []
        for p in fn.params:
            if p.attrs.get("param"):
                ins.append(f"param:{p.name}")
            elif "opt_state" in p.attrs:
                ins.append(f"opt:{p.attrs['opt_state']}")
            else:
                ins.append(f"data:{p.name}")
        _, ret = anf_bindings(ensure_anf(fn))
        fields = ret.fields if isinstance(ret, Tuple) else (ret,)
        outs = []
        for f in fields:
            attrs = getattr(f, "attrs", {})
            if getattr(f, "name", None) == "loss":
                outs.append("loss")
            elif "new_param" in attrs:
                outs.append(f"param:{attrs['new_param']}")
            elif "new_opt_state" in attrs:
                outs.append(f"opt:{attrs['new_opt_state']}")
            else:
                outs.append(None)
        return cls(tuple(ins), tuple(outs))


def initial_state(fn: FunctionIR, model: BuiltinModel, seed: int) -> dict[str, np.ndarray]:
    """Model parameters from the seeded initialiser, optimiser states zeroed."""
    params = model.init_params(seed)
    state = {}
    for p, key in zip(fn.params, StepSignature.of(fn).inputs):
        kind, _, name = key.partition(":")
        if kind == "param":
            state[key] = params[name].astype(p.ty.dtype.np)
        elif kind == "opt":
            state[key] = np.zeros(p.ty.shape, dtype=p.ty.dtype.np)
    return state


@dataclass
class TrainResult:
    losses: list[float]
    state: dict[str, np.ndarray]
    iter_seconds: list[float] = field(default_factory=list)
    peak_pool_bytes: list[int] = field(default_factory=list)
    loss_dtypes: list[str] = field(default_factory=list)


class Stepper:
    """Runs one training step on the VM (default) or the reference interpreter."""

    def __init__(self, fn: FunctionIR, runner: str = "vm", dispatch: DispatchConfig | None = None) -> None:
        fn = ensure_anf(fn)
        self.signature = StepSignature.of(fn)
        self.fn = fn
        self.runner = runner
        if runner == "vm":
            if any("." not in getattr(v, "op", ".") for _, v in anf_bindings(fn)[0]):
                fn = ensure_anf(dispatch_pass(fn, dispatch or DispatchConfig()))
            self.vm = VirtualMachine(compile_bytecode(fn))
        elif runner != "interp":
            raise ValueError(f"unknown runner {runner!r}")

    def __call__(self, inputs: list[np.ndarray]) -> list[np.ndarray]:
        if self.runner == "vm":
            return self.vm.run(inputs)
        return evaluate(self.fn, inputs)

    @property
    def pool_high_water(self) -> int:
        return self.vm.pool.stats.high_water if self.runner == "vm" else 0


def train(
    fn: FunctionIR,
    model: BuiltinModel,
    steps: int,
    seed: int = 0,
    *,
    runner: str = "vm",
    state: dict[str, np.ndarray] | None = None,
    data_transform=None,
    dispatch: DispatchConfig | None = None,
) -> TrainResult:
    """Run ``steps`` training iterations on the model's seeded data stream.

    Undispatched functions run on the VM are dispatched with ``dispatch``
    (all dialects by default).
    """
    stepper = Stepper(fn, runner, dispatch)
    sig = stepper.signature
    state = dict(state) if state is not None else initial_state(stepper.fn, model, seed)
    result = TrainResult([], state)
    for step in range(steps):
        x, label = model.data(seed, step)
        data = {"x": x, "label": label}
        if data_transform is not None:
            data = data_transform(data)
        inputs = []
        for key in sig.inputs:
            kind, _, name = key.partition(":")
            inputs.append(data[name] if kind == "data" else state[key])
        t0 = time.perf_counter()
        outs = stepper(inputs)
        result.iter_seconds.append(time.perf_counter() - t0)
        for key, value in zip(sig.outputs, outs):
            if key == "loss":
                result.losses.append(float(value.reshape(-1)[0]))
                result.loss_dtypes.append(str(value.dtype))
            elif key is not None:
                state[key] = value
        result.peak_pool_bytes.append(stepper.pool_high_water)
    return result
