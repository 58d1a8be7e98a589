"""Built-in models and their seeded synthetic data.

Each model is a plain forward function in IR text (parameters marked with
``@{param=1}``), a deterministic initialiser and a teacher-network data
generator, all reproducible from an integer seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ir.expr import FunctionIR
from .ir.text import parse_text

DEFAULT_BATCH = 32


@dataclass(frozen=True)
class BuiltinModel:
    name: str
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    batch: int = DEFAULT_BATCH

    def __post_init__(self) -> None:
        if len(self.activations) != len(self.widths) - 2:
            raise ValueError("one activation per hidden layer")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(self.n_layers):
            shapes[f"w{i + 1}"] = (self.widths[i], self.widths[i + 1])
            shapes[f"b{i + 1}"] = (self.widths[i + 1],)
        return shapes

    def source(self) -> str:
        """Forward pass as IR text."""
        params = [f"%x: f32[{self.batch},{self.widths[0]}]"]
        params += [
            f"%{n} @{{param=1}}: f32[{','.join(map(str, s))}]" for n, s in self.param_shapes().items()
        ]
        lines = [f"fn main({', '.join(params)}) {{"]
        cur = "x"
        for i in range(self.n_layers):
            k = i + 1
            lines.append(f"  let %h{k} = matmul(%{cur}, %w{k});")
            out = f"a{k}" if i < self.n_layers - 1 else "out"
            lines.append(f"  let %{out} = add(%h{k}, %b{k});")
            cur = out
            if i < self.n_layers - 1:
                lines.append(f"  let %z{k} = {self.activations[i]}(%a{k});")
                cur = f"z{k}"
        lines.append(f"  %{cur}")
        lines.append("}")
        return "\n".join(lines) + "\n"

    def forward(self) -> FunctionIR:
        return parse_text(self.source()).main

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng([seed, 0])
        out = {}
        for name, shape in self.param_shapes().items():
            if name.startswith("w"):
                bound = 1.0 / np.sqrt(shape[0])
                out[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            else:
                out[name] = np.zeros(shape, dtype=np.float32)
        return out

    def teacher(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng([seed, 1])
        return (rng.standard_normal((self.widths[0], self.widths[-1])) / np.sqrt(self.widths[0])).astype(
            np.float32
        )

    def data(self, seed: int, step: int, batch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Batch ``step`` of the stream: inputs and teacher labels ``tanh(x @ T)``."""
        batch = batch or self.batch
        rng = np.random.default_rng([seed, 2, step])
        x = rng.standard_normal((batch, self.widths[0])).astype(np.float32)
        label = np.tanh(x.astype(np.float64) @ self.teacher(seed).astype(np.float64)).astype(np.float32)
        return x, label

    def with_batch(self, batch: int) -> "BuiltinModel":
        return BuiltinModel(self.name, self.widths, self.activations, batch)


MODELS: dict[str, BuiltinModel] = {
    "mlp2": BuiltinModel("mlp2", (784, 128, 10), ("tanh",)),
    "mlp3": BuiltinModel("mlp3", (784, 128, 64, 10), ("relu", "tanh")),
}


def get_model(name: str, batch: int | None = None) -> BuiltinModel:
    try:
        model = MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return model.with_batch(batch) if batch else model
