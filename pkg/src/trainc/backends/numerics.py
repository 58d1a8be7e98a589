"""Storage/compute dtype handling and deterministic f16 emulation.

Tensors are stored as f32 or f16 (f64 is accepted as a high-precision
storage mode for gradient checking).  Arithmetic on f16 storage is carried out
in f32 and rounded back to f16 after every primitive step, which is what the
``rnd`` helper of :class:`Numerics` does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

F16 = np.dtype(np.float16)
F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)


def round_f16(x) -> np.ndarray:
    """Round to the nearest f16, ties to even (numpy's conversion is IEEE RNE)."""
    return np.asarray(x, dtype=F32).astype(F16)


@dataclass(frozen=True)
class Numerics:
    """Arithmetic context for one kernel invocation."""

    storage: np.dtype

    @classmethod
    def of(cls, args) -> "Numerics":
        for a in args:
            if isinstance(a, np.ndarray):
                return cls(a.dtype)
        return cls(F32)

    @property
    def compute(self) -> np.dtype:
        return F64 if self.storage == F64 else F32

    def up(self, a):
        """Promote an argument to the compute dtype; scalars are first rounded to storage."""
        if isinstance(a, np.ndarray):
            return a.astype(self.compute, copy=False)
        return self.compute.type(self.storage.type(a))

    def rnd(self, x):
        if self.storage == F16:
            return np.asarray(x).astype(F16).astype(F32)
        return np.asarray(x, dtype=self.compute)

    def out(self, x) -> np.ndarray:
        return np.ascontiguousarray(np.asarray(x).astype(self.storage, copy=False))


def left_fold_sum(x: np.ndarray, axis: int | None = None, keepdims: bool = False) -> np.ndarray:
    """Sum accumulated strictly left to right in the array's dtype."""
    if axis is None:
        flat = np.ravel(x)
        total = np.add.accumulate(flat)[-1:]
        return total.reshape((1,) * x.ndim) if keepdims else total
    acc = np.add.accumulate(x, axis=axis)
    last = np.take(acc, [x.shape[axis] - 1], axis=axis)
    return last if keepdims else np.squeeze(last, axis=axis)
