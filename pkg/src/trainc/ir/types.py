"""Tensor and tuple types with static shapes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

_U64_MAX = 2**64 - 1


class DType(enum.Enum):
    F32 = "f32"
    F16 = "f16"

    @property
    def width(self) -> int:
        return 4 if self is DType.F32 else 2

    @property
    def np(self) -> np.dtype:
        return np.dtype(np.float32) if self is DType.F32 else np.dtype(np.float16)

    @classmethod
    def parse(cls, text: str) -> "DType":
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown dtype {text!r}") from None

    @classmethod
    def from_numpy(cls, dt) -> "DType":
        dt = np.dtype(dt)
        if dt == np.float16:
            return cls.F16
        if dt in (np.float32, np.float64):
            return cls.F32
        raise ValueError(f"unsupported numpy dtype {dt}")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class TensorType:
    dtype: DType
    shape: tuple[int, ...]

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        if not shape:
            raise ValueError("tensor shapes need at least one dimension")
        if any(d < 1 for d in shape):
            raise ValueError(f"non-positive dimension in {shape}")
        if math.prod(shape) * self.dtype.width > _U64_MAX:
            raise ValueError(f"tensor of shape {shape} overflows 64-bit byte size")
        object.__setattr__(self, "shape", shape)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def size_bytes(self) -> int:
        return self.numel * self.dtype.width

    def with_dtype(self, dtype: DType) -> "TensorType":
        return TensorType(dtype, self.shape)

    def __str__(self) -> str:
        return f"{self.dtype}[{','.join(map(str, self.shape))}]"


@dataclass(frozen=True)
class TupleType:
    fields: tuple["Type", ...]

    @property
    def size_bytes(self) -> int:
        return sum(f.size_bytes for f in self.fields)

    def __str__(self) -> str:
        return "(" + ", ".join(map(str, self.fields)) + ")"


Type = Union[TensorType, TupleType]


def f32(*shape: int) -> TensorType:
    return TensorType(DType.F32, shape)


def f16(*shape: int) -> TensorType:
    return TensorType(DType.F16, shape)
