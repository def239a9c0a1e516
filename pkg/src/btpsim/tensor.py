"""Minimal deterministic dense-tensor kernels.

Storage is row-major float64, always. The element_bytes attribute exists only
for byte accounting (communication volume, memory estimates); arithmetic never
runs at reduced precision.

Matrix products accumulate in ascending-k order, i.e. the order of the plain
k-innermost triple loop. Any two calls that contract the same index range
therefore produce bitwise-equal sums, which is what lets sharded, grouped and
batched executions of one contraction be compared exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

VALID_ELEMENT_BYTES = (1, 2, 4, 8)


class DimensionError(ValueError):
    """Shapes do not conform for the requested operation."""


class DivisibilityError(ValueError):
    """A dimension is not divisible as required; message names the dimension."""


@dataclass(frozen=True)
class Tensor:
    """Dense row-major float64 tensor plus a byte-accounting width."""

    values: np.ndarray
    element_bytes: int = 2

    def __post_init__(self):
        if self.element_bytes not in VALID_ELEMENT_BYTES:
            raise ValueError(
                f"element_bytes must be one of {VALID_ELEMENT_BYTES}, got {self.element_bytes}"
            )
        v = self.values
        if not isinstance(v, np.ndarray) or v.dtype != np.float64:
            raise TypeError("Tensor values must be a float64 ndarray")
        if not v.flags["C_CONTIGUOUS"]:
            object.__setattr__(self, "values", np.ascontiguousarray(v))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def elements(self) -> int:
        return int(self.values.size)

    @property
    def logical_nbytes(self) -> int:
        """Accounting bytes: element count times element_bytes."""
        return self.elements * self.element_bytes


def tensor(data, element_bytes: int = 2) -> Tensor:
    return Tensor(np.ascontiguousarray(np.asarray(data, dtype=np.float64)), element_bytes)


def zeros(shape: tuple[int, ...], element_bytes: int = 2) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), element_bytes)


def mm_values(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[M,K] @ [K,N] with ascending-k accumulation.

    One rank-1 update per k step: every output element sees the exact
    floating-point sequence ((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ..., which
    is bitwise identical to the k-innermost triple loop.
    """
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for k in range(kk):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matmul(a: Tensor, b: Tensor) -> tuple[Tensor, int]:
    """Dense 2-D product; returns (result, flops) with flops = 2*M*N*K."""
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    return Tensor(mm_values(a.values, b.values), a.element_bytes), 2 * m * n * k


def batched_matmul(pairs: Sequence[tuple[Tensor, Tensor]]) -> tuple[list[Tensor], int]:
    """Independent 2-D products sharing one kernel launch.

    Each pair is computed exactly as matmul would compute it, so outputs are
    bitwise equal to sequential matmul calls. Launch accounting (one launch
    for the whole batch) is the caller's job; this returns summed flops.
    """
    if not pairs:
        raise DimensionError("batched_matmul needs at least one pair")
    outs: list[Tensor] = []
    flops = 0
    for a, b in pairs:
        out, f = matmul(a, b)
        outs.append(out)
        flops += f
    return outs, flops


def transpose(t: Tensor) -> Tensor:
    if t.values.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {t.shape}")
    return Tensor(np.ascontiguousarray(t.values.T), t.element_bytes)


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so this never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu_values(x: np.ndarray) -> np.ndarray:
    return x * sigmoid_values(x)


def swiglu_values(gate: np.ndarray, up: np.ndarray) -> np.ndarray:
    return silu_values(gate) * up


def swiglu(gate: Tensor, up: Tensor) -> Tensor:
    """Elementwise silu(gate) * up; shapes must match exactly."""
    if gate.shape != up.shape:
        raise DimensionError(f"swiglu operands disagree: {gate.shape} vs {up.shape}")
    return Tensor(swiglu_values(gate.values, up.values), gate.element_bytes)


def split_axis(t: Tensor, axis: int, parts: int) -> list[Tensor]:
    """Split into equal contiguous pieces along axis; errors name the dimension."""
    size = t.shape[axis]
    if parts <= 0 or size % parts != 0:
        raise DivisibilityError(
            f"axis {axis} of size {size} is not divisible into {parts} parts"
        )
    return [
        Tensor(np.ascontiguousarray(piece), t.element_bytes)
        for piece in np.split(t.values, parts, axis=axis)
    ]


def concat_axis(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat_axis needs at least one tensor")
    base = tensors[0]
    for t in tensors[1:]:
        if t.values.ndim != base.values.ndim:
            raise DimensionError("concat_axis rank mismatch")
        for ax, (da, db) in enumerate(zip(base.shape, t.shape)):
            if ax != (axis % base.values.ndim) and da != db:
                raise DimensionError(
                    f"concat_axis shape mismatch on axis {ax}: {base.shape} vs {t.shape}"
                )
    return Tensor(
        np.ascontiguousarray(np.concatenate([t.values for t in tensors], axis=axis)),
        base.element_bytes,
    )


# SplitMix64 constants (Steele, Lea, Flood 2014); full 64-bit wraparound.
_SM64_GAMMA = 0x9E3779B97F4A7C15
_SM64_M1 = 0xBF58476D1CE4E5B9
_SM64_M2 = 0x94D049BB133111EB
_U64_MASK = (1 << 64) - 1


def _splitmix64_stream(seed: int, count: int) -> np.ndarray:
    """64-bit outputs of SplitMix64 starting from state = seed.

    Per element i (0-based) the generator state is seed + (i+1)*gamma mod 2**64
    and the output is the standard finalizer:

        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        z = z ^ (z >> 31)
    """
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = idx * np.uint64(_SM64_GAMMA) + np.uint64(seed & _U64_MASK)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM64_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM64_M2)
    return z ^ (z >> np.uint64(31))


def seeded_fill(shape: tuple[int, ...], seed: int, element_bytes: int = 2) -> Tensor:
    """Deterministic fill with values in [-1, 1) from SplitMix64.

    Elements are drawn in row-major order; output i maps to a float via
    (z >> 11) * 2**-53 in [0, 1), then 2u - 1. Same (shape, seed) always
    produces the same tensor, independent of platform.
    """
    count = 1
    for dim in shape:
        count *= dim
    z = _splitmix64_stream(seed, count)
    unit = (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return Tensor((2.0 * unit - 1.0).reshape(shape), element_bytes)
