"""Dense float64 tensor substrate.

Tensors are plain C-contiguous ``numpy.ndarray`` objects with dtype
float64 and rank >= 1; every extent is >= 1. The helpers here are the
only constructors/reducers the rest of the package relies on, so the
conventions (row-major layout, left-to-right reduction order, one named
PRNG) are pinned in a single place.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

__all__ = [
    "Rng",
    "as_tensor",
    "elementwise",
    "flat_index",
    "full",
    "load_tensor",
    "matmul",
    "normal_init",
    "reduce",
    "row_major_strides",
    "save_tensor",
    "zeros",
    "zeros_like",
]

DTYPE = np.float64

TENSOR_MAGIC = b"MDIC"
TENSOR_FORMAT_VERSION = 1


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("tensor shape must have rank >= 1")
    if any(s < 1 for s in shape):
        raise ValueError(f"tensor extents must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def full(shape: Sequence[int], value: float) -> np.ndarray:
    return np.full(_check_shape(shape), float(value), dtype=DTYPE)


def zeros_like(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x, dtype=DTYPE)


def as_tensor(data) -> np.ndarray:
    """Coerce nested lists / arrays to a valid float64 tensor."""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    _check_shape(arr.shape)
    return arr


def row_major_strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Element strides (not byte strides) for row-major layout."""
    shape = _check_shape(shape)
    strides = [1] * len(shape)
    for i in range(len(shape) - 2, -1, -1):
        strides[i] = strides[i + 1] * shape[i + 1]
    return tuple(strides)


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    strides = row_major_strides(shape)
    if len(index) != len(strides):
        raise ValueError("index rank does not match shape rank")
    return sum(i * s for i, s in zip(index, strides))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product [m,k] x [k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


_BINARY_EW = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,  # IEEE semantics: x/0 -> +-inf, 0/0 -> nan
    "max": np.maximum,
}

_UNARY_EW = {
    "exp": np.exp,
    "log": np.log,
}


def elementwise(op: str, a: np.ndarray, b=None) -> np.ndarray:
    """Elementwise math over equal shapes, or tensor-vs-scalar.

    ``exp`` and ``log`` are unary; the rest require ``b``. Broadcasting
    is restricted to a python/0-d scalar on either side.
    """
    if op in _UNARY_EW:
        if b is not None:
            raise ValueError(f"'{op}' is unary")
        return _UNARY_EW[op](a)
    if op not in _BINARY_EW:
        raise ValueError(f"unknown elementwise op '{op}'")
    if b is None:
        raise ValueError(f"'{op}' needs two operands")
    a_scalar = np.isscalar(a) or getattr(a, "ndim", 1) == 0
    b_scalar = np.isscalar(b) or getattr(b, "ndim", 1) == 0
    if not a_scalar and not b_scalar and np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    return _BINARY_EW[op](a, b, dtype=DTYPE) if not (a_scalar and b_scalar) else DTYPE(_BINARY_EW[op](a, b))


def _seq_sum(x: np.ndarray, axis) -> np.ndarray:
    # Strict left-to-right accumulation so a single-loop reference
    # reproduces the result bit for bit (np.sum is pairwise).
    if axis is None:
        return np.add.accumulate(x.reshape(-1))[-1]
    return np.add.accumulate(x, axis=axis).take(-1, axis=axis)


def reduce(op: str, x: np.ndarray, axis: int | None = None):
    """Reduce ``x`` fully or along one axis.

    Sums run strictly left to right; ``argmax`` breaks ties toward the
    lowest index. Full reductions return a python float / int.
    """
    if axis is not None and not (0 <= axis < x.ndim):
        raise ValueError(f"axis {axis} invalid for rank {x.ndim}")
    if op == "sum":
        out = _seq_sum(x, axis)
    elif op == "mean":
        n = x.size if axis is None else x.shape[axis]
        out = _seq_sum(x, axis) / n
    elif op == "max":
        out = np.max(x) if axis is None else np.max(x, axis=axis)
    elif op == "argmax":
        out = np.argmax(x) if axis is None else np.argmax(x, axis=axis)
    else:
        raise ValueError(f"unknown reduction '{op}'")
    if np.ndim(out) == 0:
        return out.item()
    return np.ascontiguousarray(out)


class Rng:
    """Deterministic PRNG (PCG64 under ``numpy.random.Generator``).

    Identical seed + identical call sequence gives an identical value
    sequence; the integer stream is bit-exact across platforms, float
    draws are compared at 1e-12 in the tests.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: int) -> "Rng":
        """Independent substream identified by (seed, tag)."""
        rng = Rng.__new__(Rng)
        rng.seed = self.seed
        rng._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, int(tag)]))
        )
        return rng

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.standard_normal(_check_shape(shape), dtype=DTYPE)

    def uniform(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.random(_check_shape(shape), dtype=DTYPE)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def normal_init(rng: Rng, shape: Sequence[int], fan_in: int) -> np.ndarray:
    """He-style init: samples from N(0, 2/fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return rng.normal(shape) * np.sqrt(2.0 / fan_in)


def save_tensor(f: BinaryIO | str, x: np.ndarray) -> None:
    """Write the binary tensor record: magic, version, rank, extents, payload.

    Extents are little-endian u64, payload little-endian float64 in
    row-major order.
    """
    if isinstance(f, str):
        with open(f, "wb") as fh:
            save_tensor(fh, x)
        return
    x = as_tensor(x)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<II", TENSOR_FORMAT_VERSION, x.ndim))
    f.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    f.write(x.astype("<f8", copy=False).tobytes(order="C"))


def load_tensor(f: BinaryIO | str) -> np.ndarray:
    if isinstance(f, str):
        with open(f, "rb") as fh:
            return load_tensor(fh)
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", f.read(8))
    if version != TENSOR_FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = int(np.prod(shape))
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape)
    return np.ascontiguousarray(arr)
