"""Dense float64 tensor substrate: construction, arithmetic, RNG, file I/O.

Tensors are plain C-contiguous ``numpy.ndarray`` objects with dtype float64;
the semantic dimension order for rank-5 video tensors is
(batch N, channel C, time T, height H, width W). All public operations are
pure: inputs are never modified and results are freshly allocated.

Randomness comes from a small counter-based generator built on the
splitmix64 finisher (a 64-bit xorshift-multiply mix). It is splittable by
key, vectorizes cleanly, and produces identical streams on every platform,
which keeps every seeded artifact in this package bit-reproducible.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import (
    ArgumentError,
    BadMagicError,
    DimOverflowError,
    MissingFileError,
    ShapeError,
    TruncatedFileError,
)

TENSOR_MAGIC = b"STHT"

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
# Largest element count a tensor file may declare; guards against
# allocating absurd buffers from corrupt headers.
_MAX_ELEMENTS = 1 << 40


def check_shape(shape) -> tuple[int, ...]:
    """Validate a shape (sequence of positive ints) and return it as a tuple."""
    try:
        dims = tuple(int(d) for d in shape)
    except TypeError:
        raise ShapeError(f"shape must be a sequence of ints, got {shape!r}")
    if len(dims) == 0:
        raise ShapeError("shape must have at least one dimension")
    for d in dims:
        if d < 1:
            raise ShapeError(f"all dims must be >= 1, got {dims}")
    n = 1
    for d in dims:
        n *= d
    if n > _MAX_ELEMENTS:
        raise ShapeError(f"element count {n} exceeds supported range")
    return dims


def _mix_scalar(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps mod 2**64, which is exactly what we want.
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def _key_to_int(key) -> int:
    if isinstance(key, str):
        # FNV-1a over utf-8 bytes, then mixed.
        h = 0xCBF29CE484222325
        for b in key.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK64
        return _mix_scalar(h)
    return int(key) & _MASK64


class Rng:
    """Deterministic splittable random generator.

    The stream is ``mix(base + GAMMA * i)`` for i = 1, 2, ...; ``derive``
    folds keys into the base to produce an independent child stream without
    consuming any of the parent's output.
    """

    __slots__ = ("_base", "_counter")

    def __init__(self, seed: int):
        self._base = _mix_scalar(int(seed) & _MASK64)
        self._counter = 0

    @classmethod
    def _from_base(cls, base: int) -> "Rng":
        rng = cls.__new__(cls)
        rng._base = base & _MASK64
        rng._counter = 0
        return rng

    def derive(self, *keys) -> "Rng":
        """Child generator keyed by ints/strings; parent state is untouched."""
        h = self._base
        for key in keys:
            h = _mix_scalar(h ^ _mix_scalar(_key_to_int(key) ^ _GAMMA))
        return Rng._from_base(h)

    def seed_value(self) -> int:
        """An integer that reproduces this generator via ``Rng`` derivation."""
        return self._base

    def _next_block(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self._base) + np.uint64(_GAMMA) * idx
        return _mix_array(states)

    def next_u64(self) -> int:
        self._counter += 1
        return _mix_scalar((self._base + _GAMMA * self._counter) & _MASK64)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Uniform floats in [lo, hi), deterministic for a fixed generator state."""
        if not lo < hi:
            raise ArgumentError(f"uniform requires lo < hi, got lo={lo}, hi={hi}")
        dims = check_shape(shape if not isinstance(shape, int) else (shape,))
        n = int(np.prod(dims))
        bits = self._next_block(n)
        # Top 53 bits give a double in [0, 1).
        unit = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return (lo + (hi - lo) * unit).reshape(dims)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Gaussian samples via Box-Muller on two uniform streams."""
        dims = check_shape(shape if not isinstance(shape, int) else (shape,))
        n = int(np.prod(dims))
        u1 = self.uniform((n,))
        u2 = self.uniform((n,))
        # Guard the log against an exact zero draw.
        u1 = np.maximum(u1, 2.0 ** -53)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (mean + std * z).reshape(dims)

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        """n ints uniform over [lo, hi). Modulo bias is negligible (hi-lo << 2^64)."""
        if not lo < hi:
            raise ArgumentError(f"integers requires lo < hi, got lo={lo}, hi={hi}")
        bits = self._next_block(int(n))
        span = np.uint64(hi - lo)
        return (lo + (bits % span).astype(np.int64)).astype(np.int64)

    def randint(self, lo: int, hi: int) -> int:
        """One int uniform over [lo, hi)."""
        return int(self.integers(1, lo, hi)[0])

    def permutation(self, n: int) -> np.ndarray:
        keys = self.uniform((n,)) if n > 0 else np.zeros((0,))
        return np.argsort(keys, kind="stable")


def zeros(shape) -> np.ndarray:
    """All-zero tensor of the given shape."""
    return np.zeros(check_shape(shape), dtype=np.float64)


def ones(shape) -> np.ndarray:
    return np.ones(check_shape(shape), dtype=np.float64)


def random_uniform(shape, seed: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Seeded uniform tensor in [lo, hi); same (shape, seed) -> identical bits."""
    return Rng(seed).uniform(shape, lo, hi)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def reduce_mean(a: np.ndarray, axes) -> np.ndarray:
    """Arithmetic mean over the named axes; result drops those axes."""
    a = np.asarray(a, dtype=np.float64)
    ax = tuple(sorted(set(int(x) for x in axes)))
    for x in ax:
        if x < 0 or x >= a.ndim:
            raise ShapeError(f"axis {x} out of range for rank {a.ndim}")
    return a.mean(axis=ax)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (M,K) and b (K,N), accumulated in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    return a @ b


def write_tensor(path, array: np.ndarray) -> None:
    """Write a tensor file: magic, u32 rank, u32 dims, little-endian f32 payload."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    dims = check_shape(arr.shape)
    for d in dims:
        if d >= 1 << 32:
            raise DimOverflowError(f"dim {d} does not fit in u32")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(arr.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a tensor file back as float64. Raises a distinct error per defect."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"tensor file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: header incomplete", offset=len(blob))
    if blob[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(blob) < 8:
        raise TruncatedFileError(f"{path}: rank field incomplete", offset=len(blob))
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank == 0 or rank > 32:
        raise DimOverflowError(f"{path}: unsupported rank {rank}")
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise TruncatedFileError(f"{path}: dim list incomplete", offset=len(blob))
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = 1
    for d in dims:
        if d == 0:
            raise DimOverflowError(f"{path}: zero dimension in {dims}")
        count *= d
    if count > _MAX_ELEMENTS:
        raise DimOverflowError(f"{path}: element count {count} exceeds supported range")
    expected = header_end + 4 * count
    if len(blob) < expected:
        raise TruncatedFileError(
            f"{path}: payload incomplete, expected {expected} bytes", offset=len(blob)
        )
    payload = np.frombuffer(blob, dtype="<f4", count=count, offset=header_end)
    return payload.astype(np.float64).reshape(dims)
