"""Dense rank-4 NCHW tensors: construction, comparison and a binary file format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank 4.
The helpers here validate that contract and never mutate their inputs.

File layout (all little-endian)::

    8 bytes   magic  b"GALDTNS1"
    4 x u32   n, c, h, w
    n*c*h*w x f64 payload, row-major NCHW
"""
from __future__ import annotations

import os
import struct
from typing import Union

import numpy as np

MAGIC = b"GALDTNS1"
_HEADER = struct.Struct("<8s4I")
_MAX_ELEMENTS = np.iinfo(np.intp).max
_MAX_DIM = 2**32 - 1

PathLike = Union[str, os.PathLike]


class ShapeError(ValueError):
    """Invalid or mismatched tensor shape."""


class FormatError(ValueError):
    """Tensor file header is malformed."""


class LengthError(ValueError):
    """Tensor file payload does not match its header."""


def check_shape(shape) -> tuple[int, int, int, int]:
    """Validate a 4-tuple of non-negative dims and return it as ints.

    Raises ShapeError when the element count would overflow the index type.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected 4 dims (n, c, h, w), got {len(shape)}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative dimension in {shape}")
    total = 1
    for s in shape:
        total *= s  # python ints: no silent wraparound
    if total > _MAX_ELEMENTS:
        raise ShapeError(f"shape {shape} has {total} elements, exceeding the index range")
    return shape


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a float64 rank-4 array (no copy when already conforming)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got rank {arr.ndim}")
    return arr


def create(shape, fill: str = "zeros", *, value: float = 0.0, seed: int = 0,
           lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Build a tensor of ``shape``.

    ``fill`` is one of ``zeros``, ``ones``, ``constant`` (uses ``value``) or
    ``seeded_uniform`` (uniform on [lo, hi) from a PCG64 stream seeded with
    ``seed``; equal seeds give bit-identical tensors).
    """
    shape = check_shape(shape)
    if int(np.prod(shape, dtype=object)) == 0:
        raise ShapeError(f"shape {shape} has no elements")
    if fill == "zeros":
        return np.zeros(shape)
    if fill == "ones":
        return np.ones(shape)
    if fill == "constant":
        return np.full(shape, float(value))
    if fill == "seeded_uniform":
        if not hi > lo:
            raise ValueError(f"need lo < hi, got [{lo}, {hi})")
        return np.random.default_rng(seed).uniform(lo, hi, size=shape)
    raise ValueError(f"unknown fill {fill!r}")


def approx_eq(a, b, rtol: float = 1e-9, atol: float = 0.0) -> bool:
    """True iff ``|a - b| <= atol + rtol * |b|`` holds element-wise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.abs(b)))


def concat_channels(a, b) -> np.ndarray:
    """Stack ``b``'s channels after ``a``'s."""
    a, b = as_tensor(a), as_tensor(b)
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concat {a.shape} and {b.shape}: n/h/w differ")
    return np.concatenate([a, b], axis=1)


def slice_channels(t, start: int, stop: int) -> np.ndarray:
    t = as_tensor(t)
    if not 0 <= start <= stop <= t.shape[1]:
        raise ShapeError(f"channel range [{start}, {stop}) outside 0..{t.shape[1]}")
    return t[:, start:stop].copy()


def to_bytes(t) -> bytes:
    t = as_tensor(t)
    if any(s > _MAX_DIM for s in t.shape):
        raise ShapeError(f"dims {t.shape} do not fit the u32 header")
    payload = np.ascontiguousarray(t, dtype="<f8").tobytes()
    return _HEADER.pack(MAGIC, *t.shape) + payload


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"file is {len(buf)} bytes, shorter than the {_HEADER.size}-byte header")
    magic, *shape = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    shape = check_shape(shape)
    expected = int(np.prod(shape, dtype=object)) * 8
    got = len(buf) - _HEADER.size
    if got != expected:
        raise LengthError(f"header promises {expected // 8} elements, payload holds {got / 8:g}")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
    return data.astype(np.float64).reshape(shape)


def save(t, path: PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(t))


def load(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
