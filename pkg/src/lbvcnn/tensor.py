"""Dense tensors, seeded RNG and the LBVT binary tensor format.

Tensors are plain C-contiguous :class:`numpy.ndarray` objects of dtype
float32 or float64. The helpers here only add validation on top of numpy.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import (
    BadDtypeError,
    BadMagicError,
    InvalidShapeError,
    TensorFormatError,
    TruncatedPayloadError,
)

MAGIC = b"LBVT"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sHBB")

DEFAULT_DTYPE = np.float32


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise InvalidShapeError("tensor rank must be >= 1")
    if any(s < 1 for s in shape):
        raise InvalidShapeError(f"all axes must be >= 1, got {shape}")
    return shape


def _check_dtype(dtype):
    dtype = np.dtype(dtype)
    if dtype not in DTYPE_CODES:
        raise BadDtypeError(f"unsupported dtype {dtype}; use float32 or float64")
    return dtype


def tensor_new(shape, dtype=DEFAULT_DTYPE, fill=0.0) -> np.ndarray:
    """Return a new tensor of ``shape`` filled with ``fill``."""
    return np.full(_check_shape(shape), fill, dtype=_check_dtype(dtype))


def as_tensor(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in DTYPE_CODES else DEFAULT_DTYPE
    arr = np.ascontiguousarray(arr, dtype=_check_dtype(dtype))
    _check_shape(arr.shape)
    return arr


def permute_axes(t: np.ndarray, order) -> np.ndarray:
    """Reorder axes so that output axis ``k`` is input axis ``order[k]``.

    Returns a fresh contiguous array; the input is never modified.
    """
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(t.ndim)):
        raise InvalidShapeError(f"{order} is not a permutation of 0..{t.ndim - 1}")
    return np.ascontiguousarray(np.transpose(t, order))


def inverse_permutation(order):
    inv = [0] * len(order)
    for i, o in enumerate(order):
        inv[o] = i
    return tuple(inv)


# -- file format -------------------------------------------------------------

def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = as_tensor(t)
    if t.ndim > 255:
        raise InvalidShapeError("rank above 255 cannot be encoded")
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_CODES[t.dtype], t.ndim)
    dims = struct.pack(f"<{t.ndim}I", *t.shape)
    payload = t.astype(t.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return head + dims + payload


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than the LBVT header")
    magic, version, code, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported LBVT version {version}")
    if code not in CODE_DTYPES:
        raise BadDtypeError(f"unknown dtype code {code}")
    if rank == 0:
        raise TensorFormatError("rank 0 is not a valid tensor")
    off = _HEADER.size
    if len(buf) < off + 4 * rank:
        raise TruncatedPayloadError("file truncated inside the shape block")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    _check_shape(shape)
    off += 4 * rank
    dtype = CODE_DTYPES[code]
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(buf) - off < nbytes:
        raise TruncatedPayloadError(
            f"payload has {len(buf) - off} bytes, expected {nbytes}")
    if len(buf) - off > nbytes:
        raise TensorFormatError("trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=int(np.prod(shape)),
                        offset=off)
    return arr.astype(dtype).reshape(shape)


def save_tensor(t: np.ndarray, path) -> None:
    with open(os.fspath(path), "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        return tensor_from_bytes(fh.read())


# -- RNG ---------------------------------------------------------------------

class Rng:
    """Seeded PCG64 stream.

    :meth:`uniform` is derived from the raw 64-bit outputs
    (top 53 bits scaled by 2**-53), so the sequence depends only on PCG64
    itself, not on numpy's distribution code.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.PCG64(self.seed)
        self.gen = np.random.Generator(self._bitgen)

    def uniform(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be >= 0")
        if n == 0:
            return np.empty(0, dtype=np.float64)
        raw = self._bitgen.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, shape, std=1.0, dtype=np.float64) -> np.ndarray:
        return (self.gen.standard_normal(shape) * std).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def child(self, key: int) -> "Rng":
        """Independent stream derived from this seed and ``key``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, np.uint64)[0]))


def rng_uniform(rng: Rng, n: int) -> np.ndarray:
    return rng.uniform(n)
