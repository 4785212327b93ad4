"""Fixed ternary 3D filter bank shared by every LBV layer."""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagicError, BankValidationError, TensorFormatError, TruncatedPayloadError
from .tensor import Rng

MAGIC = b"LBVB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIfQ")


def _bank_id(values: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<4I", *values.shape))
    h.update(values.astype(np.int8).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class TernaryFilterBank:
    """``count`` fixed filters of shape ``(k, k, k)`` with entries in {-1, 0, 1}.

    The entry array is read-only; ``id`` is a hash of the entries, so two banks
    with equal content always share an id.
    """

    values: np.ndarray
    sparsity: float = 0.9
    seed: int = 0
    id: str = field(init=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.int8, copy=True)
        if vals.ndim != 4 or not (vals.shape[1] == vals.shape[2] == vals.shape[3]):
            raise BankValidationError(f"bank must have shape [count,k,k,k], got {vals.shape}")
        if vals.shape[1] % 2 == 0:
            raise BankValidationError("filter size must be odd")
        if vals.shape[0] < 1:
            raise BankValidationError("bank needs at least one filter")
        if not np.isin(vals, (-1, 0, 1)).all():
            raise BankValidationError("bank entries must lie in {-1, 0, 1}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "id", _bank_id(vals))

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def filter_shape(self):
        return self.values.shape[1:]

    @property
    def taps(self) -> int:
        return int(np.prod(self.filter_shape))

    def nonzero_fraction(self) -> float:
        return float(np.count_nonzero(self.values)) / self.values.size

    def tap_lists(self):
        """Per filter, the flat tap indices holding +1 and -1."""
        flat = self.values.reshape(self.count, -1)
        return [(np.flatnonzero(f == 1), np.flatnonzero(f == -1)) for f in flat]

    def __eq__(self, other):
        return isinstance(other, TernaryFilterBank) and self.id == other.id

    def __hash__(self):
        return hash(self.id)

    def __repr__(self):
        return (f"TernaryFilterBank(count={self.count}, shape={self.filter_shape}, "
                f"sparsity={self.sparsity}, seed={self.seed}, id={self.id})")


def generate_bank(count: int = 64, sparsity: float = 0.9, seed: int = 0,
                  size: int = 3) -> TernaryFilterBank:
    """Sample a bank entry-wise.

    Each entry is non-zero with probability ``sparsity``; a non-zero entry is
    +1 or -1 with equal probability.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity}")
    n = count * size ** 3
    u = Rng(seed).uniform(2 * n)
    nonzero = u[:n] < sparsity
    sign = np.where(u[n:] < 0.5, 1, -1)
    values = (nonzero * sign).astype(np.int8).reshape(count, size, size, size)
    return TernaryFilterBank(values, sparsity=float(np.float32(sparsity)), seed=int(seed))


def bank_as_dense_weights(bank: TernaryFilterBank, dtype=np.float32) -> np.ndarray:
    return bank.values.astype(dtype)


def bank_from_dense_weights(w: np.ndarray, sparsity=0.9, seed=0) -> TernaryFilterBank:
    if not np.array_equal(w, np.round(w)):
        raise BankValidationError("dense weights are not integral")
    return TernaryFilterBank(np.asarray(w).astype(np.int8), sparsity=sparsity, seed=seed)


def bank_to_bytes(bank: TernaryFilterBank) -> bytes:
    if bank.filter_shape != (3, 3, 3):
        raise BankValidationError("the bank file format stores 3x3x3 filters only")
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, bank.count, bank.sparsity,
                        bank.seed & 0xFFFFFFFFFFFFFFFF)
    return head + bank.values.tobytes()


def bank_from_bytes(buf: bytes) -> TernaryFilterBank:
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than the LBVB header")
    magic, version, count, sparsity, seed = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported LBVB version {version}")
    n = count * 27
    body = buf[_HEADER.size:]
    if len(body) < n:
        raise TruncatedPayloadError(f"bank payload has {len(body)} bytes, expected {n}")
    if len(body) > n:
        raise TensorFormatError("trailing bytes after bank payload")
    values = np.frombuffer(body, dtype=np.int8).reshape(count, 3, 3, 3)
    return TernaryFilterBank(values, sparsity=float(np.float32(sparsity)), seed=int(seed))


def save_bank(bank: TernaryFilterBank, path) -> None:
    with open(os.fspath(path), "wb") as fh:
        fh.write(bank_to_bytes(bank))


def load_bank(path) -> TernaryFilterBank:
    with open(os.fspath(path), "rb") as fh:
        return bank_from_bytes(fh.read())


def bank_digest(bank: TernaryFilterBank) -> str:
    """Recompute the content hash; differs from ``bank.id`` only if the values changed."""
    return _bank_id(bank.values)
