import numpy as np
import pytest

from lbvcnn.bank import (
    TernaryFilterBank,
    bank_as_dense_weights,
    bank_digest,
    bank_from_bytes,
    bank_from_dense_weights,
    bank_to_bytes,
    generate_bank,
    load_bank,
    save_bank,
)
from lbvcnn.errors import BankValidationError, BadMagicError, TruncatedPayloadError
from lbvcnn.tensor import Rng
from pcg64_oracle import pcg64_raw, uniform_from_raw


def test_entries_ternary(bank):
    assert bank.values.shape == (64, 3, 3, 3)
    assert set(np.unique(bank.values)) <= {-1, 0, 1}


def test_sparsity_boundaries():
    assert np.all(generate_bank(8, 1.0, seed=3).values != 0)
    assert not generate_bank(8, 0.0, seed=3).values.any()


def test_nonzero_fraction_concentration():
    b = generate_bank(64, 0.9, seed=11)
    n = b.values.size
    sd = np.sqrt(0.9 * 0.1 / n)
    frac = b.nonzero_fraction()
    assert abs(frac - 0.9) <= 4 * sd
    nz = b.values[b.values != 0]
    sd_sign = np.sqrt(0.25 / nz.size)
    assert abs((nz == 1).mean() - 0.5) <= 4 * sd_sign


def test_matches_per_entry_sampler():
    # one uniform for "is nonzero" and one for the sign, per entry, in row-major order
    seed, count, sparsity = 9, 4, 0.9
    st = Rng(seed)._bitgen.state["state"]
    n = count * 27
    u = uniform_from_raw(pcg64_raw(st["state"], st["inc"], 2 * n))
    expected = []
    for i in range(n):
        if u[i] < sparsity:
            expected.append(1 if u[n + i] < 0.5 else -1)
        else:
            expected.append(0)
    got = generate_bank(count, sparsity, seed).values.reshape(-1).tolist()
    assert got == expected


def test_bank_is_immutable(bank):
    with pytest.raises(ValueError):
        bank.values[0, 0, 0, 0] = 1
    with pytest.raises(AttributeError):
        bank.sparsity = 0.5


def test_invalid_entries_rejected():
    v = np.zeros((2, 3, 3, 3), np.int8)
    v[0, 1, 1, 1] = 2
    with pytest.raises(BankValidationError):
        TernaryFilterBank(v)


def test_dense_embedding():
    zero = TernaryFilterBank(np.zeros((1, 3, 3, 3), np.int8))
    assert not bank_as_dense_weights(zero).any()
    ones = TernaryFilterBank(np.ones((1, 3, 3, 3), np.int8))
    w = bank_as_dense_weights(ones)
    assert w.sum() == 27 and w.dtype == np.float32


def test_dense_round_trip(bank):
    back = bank_from_dense_weights(bank_as_dense_weights(bank, np.float64))
    assert np.array_equal(back.values, bank.values)
    assert back.id == bank.id


def test_file_round_trip(tmp_path, bank):
    p = tmp_path / "b.lbvb"
    save_bank(bank, p)
    back = load_bank(p)
    assert back.id == bank.id
    assert np.array_equal(back.values, bank.values)
    assert back.seed == bank.seed and back.sparsity == bank.sparsity
    assert bank_to_bytes(back) == bank_to_bytes(bank)


def test_file_with_value_two_rejected(bank):
    buf = bytearray(bank_to_bytes(bank))
    buf[-1] = 2
    with pytest.raises(BankValidationError):
        bank_from_bytes(bytes(buf))


def test_file_errors(bank):
    buf = bank_to_bytes(bank)
    with pytest.raises(BadMagicError):
        bank_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(TruncatedPayloadError):
        bank_from_bytes(buf[:-3])


def test_same_seed_same_id():
    assert generate_bank(seed=5).id == generate_bank(seed=5).id
    assert generate_bank(seed=5).id != generate_bank(seed=6).id


def test_digest_matches_id(bank):
    assert bank_digest(bank) == bank.id


def test_generate_rejects_bad_sparsity():
    with pytest.raises(ValueError):
        generate_bank(sparsity=1.5)
