import struct

import numpy as np
import pytest

from partucker.analysis import center_scale
from partucker.decompose import TuckerModel, sthosvd
from partucker.io import (BadMagicError, FormatError, TruncatedFileError, VersionMismatchError,
                          generate_synthetic, read_model, read_tensor, write_model, write_tensor)
from partucker.tensor import DenseTensor


def test_one_element_roundtrip(tmp_path):
    p = tmp_path / "one.dtns"
    write_tensor(p, DenseTensor([3.5]))
    assert read_tensor(p) == DenseTensor([3.5])


def test_tensor_bytes_layout(tmp_path, rng):
    a = rng.standard_normal((2, 3, 4))
    p = tmp_path / "t.dtns"
    write_tensor(p, a)
    raw = p.read_bytes()
    head = b"DTNS" + struct.pack("<II3Q", 1, 3, 2, 3, 4)
    assert raw[:len(head)] == head
    assert raw[len(head):] == a.astype("<f8").tobytes(order="F")
    back = read_tensor(p)
    assert back.data.tobytes(order="F") == a.tobytes(order="F")
    write_tensor(tmp_path / "u.dtns", back)
    assert (tmp_path / "u.dtns").read_bytes() == raw


def test_bad_magic(tmp_path):
    p = tmp_path / "t.dtns"
    write_tensor(p, np.ones(3))
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_tensor(p)


def test_truncated_body(tmp_path):
    p = tmp_path / "t.dtns"
    write_tensor(p, np.ones((2, 2)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(TruncatedFileError):
        read_tensor(p)


def test_version_mismatch(tmp_path):
    p = tmp_path / "t.dtns"
    write_tensor(p, np.ones(2))
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_tensor(p)


def test_error_classes_are_distinct():
    kinds = {BadMagicError, TruncatedFileError, VersionMismatchError}
    assert len(kinds) == 3
    assert all(issubclass(k, FormatError) for k in kinds)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "t.dtns"
    write_tensor(p, np.ones(2))
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        read_tensor(p)


def _same_model(a, b):
    assert a.core == b.core
    assert a.original_norm == b.original_norm
    for u, v in zip(a.factors, b.factors):
        assert u.tobytes() == np.ascontiguousarray(v).tobytes()


def test_identity_model_roundtrip(tmp_path):
    m = TuckerModel(DenseTensor(np.eye(2)), [np.eye(2), np.eye(2)], 2 ** 0.5)
    p = tmp_path / "m.dtkr"
    write_model(p, m)
    _same_model(read_model(p), m)


def test_random_model_roundtrip(tmp_path, rng):
    x = rng.standard_normal((6, 5, 4))
    y, rec = center_scale(x, 1)
    m = sthosvd(y, epsilon=0.3)
    m.scaling = rec
    p = tmp_path / "m.dtkr"
    write_model(p, m)
    back = read_model(p)
    _same_model(back, m)
    assert back.scaling == rec
    write_model(tmp_path / "n.dtkr", back)
    assert (tmp_path / "n.dtkr").read_bytes() == p.read_bytes()


def test_truncated_factor_section(tmp_path, rng):
    m = sthosvd(rng.standard_normal((4, 3)), epsilon=0.1)
    p = tmp_path / "m.dtkr"
    write_model(p, m)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(TruncatedFileError, match="factor 1"):
        read_model(p)


def test_model_bad_magic(tmp_path):
    p = tmp_path / "t.dtns"
    write_tensor(p, np.ones(2))
    with pytest.raises(BadMagicError):
        read_model(p)


def test_synthetic_exact_rank():
    x = generate_synthetic((9, 8, 7), (2, 3, 4), 0.0, seed=11)
    assert sthosvd(x, epsilon=1e-8).ranks == (2, 3, 4)


def test_synthetic_full_rank():
    x = generate_synthetic((4, 3, 2), (4, 3, 2), 0.0, seed=1)
    assert sthosvd(x, epsilon=1e-8).ranks == (4, 3, 2)


def test_synthetic_reproducible():
    a = generate_synthetic((5, 4), (2, 2), 0.1, seed=7)
    b = generate_synthetic((5, 4), (2, 2), 0.1, seed=7)
    c = generate_synthetic((5, 4), (2, 2), 0.1, seed=8)
    assert a == b
    assert a != c


def test_synthetic_noise_level():
    clean = generate_synthetic((30, 30, 30), (3, 3, 3), 0.0, seed=2)
    noisy = generate_synthetic((30, 30, 30), (3, 3, 3), 0.1, seed=2)
    rel = np.linalg.norm(noisy.data - clean.data) / clean.norm()
    assert rel == pytest.approx(0.1, rel=0.05)


def test_synthetic_validation():
    with pytest.raises(ValueError):
        generate_synthetic((3, 3), (4, 1))
    with pytest.raises(ValueError):
        generate_synthetic((3, 3), (1, 1), noise=-1)
